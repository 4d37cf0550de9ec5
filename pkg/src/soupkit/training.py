"""Nominal and adversarial training, fine-tuning, and multi-threat baselines.

Every run is fully determined by (initial parameters, dataset, config): the
validation split, batch order, threat sampling, and attacks all draw from
streams derived from the config seed. Training replaces each batch by its
attacked counterpart under the configured threat, updates with SGD momentum
plus weight decay on a cosine schedule with a linear ramp over the first
tenth of the steps, and snapshots parameters at every epoch boundary. The
returned checkpoint is the snapshot with the best validation robust
accuracy, earliest epoch winning ties.

Multi-threat baselines: "max" attacks every threat and trains each example
on its highest-loss perturbation (ties go to the first threat in list
order); "sat" samples one threat per batch uniformly from a dedicated
stream. With a single threat both reduce to plain adversarial training,
bit-exactly, because neither consumes any extra randomness.
"""

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import NumericError
from .evaluate import clean_flags
from .ioutil import canonical_json
from .nn import build_model
from .params import ParamVector, extract, inject
from .rng import derive_rng, derive_seed
from .threats import (AttackConfig, ThreatSpec, default_train_steps,
                      robust_flags, run_attack_batch)

DEFAULT_PEAK_LR = 0.05
RAMP_FRACTION = 0.1
FINETUNE_LR_FACTOR = 0.1


@dataclass(frozen=True)
class TrainConfig:
    epochs: float = 1.0
    batch_size: int = 128
    peak_lr: float = None  # None: DEFAULT_PEAK_LR, or 0.1 x base peak when fine-tuning
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    threat: ThreatSpec = ThreatSpec("nominal")
    attack: AttackConfig = None  # None: per-threat defaults (10 steps, 20 for l1)
    loss: str = "cross_entropy"
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative, got %r" % (self.epochs,))
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.loss not in ("cross_entropy", "kl_to_clean"):
            raise ValueError("loss must be cross_entropy or kl_to_clean, got %r"
                             % (self.loss,))
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class Checkpoint:
    params: ParamVector
    arch: str
    input_shape: tuple
    n_classes: int
    lineage: list  # records of {"mode", "threats", "epochs", "loss", "peak_lr", "seed"}
    val_metrics: dict
    seed: int

    def __post_init__(self):
        if not self.lineage:
            raise ValueError("checkpoint lineage cannot be empty")
        self.input_shape = tuple(int(v) for v in self.input_shape)

    def build_model(self):
        model = build_model(self.arch, self.input_shape, self.n_classes, seed=0)
        return inject(model, self.params)

    def content_digest(self):
        h_parts = [canonical_json(self.lineage), self.arch,
                   repr(self.input_shape), str(self.n_classes)]
        payload = "|".join(h_parts).encode("utf-8")
        h = hashlib.sha256(payload)
        for name, arr in self.params.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def short_id(self):
        return self.content_digest()[:12]


def learning_rate(step, total_steps, peak, ramp_fraction=RAMP_FRACTION):
    """Linear ramp to peak over the first tenth, then cosine decay to zero."""
    if total_steps < 1:
        return 0.0
    ramp = max(1, round(total_steps * ramp_fraction))
    if step <= ramp:
        return peak * step / ramp
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - ramp) / (total_steps - ramp)))


def split_validation(n, val_fraction, seed):
    """Seed-fixed (train_indices, val_indices) partition of range(n)."""
    perm = derive_rng(seed, "val_split").permutation(n)
    n_val = int(round(n * val_fraction))
    return perm[n_val:], perm[:n_val]


def sat_threat_choices(seed, n_batches, n_threats):
    """The uniform per-batch threat indices a 'sat' run will consume."""
    rng = derive_rng(seed, "sat")
    return rng.integers(0, n_threats, size=n_batches)


def max_choice(loss_matrix):
    """Row index of the highest loss per column; first row wins ties."""
    return np.argmax(loss_matrix, axis=0)


class SGD:
    def __init__(self, named_params, momentum, weight_decay):
        self.params = [p for _, p in named_params]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - lr * v


def _resolve_attack(cfg, threat):
    if cfg.attack is not None:
        return cfg.attack
    return AttackConfig(steps=default_train_steps(threat.norm), loss=cfg.loss,
                        rng_seed=derive_seed(cfg.seed, "attack"))


def _per_example_loss(model, x_adv, y, loss_kind, clean_logits):
    with T.no_grad():
        logits = model(T.Tensor(x_adv))
        if loss_kind == "cross_entropy":
            per = T.cross_entropy(logits, y, reduction="none")
        else:
            per = T.kl_divergence(T.Tensor(clean_logits), logits, reduction="none")
    return per.data.astype(np.float64)


def _attacked_batch(model, xb, yb, mode, threat_list, attack_cfgs, sat_pick):
    """The training inputs for one batch under the given threat mode.

    Returns (x_adv, info) where info records per-threat losses for auditing
    the max rule.
    """
    active = threat_list
    if mode == "sat":
        active = [threat_list[sat_pick]]
    adv_points = []
    for spec in active:
        cfg = attack_cfgs[spec.key()]
        if spec.norm == "nominal" or spec.epsilon == 0.0:
            adv_points.append(xb)
        else:
            delta, _ = run_attack_batch(model, xb, yb, spec, cfg)
            adv_points.append(np.clip(xb + delta, 0.0, 1.0))
    if len(adv_points) == 1:
        return adv_points[0], {"chosen": np.zeros(len(yb), dtype=np.int64)}

    clean_logits = None
    losses = np.stack([
        _per_example_loss(model, adv, yb, "cross_entropy", clean_logits)
        for adv in adv_points
    ])
    chosen = max_choice(losses)
    stacked = np.stack(adv_points)
    x_adv = stacked[chosen, np.arange(len(yb))]
    return x_adv, {"chosen": chosen, "losses": losses}


def _val_metrics(model, val_ds, threat_list, attack_cfgs):
    cflags = clean_flags(model, val_ds)
    per_threat = []
    for spec in threat_list:
        per_threat.append(robust_flags(model, val_ds, spec, attack_cfgs[spec.key()]))
    robust = np.logical_and.reduce(per_threat) if per_threat else cflags
    return float(cflags.mean()), float(robust.mean())


def select_checkpoint(history):
    """The history entry with the best validation robust accuracy.

    Entries are (epoch, ParamVector, metrics). Ties resolve to the earliest
    epoch.
    """
    if not history:
        raise ValueError("select_checkpoint: empty history")
    best = history[0]
    for entry in history[1:]:
        if entry[2]["val_robust_acc"] > best[2]["val_robust_acc"]:
            best = entry
    return best


def _train_impl(model_init, dataset, cfg, mode, threat_list, base_lineage=None,
                peak_override=None, log_file=None):
    if len(dataset) == 0:
        raise ValueError("train: empty dataset")
    if not threat_list:
        raise ValueError("train: need at least one threat")

    work = build_model(model_init.arch, model_init.input_shape,
                       model_init.n_classes, seed=0)
    inject(work, extract(model_init))

    peak = peak_override if peak_override is not None else (
        cfg.peak_lr if cfg.peak_lr is not None else DEFAULT_PEAK_LR)

    train_idx, val_idx = split_validation(len(dataset), cfg.val_fraction, cfg.seed)
    if len(val_idx) == 0:
        val_idx = train_idx  # tiny runs validate on the training split
    train_images = dataset.images[train_idx]
    train_labels = dataset.labels[train_idx]
    val_ds = Dataset(dataset.images[val_idx], dataset.labels[val_idx],
                     name=dataset.name + "/val")

    attack_cfgs = {spec.key(): _resolve_attack(cfg, spec) for spec in threat_list}

    n_train = len(train_labels)
    spe = max(1, math.ceil(n_train / cfg.batch_size))
    total_steps = int(round(cfg.epochs * spe))

    batch_rng = derive_rng(cfg.seed, "batches")
    sat_picks = None
    if mode == "sat" and len(threat_list) > 1:
        sat_picks = sat_threat_choices(cfg.seed, total_steps, len(threat_list))

    opt = SGD(work.named_parameters(), cfg.momentum, cfg.weight_decay)
    history = []
    log_lines = []

    def snapshot(epoch_value, mean_loss, lr):
        vc, vr = _val_metrics(work, val_ds, threat_list, attack_cfgs)
        metrics = {"val_clean_acc": vc, "val_robust_acc": vr}
        history.append((epoch_value, extract(work), metrics))
        log_lines.append(canonical_json({
            "epoch": epoch_value, "train_loss": mean_loss,
            "val_clean_acc": vc, "val_robust_acc": vr, "lr": lr,
        }))

    if total_steps == 0:
        snapshot(0.0, None, 0.0)
    order = None
    seg_losses = []
    lr = 0.0
    for step in range(total_steps):
        pos = step % spe
        if pos == 0:
            order = batch_rng.permutation(n_train)
        lo = pos * cfg.batch_size
        hi = min(lo + cfg.batch_size, n_train)
        xb = train_images[order[lo:hi]]
        yb = train_labels[order[lo:hi]]
        lr = learning_rate(step + 1, total_steps, peak)

        sat_pick = int(sat_picks[step]) if sat_picks is not None else 0
        x_adv, _ = _attacked_batch(work, xb, yb, mode, threat_list,
                                   attack_cfgs, sat_pick)

        if cfg.loss == "cross_entropy":
            logits = work(T.Tensor(x_adv))
            loss = T.cross_entropy(logits, yb)
        else:
            clean_logits = work(T.Tensor(xb))
            adv_logits = work(T.Tensor(x_adv))
            loss = T.add(T.cross_entropy(clean_logits, yb),
                         T.kl_divergence(clean_logits.detach(), adv_logits))
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise NumericError(
                "training diverged: non-finite loss at batch %d (lr %.6g)"
                % (step, lr))
        seg_losses.append(loss_value)

        work.zero_grad()
        T.backward(loss)
        opt.step(lr)
        work.zero_grad()

        if (step + 1) % spe == 0 or step + 1 == total_steps:
            epoch_value = round((step + 1) / spe, 6)
            snapshot(epoch_value, float(np.mean(seg_losses)), lr)
            seg_losses = []

    if log_file is not None:
        with open(log_file, "w") as fh:
            fh.write("\n".join(log_lines) + "\n")

    chosen_epoch, chosen_params, chosen_metrics = select_checkpoint(history)
    entry = {
        "mode": mode if len(threat_list) > 1 else (
            "nominal" if threat_list[0].norm == "nominal" else "single"),
        "threats": [{"norm": s.norm, "epsilon": s.epsilon} for s in threat_list],
        "epochs": float(cfg.epochs),
        "loss": cfg.loss,
        "peak_lr": float(peak),
        "seed": int(cfg.seed),
    }
    lineage = list(base_lineage or []) + [entry]
    ckpt = Checkpoint(
        params=chosen_params,
        arch=work.arch,
        input_shape=work.input_shape,
        n_classes=work.n_classes,
        lineage=lineage,
        val_metrics=dict(chosen_metrics, epoch=chosen_epoch),
        seed=int(cfg.seed),
    )
    return ckpt, history


def train(model_init, dataset, cfg, log_file=None, return_history=False):
    """Train under cfg.threat; nominal threats mean standard training."""
    if isinstance(cfg.threat, (list, tuple)):
        raise ValueError("train takes a single threat; use train_max or train_sat")
    ckpt, history = _train_impl(model_init, dataset, cfg, "single",
                                [cfg.threat], log_file=log_file)
    return (ckpt, history) if return_history else ckpt


def train_max(model_init, dataset, threat_list, cfg, log_file=None,
              return_history=False):
    """Adversarial training on the highest-loss perturbation per example."""
    ckpt, history = _train_impl(model_init, dataset, cfg, "max",
                                list(threat_list), log_file=log_file)
    return (ckpt, history) if return_history else ckpt


def train_sat(model_init, dataset, threat_list, cfg, log_file=None,
              return_history=False):
    """Adversarial training on one uniformly sampled threat per batch."""
    ckpt, history = _train_impl(model_init, dataset, cfg, "sat",
                                list(threat_list), log_file=log_file)
    return (ckpt, history) if return_history else ckpt


def finetune(base, dataset, target, cfg, log_file=None, return_history=False):
    """Continue training a checkpoint against a new threat.

    Runs at a tenth of the base run's peak learning rate unless cfg.peak_lr
    overrides it, and appends (target, epochs) to the lineage. The base
    checkpoint is never mutated.
    """
    model = base.build_model()
    peak = cfg.peak_lr
    if peak is None:
        base_peak = base.lineage[-1].get("peak_lr", DEFAULT_PEAK_LR)
        peak = FINETUNE_LR_FACTOR * base_peak
    ckpt, history = _train_impl(model, dataset, cfg,
                                mode="single", threat_list=[target],
                                base_lineage=base.lineage,
                                peak_override=peak, log_file=log_file)
    return (ckpt, history) if return_history else ckpt
