"""Accuracy metrics and trade-off front extraction.

Union robustness over several threats is per-point: a point counts only if
it stays correctly classified under every attack. Because an attack's
best-point tracking starts from delta = 0, a clean misclassification always
yields a successful attack, so union robust accuracy can never exceed any
per-threat robust accuracy, which in turn cannot exceed clean accuracy.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import threats
from .ioutil import canonical_json, sha256_hex

REPORT_SCHEMA_VERSION = 1


def predict_logits(model, images, batch_size=256):
    """Forward a stack of images without recording gradients."""
    chunks = []
    for start in range(0, len(images), batch_size):
        with T.no_grad():
            chunks.append(model(T.Tensor(images[start:start + batch_size])).data)
    return np.concatenate(chunks, axis=0)


def clean_flags(model, dataset, batch_size=256):
    logits = predict_logits(model, dataset.images, batch_size)
    return logits.argmax(axis=1) == dataset.labels


def clean_accuracy(model, dataset, batch_size=256):
    if len(dataset) == 0:
        raise ValueError("clean_accuracy: empty dataset")
    return float(clean_flags(model, dataset, batch_size).mean())


def union_robust_accuracy(flag_vectors):
    """Mean of the elementwise AND of per-threat robustness flags."""
    flag_vectors = [np.asarray(f, dtype=bool) for f in flag_vectors]
    if not flag_vectors:
        raise ValueError("union_robust_accuracy: no flag vectors")
    n = len(flag_vectors[0])
    for f in flag_vectors[1:]:
        if len(f) != n:
            raise ValueError("union_robust_accuracy: flag lengths differ "
                             "(%d vs %d)" % (n, len(f)))
    combined = np.logical_and.reduce(flag_vectors)
    return float(combined.mean())


def softmax_ensemble_accuracy(models, dataset, batch_size=256):
    """Accuracy of the prediction made by averaging softmax outputs."""
    models = list(models)
    if not models:
        raise ValueError("softmax_ensemble_accuracy: no models")
    if len(dataset) == 0:
        raise ValueError("softmax_ensemble_accuracy: empty dataset")
    mean_probs = None
    arity = None
    for model in models:
        logits = predict_logits(model, dataset.images, batch_size)
        if arity is None:
            arity = logits.shape[1]
        elif logits.shape[1] != arity:
            raise ValueError("softmax_ensemble_accuracy: output arity differs "
                             "(%d vs %d)" % (arity, logits.shape[1]))
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        mean_probs = probs if mean_probs is None else mean_probs + probs
    mean_probs /= len(models)
    return float((mean_probs.argmax(axis=1) == dataset.labels).mean())


def tradeoff_front(sweep):
    """Mark Pareto-dominated entries in a list of (w, metric_a, metric_b).

    An entry is dominated when some other entry is strictly better on both
    metrics. Input order is preserved; duplicates never dominate each other.
    """
    sweep = list(sweep)
    if not sweep:
        raise ValueError("tradeoff_front: empty sweep")
    a = np.asarray([p[1] for p in sweep], dtype=np.float64)
    b = np.asarray([p[2] for p in sweep], dtype=np.float64)
    dominated = []
    for i in range(len(sweep)):
        dominated.append(bool(np.any((a > a[i]) & (b > b[i]))))
    return [{"w": sweep[i][0], "a": float(a[i]), "b": float(b[i]),
             "dominated": dominated[i]} for i in range(len(sweep))]


def attack_digest(threat_specs, cfg):
    payload = {
        "threats": [{"norm": t.norm, "epsilon": t.epsilon} for t in threat_specs],
        "attack": {
            "steps": cfg.steps,
            "initial_step_size": cfg.initial_step_size,
            "loss": cfg.loss,
            "restarts": cfg.restarts,
            "l1_sparsity_fraction": cfg.l1_sparsity_fraction,
            "rng_seed": cfg.rng_seed,
        },
    }
    return sha256_hex(canonical_json(payload))[:16]


@dataclass
class EvalReport:
    model_id: str
    dataset_id: str
    clean_acc: float
    robust_acc: dict  # norm key -> accuracy
    union_robust_acc: float
    n_points: int
    attack_cfg_digest: str = ""
    flags: dict = field(default_factory=dict)  # optional audit flags per threat

    def __post_init__(self):
        accs = [self.clean_acc, self.union_robust_acc] + list(self.robust_acc.values())
        for v in accs:
            if not (0.0 <= v <= 1.0):
                raise ValueError("accuracies must lie in [0, 1], got %r" % (v,))
        floor = min(self.robust_acc.values()) if self.robust_acc else self.clean_acc
        if self.union_robust_acc > floor + 1e-12 or floor > self.clean_acc + 1e-12:
            raise ValueError(
                "inconsistent report: union %.6f, min per-threat %.6f, clean %.6f"
                % (self.union_robust_acc, floor, self.clean_acc))

    def to_dict(self):
        out = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "clean_acc": self.clean_acc,
            "robust_acc": dict(self.robust_acc),
            "union_robust_acc": self.union_robust_acc,
            "n_points": self.n_points,
            "attack_cfg_digest": self.attack_cfg_digest,
        }
        if self.flags:
            out["flags"] = {k: [int(b) for b in v] for k, v in self.flags.items()}
        return out

    def to_json(self):
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        flags = {k: np.asarray(v, dtype=bool) for k, v in d.get("flags", {}).items()}
        return cls(model_id=d["model_id"], dataset_id=d["dataset_id"],
                   clean_acc=d["clean_acc"], robust_acc=dict(d["robust_acc"]),
                   union_robust_acc=d["union_robust_acc"], n_points=d["n_points"],
                   attack_cfg_digest=d.get("attack_cfg_digest", ""), flags=flags)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def evaluate_model(model, dataset, threat_specs, cfg, model_id="model",
                   keep_flags=False, batch_size=256):
    """Clean, per-threat, and union robust accuracy in one report.

    With an empty threat list the union accuracy equals clean accuracy (no
    attacks constrain it).
    """
    if len(dataset) == 0:
        raise ValueError("evaluate_model: empty dataset")
    threat_specs = list(threat_specs)
    cflags = clean_flags(model, dataset, batch_size)
    per_threat = {}
    flag_store = {"clean": cflags} if keep_flags else {}
    union_inputs = []
    for spec in threat_specs:
        flags = threats.robust_flags(model, dataset, spec, cfg, batch_size)
        per_threat[spec.key()] = float(flags.mean())
        union_inputs.append(flags)
        if keep_flags:
            flag_store[spec.key()] = flags
    if union_inputs:
        union = union_robust_accuracy(union_inputs)
    else:
        union = float(cflags.mean())
    return EvalReport(
        model_id=model_id,
        dataset_id=dataset.name,
        clean_acc=float(cflags.mean()),
        robust_acc=per_threat,
        union_robust_acc=union,
        n_points=len(dataset),
        attack_cfg_digest=attack_digest(threat_specs, cfg) if cfg else "",
        flags=flag_store,
    )
