"""Threat models: lp-ball constraint sets, projections, and gradient attacks.

A ThreatSpec is a norm ball of radius epsilon intersected with the valid
pixel box, i.e. {delta : ||delta||_p <= eps and x + delta in [0, 1]^d}. The
linf intersection projects exactly by elementwise clamping. The l2 and l1
intersections use Dykstra alternating projections between the ball and the
box, which converges to the true Euclidean projection for convex sets.

The attack is projected gradient ascent with norm-adapted step directions,
iterate momentum 0.75, per-example step sizes that halve whenever a window
of ceil(0.22 * steps) iterations fails to improve the best loss, and
best-point tracking that prefers misclassifying iterates and breaks ties by
attack loss. The start point is delta = 0, so with a single restart the
attack consumes no randomness at all; extra restarts start from seeded
random feasible points keyed by (seed, restart, point index).
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .rng import derive_rng

NORMS = ("linf", "l2", "l1", "nominal")

ATTACK_LOSSES = ("cross_entropy", "kl_to_clean")

# iterate momentum and the stall-window fraction for step halving
MOMENTUM = 0.75
HALVING_WINDOW_FRACTION = 0.22


@dataclass(frozen=True)
class ThreatSpec:
    norm: str
    epsilon: float = 0.0

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError("norm must be one of %s, got %r" % (NORMS, self.norm))
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative, got %r" % (self.epsilon,))

    def key(self):
        return "%s@%g" % (self.norm, self.epsilon)


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 40
    initial_step_size: float = None  # resolved to 2 * eps / steps when unset
    loss: str = "cross_entropy"
    restarts: int = 1
    l1_sparsity_fraction: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive, got %r" % (self.steps,))
        if self.restarts < 1:
            raise ValueError("restarts must be positive, got %r" % (self.restarts,))
        if self.loss not in ATTACK_LOSSES:
            raise ValueError("loss must be one of %s, got %r"
                             % (ATTACK_LOSSES, self.loss))
        if not (0.0 < self.l1_sparsity_fraction <= 1.0):
            raise ValueError("l1_sparsity_fraction must be in (0, 1], got %r"
                             % (self.l1_sparsity_fraction,))

    def step_size_for(self, epsilon):
        if self.initial_step_size is not None:
            return float(self.initial_step_size)
        return 2.0 * float(epsilon) / self.steps


def default_epsilon(norm, d):
    """Desk-scale budgets: pixel-comparable to the usual 32x32x3 values."""
    d = float(d)
    if norm == "linf":
        return 8.0 / 255.0
    if norm == "l2":
        return 128.0 / 255.0 * math.sqrt(d / 3072.0)
    if norm == "l1":
        return 12.0 * d / 3072.0
    if norm == "nominal":
        return 0.0
    raise ValueError("unknown norm %r" % (norm,))


def default_train_steps(norm):
    """Attack iterations used while training; l1 needs a longer budget."""
    return 20 if norm == "l1" else 10


# ---------------------------------------------------------------------------
# projections (flat, batched, float64 internals)

def _project_box_flat(delta, x):
    return np.clip(delta, -x, 1.0 - x)


def _project_l2_ball_flat(v, eps):
    norms = np.sqrt((v * v).sum(axis=1, keepdims=True))
    scale = np.where(norms > eps, np.divide(eps, norms, out=np.ones_like(norms),
                                            where=norms > 0), 1.0)
    return v * scale


def _project_l1_ball_flat(v, eps):
    """Euclidean projection onto the l1 ball by sorted simplex projection."""
    if eps == 0.0:
        return np.zeros_like(v)
    av = np.abs(v)
    inside = av.sum(axis=1) <= eps
    if inside.all():
        return v.copy()
    u = np.sort(av, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1)
    ks = np.arange(1, v.shape[1] + 1)
    cond = u - (css - eps) / ks > 0
    rho = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = (css[np.arange(len(v)), rho] - eps) / (rho + 1)
    theta = np.maximum(theta, 0.0)
    out = np.sign(v) * np.maximum(av - theta[:, None], 0.0)
    out[inside] = v[inside]
    return out


def _dykstra_flat(delta, x, ball_project, rounds=20, tol=1e-7):
    """Alternating ball/box projections with correction terms."""
    z = delta.copy()
    p = np.zeros_like(z)
    q = np.zeros_like(z)
    for _ in range(rounds):
        y = ball_project(z + p)
        p = z + p - y
        z_new = _project_box_flat(y + q, x)
        q = y + q - z_new
        move = np.max(np.abs(z_new - z)) if z.size else 0.0
        z = z_new
        if move < tol:
            break
    return z


def _project_flat(delta, x, spec):
    """Project flat (n, d) perturbations onto the threat set, in float64."""
    if spec.norm == "nominal" or spec.epsilon == 0.0:
        return np.zeros_like(delta)
    if spec.norm == "linf":
        eps = spec.epsilon
        return np.clip(delta, np.maximum(-eps, -x), np.minimum(eps, 1.0 - x))
    if spec.norm == "l2":
        ball = lambda v: _project_l2_ball_flat(v, spec.epsilon)
    else:
        ball = lambda v: _project_l1_ball_flat(v, spec.epsilon)
    return _dykstra_flat(delta, x, ball)


def project(delta, x, spec):
    """Project a perturbation onto {||delta||_p <= eps, x + delta in [0,1]^d}.

    Accepts a single example of any shape, or a batch when both arguments
    carry a leading batch axis of equal length. Returns the same shape and
    dtype as the input perturbation. The linf case clamps elementwise in the
    input dtype and is bit-exactly idempotent.
    """
    delta = np.asarray(delta.data if isinstance(delta, T.Tensor) else delta)
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    if delta.shape != x.shape:
        raise ValueError("project: delta shape %s does not match x shape %s"
                         % (delta.shape, x.shape))
    if spec.norm == "linf":
        eps = spec.epsilon
        return np.clip(delta, np.maximum(-eps, -x), np.minimum(eps, 1.0 - x))
    flat = delta.reshape(1, -1).astype(np.float64)
    xf = x.reshape(1, -1).astype(np.float64)
    out = _project_flat(flat, xf, spec)
    return out.reshape(delta.shape).astype(delta.dtype)


def project_batch(delta, x, spec):
    """Batched project: leading axis indexes examples."""
    delta = np.asarray(delta)
    x = np.asarray(x)
    n = delta.shape[0]
    if spec.norm == "linf":
        eps = spec.epsilon
        return np.clip(delta, np.maximum(-eps, -x), np.minimum(eps, 1.0 - x))
    flat = delta.reshape(n, -1).astype(np.float64)
    xf = x.reshape(n, -1).astype(np.float64)
    out = _project_flat(flat, xf, spec)
    return out.reshape(delta.shape).astype(delta.dtype)


# ---------------------------------------------------------------------------
# attack step directions

def _directions_flat(grad, spec, cfg):
    """Norm-adapted ascent directions for flat (n, d) gradients."""
    if spec.norm == "linf":
        return np.sign(grad)
    if spec.norm == "l2":
        norms = np.sqrt((grad * grad).sum(axis=1, keepdims=True))
        return np.divide(grad, norms, out=np.zeros_like(grad), where=norms > 0)
    if spec.norm == "l1":
        d = grad.shape[1]
        k = max(1, math.ceil(cfg.l1_sparsity_fraction * d))
        order = np.argsort(-np.abs(grad), axis=1, kind="stable")[:, :k]
        out = np.zeros_like(grad)
        np.put_along_axis(out, order,
                          np.sign(np.take_along_axis(grad, order, axis=1)) / k,
                          axis=1)
        return out
    raise ValueError("no attack direction for norm %r" % (spec.norm,))


def attack_step_direction(grad, spec, cfg=None):
    """Ascent direction for one example's gradient; shape is preserved."""
    if cfg is None:
        cfg = AttackConfig()
    grad = np.asarray(grad.data if isinstance(grad, T.Tensor) else grad)
    out = _directions_flat(grad.reshape(1, -1).astype(np.float64), spec, cfg)
    return out.reshape(grad.shape).astype(grad.dtype)


# ---------------------------------------------------------------------------
# the attack

def _forward_logits(model, x_np):
    with T.no_grad():
        return model(T.Tensor(x_np)).data


def _attack_eval(model, x_np, y, loss_kind, clean_logits, need_grad):
    """Per-example loss, misclassification flags, and input gradient."""
    xt = T.Tensor(x_np, requires_grad=need_grad)
    logits = model(xt)
    if loss_kind == "cross_entropy":
        per = T.cross_entropy(logits, y, reduction="none")
    else:
        per = T.kl_divergence(T.Tensor(clean_logits), logits, reduction="none")
    miss = logits.data.argmax(axis=1) != y
    grad = None
    if need_grad:
        T.backward(per.sum(), wrt=[xt])
        grad = xt.grad.reshape(len(y), -1).astype(np.float64)
    return per.data.astype(np.float64), miss, grad


def _random_start_flat(n, d, eps, spec, x_flat, cfg, restart, offset):
    raw = np.empty((n, d))
    for i in range(n):
        rng = derive_rng(cfg.rng_seed, "restart", restart, offset + i)
        raw[i] = rng.uniform(-eps, eps, d)
    return _project_flat(raw, x_flat, spec)


def _pgd_once(model, x, y, spec, cfg, delta0, clean_logits):
    n = x.shape[0]
    x_flat = x.reshape(n, -1).astype(np.float64)
    d = x_flat.shape[1]
    steps = cfg.steps
    window = max(1, math.ceil(HALVING_WINDOW_FRACTION * steps))
    step = np.full(n, cfg.step_size_for(spec.epsilon))

    delta = _project_flat(delta0, x_flat, spec)
    prev = delta.copy()
    best_delta = None
    best_per = None
    best_miss = None
    halve_best = None
    stall = np.zeros(n, dtype=np.int64)

    for t in range(steps + 1):
        need_grad = t < steps
        x_adv = (x_flat + delta).reshape(x.shape).astype(x.dtype)
        per, miss, grad = _attack_eval(model, x_adv, y, cfg.loss,
                                       clean_logits, need_grad)
        if t == 0:
            best_delta = delta.copy()
            best_per = per.copy()
            best_miss = miss.copy()
            halve_best = per.copy()
        else:
            better = (miss & ~best_miss) | ((miss == best_miss) & (per > best_per))
            if better.any():
                best_delta[better] = delta[better]
                best_per[better] = per[better]
                best_miss[better] = miss[better]
            improved = per > halve_best
            halve_best = np.maximum(halve_best, per)
            stall = np.where(improved, 0, stall + 1)
            halve = stall >= window
            if halve.any():
                step = np.where(halve, step * 0.5, step)
                stall = np.where(halve, 0, stall)
        if not need_grad:
            break
        direction = _directions_flat(grad, spec, cfg)
        z = _project_flat(delta + step[:, None] * direction, x_flat, spec)
        if t == 0:
            new = z
        else:
            new = _project_flat(
                delta + MOMENTUM * (z - delta) + (1.0 - MOMENTUM) * (delta - prev),
                x_flat, spec)
        prev, delta = delta, new

    return best_delta, best_miss, best_per


def run_attack_batch(model, x, y, spec, cfg, point_offset=0):
    """Attack a batch; returns (delta with x's shape/dtype, success flags)."""
    if spec.norm == "nominal":
        raise ValueError("run_attack requires an lp threat, got nominal")
    if cfg is None:
        cfg = AttackConfig()
    x = np.asarray(x)
    y = np.asarray(y)
    n = x.shape[0]
    if spec.epsilon == 0.0:
        logits = _forward_logits(model, x)
        return np.zeros_like(x), logits.argmax(axis=1) != y

    clean_logits = None
    if cfg.loss == "kl_to_clean":
        clean_logits = _forward_logits(model, x)

    d = x[0].size
    best = None
    for r in range(cfg.restarts):
        if r == 0:
            delta0 = np.zeros((n, d))
        else:
            x_flat = x.reshape(n, -1).astype(np.float64)
            delta0 = _random_start_flat(n, d, spec.epsilon, spec, x_flat, cfg,
                                        r, point_offset)
        delta, miss, per = _pgd_once(model, x, y, spec, cfg, delta0, clean_logits)
        if best is None:
            best = [delta, miss, per]
        else:
            b_delta, b_miss, b_per = best
            better = (miss & ~b_miss) | ((miss == b_miss) & (per > b_per))
            b_delta[better] = delta[better]
            b_per[better] = per[better]
            b_miss[better] = miss[better]
    delta, miss, _ = best
    return delta.reshape(x.shape).astype(x.dtype), miss


def run_attack(model, x, y, spec, cfg, point_offset=0):
    """Attack one example (no batch axis) or a batch (leading batch axis)."""
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    if x.ndim == 3:
        batch = x[None]
        labels = np.asarray([y], dtype=np.int64)
        delta, success = run_attack_batch(model, batch, labels, spec, cfg,
                                          point_offset)
        return delta[0], bool(success[0])
    return run_attack_batch(model, x, np.asarray(y, dtype=np.int64), spec, cfg,
                            point_offset)


def robust_flags(model, dataset, spec, cfg, batch_size=256):
    """Per-point flags: True when the point stays correctly classified.

    Under a nominal threat (or zero budget) this is plain clean correctness.
    Flags are deterministic given the attack seed and independent of
    batch_size, because per-point randomness is keyed by dataset position.
    """
    images, labels = dataset.images, dataset.labels
    flags = np.empty(len(labels), dtype=bool)
    for start in range(0, len(labels), batch_size):
        stop = min(start + batch_size, len(labels))
        xb = images[start:stop]
        yb = labels[start:stop]
        if spec.norm == "nominal" or spec.epsilon == 0.0:
            logits = _forward_logits(model, xb)
            flags[start:stop] = logits.argmax(axis=1) == yb
        else:
            _, success = run_attack_batch(model, xb, yb, spec, cfg,
                                          point_offset=start)
            flags[start:stop] = ~success
    return flags


def with_seed(cfg, seed):
    """Copy of an AttackConfig with a different rng seed."""
    return replace(cfg, rng_seed=int(seed))
