"""Shared oracles for the test suite.

Everything here recomputes results through an independent route: nested-loop
convolutions, central finite differences, penalty-method projections via
scipy's L-BFGS-B, and Fraction-exact grid enumeration. Keeping the oracles
dumb and slow is the point.
"""

import itertools
from fractions import Fraction

import numpy as np
from scipy.optimize import minimize

from soupkit import tensor as T
from soupkit.nn import AvgPool2d, Conv2d, Flatten, Linear, Model, ReLU


def conv2d_reference(x, w, stride=1, padding=0):
    """Nested-loop convolution (cross-correlation), no cleverness."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, oh, ow), dtype=np.float64)
    for ni in range(n):
        for fi in range(f):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[ni, :, i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[ni, fi, i, j] = np.sum(patch * w[fi])
    return out.astype(x.dtype)


def numeric_gradient(f, x, h=1e-3):
    """Central finite differences of a scalar function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def random_tiny_model(rng):
    """A small random architecture for gradient checking."""
    kind = rng.integers(0, 3)
    n_classes = int(rng.integers(2, 5))
    if kind == 0:
        c, h, w = 1, 1, int(rng.integers(3, 7))
        hidden = int(rng.integers(3, 7))
        layers = [("flatten", Flatten()),
                  ("fc1", Linear(w, hidden, rng)),
                  ("act1", ReLU()),
                  ("fc2", Linear(hidden, n_classes, rng))]
    elif kind == 1:
        c, h, w = int(rng.integers(1, 3)), 4, 4
        f = int(rng.integers(2, 4))
        layers = [("conv1", Conv2d(c, f, 3, rng, padding=1)),
                  ("act1", ReLU()),
                  ("pool1", AvgPool2d(2)),
                  ("flatten", Flatten()),
                  ("fc1", Linear(f * 4, n_classes, rng))]
    else:
        c, h, w = 1, int(rng.integers(4, 7)), int(rng.integers(4, 7))
        f = int(rng.integers(2, 4))
        stride = int(rng.integers(1, 3))
        oh = (h - 2) // stride + 1
        ow = (w - 2) // stride + 1
        layers = [("conv1", Conv2d(c, f, 2, rng, stride=stride, padding=0)),
                  ("act1", ReLU()),
                  ("flatten", Flatten()),
                  ("fc1", Linear(f * oh * ow, n_classes, rng))]
    return Model("tiny", (c, h, w), n_classes, layers), (c, h, w), n_classes


def preactivations_near_zero(model, x, tol=5e-3):
    """True when any ReLU input sits close to its kink."""
    t = x if isinstance(x, T.Tensor) else T.Tensor(x)
    for name, layer in model.named_layers:
        if isinstance(layer, ReLU):
            if np.any(np.abs(t.data) < tol):
                return True
        t = layer(t)
    return False


# ---------------------------------------------------------------------------
# projection oracle: quadratic penalty with multiplier updates


def _penalty_stages(obj_builder, start, bounds, constraint_value, mu=1e3,
                    stages=25):
    """Drive an equality constraint to zero by repeated penalized solves.

    Each stage minimizes objective + lam * c + 0.5 * mu * c^2 with L-BFGS-B
    and then folds the measured violation into lam, which is the plain
    quadratic-penalty method made to converge without extreme mu values. A
    stage that fails to improve is discarded so line-search hiccups cannot
    move the iterate backwards.
    """
    point = start
    lam = 0.0
    for _ in range(stages):
        objective = obj_builder(lam)
        res = minimize(objective, point, jac=True, method="L-BFGS-B",
                       bounds=bounds,
                       options={"maxiter": 3000, "ftol": 1e-15, "gtol": 1e-12})
        if res.fun <= objective(point)[0]:
            point = res.x
        c = constraint_value(point)
        lam += mu * c
        if abs(c) < 1e-12:
            break
    return point


def project_ball_oracle(v, norm, eps, mu=1e3):
    """Euclidean projection onto an lp ball via penalized minimization.

    Points already inside the ball are their own projection; otherwise the
    projection lies on the boundary, so the norm constraint is treated as an
    equality and penalized quadratically. The l1 norm is handled by splitting
    z into nonnegative positive and negative parts, which keeps the penalized
    objective smooth everywhere.
    """
    v = np.asarray(v, dtype=np.float64)
    if norm == "l2":
        nv = float(np.sqrt(np.sum(v * v)))
        if nv <= eps:
            return v.copy()

        def build(lam):
            def objective(z):
                nz = float(np.sqrt(np.sum(z * z)))
                c = nz - eps
                val = 0.5 * np.sum((z - v) ** 2) + lam * c + 0.5 * mu * c * c
                grad = z - v
                if nz > 0:
                    grad = grad + ((lam + mu * c) / nz) * z
                return val, grad
            return objective

        return _penalty_stages(
            build, v * (eps / nv), None,
            lambda z: float(np.sqrt(np.sum(z * z))) - eps, mu)

    if norm == "l1":
        if float(np.abs(v).sum()) <= eps:
            return v.copy()
        d = v.size

        def build(lam):
            def objective(u):
                r = (u[:d] - u[d:]) - v
                c = float(np.sum(u)) - eps
                val = 0.5 * np.sum(r * r) + lam * c + 0.5 * mu * c * c
                grad = np.concatenate([r, -r]) + (lam + mu * c)
                return val, grad
            return objective

        start = np.concatenate([np.maximum(v, 0), np.maximum(-v, 0)])
        start *= eps / start.sum()
        u = _penalty_stages(build, start, [(0.0, None)] * (2 * d),
                            lambda u_: float(np.sum(u_)) - eps, mu)
        return u[:d] - u[d:]

    raise ValueError(norm)


def enumerate_weights_bruteforce(values, n_models, mode):
    """Exact-rational nested enumeration of sum-to-one grid vectors."""
    fracs = [Fraction(v).limit_denominator(10 ** 9) for v in values]
    out = []
    for combo in itertools.product(range(len(values)), repeat=n_models):
        total = sum(fracs[i] for i in combo)
        if total != 1:
            continue
        if mode == "convex" and any(fracs[i] < 0 for i in combo):
            continue
        out.append(tuple(values[i] for i in combo))
    return out


def quantize_reference(x, levels):
    """Scalar-loop midpoint quantizer over an array in [0, 1]."""
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    out = np.empty_like(flat)
    for i, value in enumerate(flat):
        cell = int(np.floor(value * levels))
        cell = min(max(cell, 0), levels - 1)
        out[i] = (cell + 0.5) / levels
    return out.reshape(np.asarray(x).shape)
