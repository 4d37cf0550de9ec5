"""Flat named parameter vectors and their affine combinations.

A ParamVector is an immutable ordered list of (name, array) pairs with a
schema hash over names, shapes, and order. Vectors with equal schemas can be
combined into soups: elementwise weighted sums with weights summing to 1.
Combination accumulates in float64 and casts back to the stored precision,
so extrapolated weights that nearly cancel do not lose accuracy, and exact
zero weights are skipped so one-hot combinations reproduce their constituent
bit-for-bit.
"""

import hashlib

import numpy as np

AFFINE_SUM_TOL = 1e-9


class ParamVector:
    def __init__(self, items):
        names = []
        arrays = []
        for name, arr in items:
            arr = np.array(arr, copy=True)
            arr.setflags(write=False)
            names.append(str(name))
            arrays.append(arr)
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        if not names:
            raise ValueError("a parameter vector cannot be empty")
        self._names = tuple(names)
        self._arrays = tuple(arrays)

    @property
    def names(self):
        return self._names

    @property
    def arrays(self):
        return self._arrays

    def items(self):
        return list(zip(self._names, self._arrays))

    def __getitem__(self, name):
        try:
            return self._arrays[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def __len__(self):
        return len(self._names)

    def schema(self):
        return tuple((n, tuple(a.shape)) for n, a in zip(self._names, self._arrays))

    def schema_hash(self):
        h = hashlib.sha256()
        for name, shape in self.schema():
            h.update(name.encode("utf-8"))
            h.update(repr(shape).encode("ascii"))
            h.update(b"|")
        return h.hexdigest()

    def n_parameters(self):
        return int(sum(a.size for a in self._arrays))

    def __repr__(self):
        return "ParamVector(%d tensors, %d parameters)" % (
            len(self._names), self.n_parameters())


def _first_schema_mismatch(a, b):
    for (na, sa), (nb, sb) in zip(a.schema(), b.schema()):
        if na != nb or sa != sb:
            return "%s%s vs %s%s" % (na, sa, nb, sb)
    return "%d tensors vs %d tensors" % (len(a), len(b))


def _require_same_schema(a, b, op):
    if a.schema_hash() != b.schema_hash():
        raise ValueError("%s: parameter schemas differ, first mismatch: %s"
                         % (op, _first_schema_mismatch(a, b)))


def extract(model):
    """Snapshot a model's parameters into an immutable ParamVector."""
    return ParamVector((name, t.data) for name, t in model.named_parameters())


def inject(model, pv):
    """Copy a ParamVector's values into a model, preserving model precision."""
    model_pv = extract(model)
    _require_same_schema(model_pv, pv, "inject")
    for (_, tensor), (_, arr) in zip(model.named_parameters(), pv.items()):
        tensor.data = arr.astype(tensor.data.dtype, copy=True)
    return model


class SoupWeights:
    """A weight vector with sum 1; convex additionally means nonnegative."""

    def __init__(self, weights, mode="affine"):
        if mode not in ("convex", "affine"):
            raise ValueError("mode must be 'convex' or 'affine', got %r" % (mode,))
        w = np.asarray(list(weights), dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a nonempty 1-d sequence")
        total = float(w.sum())
        if abs(total - 1.0) > AFFINE_SUM_TOL:
            raise ValueError("soup weights must sum to 1 within %g, got sum %.17g"
                             % (AFFINE_SUM_TOL, total))
        if mode == "convex" and (w < 0).any():
            raise ValueError("convex soup weights must be nonnegative, got %s"
                             % (w.tolist(),))
        w.setflags(write=False)
        self.weights = w
        self.mode = mode

    def __len__(self):
        return len(self.weights)

    def __iter__(self):
        return iter(self.weights)

    def as_tuple(self):
        return tuple(float(v) for v in self.weights)

    def __repr__(self):
        return "SoupWeights(%s, mode=%s)" % (self.weights.tolist(), self.mode)


def affine_combine(vectors, soup_weights):
    """Elementwise weighted sum of parameter vectors.

    Accumulates in float64 and casts to the first vector's precision. Exact
    zero weights contribute nothing, so one-hot weights return an exact copy
    of the selected vector.
    """
    vectors = list(vectors)
    if not vectors:
        raise ValueError("affine_combine: need at least one vector")
    if not isinstance(soup_weights, SoupWeights):
        soup_weights = SoupWeights(soup_weights)
    if len(soup_weights) != len(vectors):
        raise ValueError("affine_combine: %d weights for %d vectors"
                         % (len(soup_weights), len(vectors)))
    for v in vectors[1:]:
        _require_same_schema(vectors[0], v, "affine_combine")

    out_items = []
    for idx, name in enumerate(vectors[0].names):
        base = vectors[0].arrays[idx]
        acc = None
        for w, v in zip(soup_weights.weights, vectors):
            if w == 0.0:
                continue
            term = w * v.arrays[idx].astype(np.float64)
            acc = term if acc is None else acc + term
        if acc is None:
            acc = np.zeros_like(base, dtype=np.float64)
        out_items.append((name, acc.astype(base.dtype)))
    return ParamVector(out_items)


def two_model_path(a, b, w):
    """The line through two parameter vectors: w * a + (1 - w) * b.

    w outside [0, 1] extrapolates beyond the segment.
    """
    w = float(w)
    return affine_combine([a, b], SoupWeights([w, 1.0 - w], mode="affine"))
