"""Soup weight grids, candidate evaluation, and selection protocols.

Weight vectors are enumerated in integer grid-index arithmetic: a value grid
v0 + i * h turns the sum-to-one constraint into an exact integer equation
over the indices, so no floating point sums decide membership. Candidates
are orderable by their weight tuples, which is the tie-break everywhere.

The few-shot protocol fixes a held-out set once per dataset, then repeatedly
selects the best candidate on k sampled adaptation points and scores the
selection on the held-out set, reporting mean and standard deviation over
trials for each k.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .evaluate import clean_flags, predict_logits
from .params import SoupWeights, affine_combine, inject
from .rng import derive_rng
from .threats import robust_flags


@dataclass(frozen=True)
class WeightGrid:
    values: tuple
    n_models: int
    mode: str = "convex"

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) < 2:
            raise ValueError("a weight grid needs at least two values")
        diffs = np.diff(vals)
        if (diffs <= 0).any():
            raise ValueError("grid values must be strictly increasing")
        if np.abs(diffs - diffs[0]).max() > 1e-9:
            raise ValueError("grid spacing must be uniform, got %s" % (vals,))
        if self.n_models < 1:
            raise ValueError("n_models must be positive")
        if self.mode not in ("convex", "affine"):
            raise ValueError("mode must be 'convex' or 'affine'")

    @property
    def spacing(self):
        return self.values[1] - self.values[0]


def uniform_grid_values(lo, hi, step):
    """Evenly spaced grid values, rounded to suppress accumulation error."""
    count = int(round((hi - lo) / step)) + 1
    return tuple(round(lo + i * step, 10) for i in range(count))


def enumerate_weights(grid):
    """All weight vectors from the grid with exact sum 1, in lexicographic order.

    The sum constraint is tested on grid indices: with values v0 + i * h, a
    vector sums to 1 exactly when its indices sum to (1 - n * v0) / h. In
    convex mode, entries drawn from negative grid values are excluded. An
    infeasible grid yields an empty list.
    """
    n = grid.n_models
    v0 = grid.values[0]
    h = grid.spacing
    target_real = (1.0 - n * v0) / h
    target = int(round(target_real))
    if abs(target_real - target) > 1e-6:
        return []

    if grid.mode == "convex":
        allowed = [i for i, v in enumerate(grid.values) if v >= 0.0]
    else:
        allowed = list(range(len(grid.values)))
    if not allowed:
        return []
    lo_idx, hi_idx = min(allowed), max(allowed)
    allowed_set = set(allowed)

    results = []
    indices = [0] * n

    def rec(pos, remaining):
        if pos == n - 1:
            if remaining in allowed_set:
                indices[pos] = remaining
                results.append(tuple(grid.values[i] for i in indices))
            return
        slots_left = n - pos - 1
        for i in allowed:
            rest = remaining - i
            if rest < slots_left * lo_idx or rest > slots_left * hi_idx:
                continue
            indices[pos] = i
            rec(pos + 1, rest)

    rec(0, target)
    return results


@dataclass
class SoupCandidate:
    weights: SoupWeights
    constituent_ids: tuple
    scores: dict = field(default_factory=dict)  # (dataset_id, metric_id) -> float

    def weight_tuple(self):
        return self.weights.as_tuple()


def make_candidates(grid, constituent_ids):
    """One SoupCandidate per enumerated grid vector."""
    ids = tuple(constituent_ids)
    if len(ids) != grid.n_models:
        raise ValueError("grid is for %d models but %d constituent ids given"
                         % (grid.n_models, len(ids)))
    return [SoupCandidate(SoupWeights(w, mode=grid.mode), ids)
            for w in enumerate_weights(grid)]


class CleanAccuracyMetric:
    metric_id = "clean"

    def __call__(self, model, dataset):
        return float(clean_flags(model, dataset).mean())


class RobustAccuracyMetric:
    def __init__(self, threat, attack_cfg):
        self.threat = threat
        self.attack_cfg = attack_cfg
        self.metric_id = "robust:%s" % threat.key()

    def __call__(self, model, dataset):
        return float(robust_flags(model, dataset, self.threat,
                                  self.attack_cfg).mean())


class EvaluationCache:
    """Keyed on (weights, dataset id, metric id); counts hits for audits."""

    def __init__(self):
        self.store = {}
        self.hits = 0
        self.misses = 0

    def get(self, key):
        if key in self.store:
            self.hits += 1
            return self.store[key]
        self.misses += 1
        return None

    def put(self, key, value):
        self.store[key] = value


def adaptation_subset(dataset, seed, size=1000):
    """Seeded random subset used for soup selection.

    Datasets smaller than the requested size just yield all their points (in
    seeded order). Returns (subset, actual_size) so reports can record how
    many points the selection actually saw.
    """
    n = len(dataset)
    take = min(int(size), n)
    idx = np.sort(derive_rng(seed, "adaptation").choice(n, size=take,
                                                        replace=False))
    return dataset.subset(idx, name=dataset.name + "/adapt"), take


def evaluate_candidates(candidates, constituents, datasets, metrics, cache=None):
    """Score every candidate soup on every dataset under every metric.

    constituents: checkpoints aligned with each candidate's constituent_ids.
    Results land in candidate.scores[(dataset.name, metric.metric_id)] and in
    the cache, so duplicate weight vectors are never recomputed.
    """
    if cache is None:
        cache = EvaluationCache()
    if not constituents:
        raise ValueError("evaluate_candidates: no constituent checkpoints")
    if not isinstance(metrics, (list, tuple)):
        metrics = [metrics]
    vectors = [c.params for c in constituents]
    model = constituents[0].build_model()
    for cand in candidates:
        souped = False
        for ds in datasets:
            for metric in metrics:
                key = (cand.weight_tuple(), ds.name, metric.metric_id)
                cached = cache.get(key)
                if cached is None:
                    if not souped:
                        inject(model, affine_combine(vectors, cand.weights))
                        souped = True
                    try:
                        cached = metric(model, ds)
                    except Exception as exc:
                        raise RuntimeError(
                            "candidate %s failed on %s: %s"
                            % (cand.weight_tuple(), ds.name, exc)) from exc
                    cache.put(key, cached)
                cand.scores[(ds.name, metric.metric_id)] = cached
    return candidates, cache


def _score_key(cand, dataset_id, metric_id):
    return cand.scores[(dataset_id, metric_id)]


def select_best_per_dataset(candidates, dataset_id, metric_id="clean", k=5):
    """Top-k candidates on one dataset, best first.

    Ties resolve to the lexicographically smallest weight vector. A k beyond
    the candidate count returns everything, sorted.
    """
    ranked = sorted(candidates,
                    key=lambda c: (-_score_key(c, dataset_id, metric_id),
                                   c.weight_tuple()))
    return ranked[:k]


def select_best_average(candidates, dataset_ids, metric_id="clean"):
    """The candidate with the best unweighted mean score across datasets."""
    if not candidates:
        raise ValueError("select_best_average: no candidates")

    def mean_score(c):
        return float(np.mean([_score_key(c, d, metric_id) for d in dataset_ids]))

    ranked = sorted(candidates, key=lambda c: (-mean_score(c), c.weight_tuple()))
    return ranked[0]


def candidate_correctness(candidates, constituents, dataset, batch_size=512):
    """Boolean matrix (candidate, point): argmax-correct on the dataset."""
    vectors = [c.params for c in constituents]
    model = constituents[0].build_model()
    out = np.empty((len(candidates), len(dataset)), dtype=bool)
    for i, cand in enumerate(candidates):
        inject(model, affine_combine(vectors, cand.weights))
        logits = predict_logits(model, dataset.images, batch_size)
        out[i] = logits.argmax(axis=1) == dataset.labels
    return out


def _best_on_subset(candidates, correct, subset_idx):
    scores = correct[:, subset_idx].mean(axis=1)
    order = sorted(range(len(candidates)),
                   key=lambda i: (-scores[i], candidates[i].weight_tuple()))
    return order[0]


def few_shot_selection(candidates, constituents, dataset,
                       k_values=(10, 30, 100, 300, 500), trials=50,
                       heldout_size=500, seed=0):
    """Accuracy of soup selection from k adaptation examples.

    A held-out set of heldout_size points is fixed once from the seed. For
    each k and each trial, k points are sampled without replacement from the
    remaining pool, the best candidate on those points is chosen (ties to
    the lexicographically smallest weights), and its held-out accuracy is
    recorded. Also reports the held-out accuracy when selecting on the full
    remaining pool.
    """
    k_values = sorted(int(k) for k in k_values)
    n = len(dataset)
    required = heldout_size + max(k_values)
    if n < required:
        raise ValueError(
            "few_shot_selection needs at least %d points "
            "(heldout %d + max k %d), dataset has %d"
            % (required, heldout_size, max(k_values), n))
    if not candidates:
        raise ValueError("few_shot_selection: no candidates")

    correct = candidate_correctness(candidates, constituents, dataset)
    heldout_idx = derive_rng(seed, "heldout").choice(n, size=heldout_size,
                                                     replace=False)
    heldout_mask = np.zeros(n, dtype=bool)
    heldout_mask[heldout_idx] = True
    pool_idx = np.nonzero(~heldout_mask)[0]
    heldout_acc = correct[:, heldout_idx].mean(axis=1)

    per_k = {}
    for k in k_values:
        accs = np.empty(trials)
        for t in range(trials):
            trial_rng = derive_rng(seed, "trial", k, t)
            sample = pool_idx[trial_rng.choice(len(pool_idx), size=k,
                                               replace=False)]
            best = _best_on_subset(candidates, correct, sample)
            accs[t] = heldout_acc[best]
        per_k[k] = {"mean": float(accs.mean()), "std": float(accs.std())}

    full_best = _best_on_subset(candidates, correct, pool_idx)
    return {
        "per_k": per_k,
        "trials": trials,
        "heldout_size": heldout_size,
        "full_pool": {
            "weights": list(candidates[full_best].weight_tuple()),
            "heldout_acc": float(heldout_acc[full_best]),
        },
    }


def composition_report(top_candidates):
    """Weights of the top soups, grouped per constituent for plotting."""
    top_candidates = list(top_candidates)
    if not top_candidates:
        return {"constituents": [], "soups": [], "per_constituent": {}}
    ids = top_candidates[0].constituent_ids
    soups = [list(c.weight_tuple()) for c in top_candidates]
    per_constituent = {
        cid: [s[j] for s in soups] for j, cid in enumerate(ids)
    }
    return {"constituents": list(ids), "soups": soups,
            "per_constituent": per_constituent}
