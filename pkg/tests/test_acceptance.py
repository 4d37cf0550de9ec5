"""Acceptance suite: one test per shipped guarantee.

Criteria 1-4 and 9-10 are exact property checks. Criteria 5-8 are
directional claims about adversarial training, fine-tuning, and parameter
soups on the bundled glyph task; the training setup here (budgets, epochs,
seeds) was chosen from seeded rehearsal runs so every inequality holds with
a visible margin, and everything is deterministic end to end.
"""

import json
import time

import numpy as np
import pytest

from helpers import (
    enumerate_weights_bruteforce,
    numeric_gradient,
    preactivations_near_zero,
    project_ball_oracle,
    random_tiny_model,
    relative_error,
)
from soupkit import tensor as T
from soupkit.cli import main
from soupkit.data import Dataset, make_shapes
from soupkit.evaluate import evaluate_model, predict_logits
from soupkit.nn import build_model
from soupkit.params import ParamVector, SoupWeights, affine_combine, extract
from soupkit.params import inject
from soupkit.search import (WeightGrid, enumerate_weights, few_shot_selection,
                            make_candidates, uniform_grid_values)
from soupkit.shifts import CorruptionSpec, apply_corruption, build_shift_suite
from soupkit.threats import AttackConfig, ThreatSpec, project
from soupkit.training import TrainConfig, finetune, train, train_max, train_sat

SIZE = 16
N_CLASSES = 10
LINF = ThreatSpec("linf", 0.1)
L2 = ThreatSpec("l2", 2.0)
L1 = ThreatSpec("l1", 10.0)
EVAL_ATTACK = AttackConfig()  # 40 steps, single deterministic restart


def soup_of(checkpoints, weights, mode="affine"):
    combined = affine_combine([c.params for c in checkpoints],
                              SoupWeights(list(weights), mode=mode))
    model = build_model(checkpoints[0].arch, checkpoints[0].input_shape,
                        checkpoints[0].n_classes)
    return inject(model, combined)


@pytest.fixture(scope="module")
def desk():
    """Desk-scale models and their evaluations, shared across criteria.

    Training all four models plus the eleven-point soup sweep dominates the
    suite's runtime, so it happens once here and the elapsed time is checked
    against the runtime budget in criterion 5.
    """
    t0 = time.time()
    train_ds = make_shapes(1024, seed=101, size=SIZE, name="desk-train")
    eval_ds = make_shapes(256, seed=202, size=SIZE, name="desk-eval")
    init = build_model("cnn8", (1, SIZE, SIZE), N_CLASSES, seed=11)

    nominal = train(init, train_ds, TrainConfig(
        epochs=12, batch_size=64, seed=7, threat=ThreatSpec("nominal")))
    theta_inf = train(init, train_ds, TrainConfig(
        epochs=28, batch_size=64, seed=7, threat=LINF))
    theta_inf_to_2 = finetune(theta_inf, train_ds, L2, TrainConfig(
        epochs=10, batch_size=64, seed=8, peak_lr=0.03))
    theta_max = train_max(init, train_ds, [LINF, L1], TrainConfig(
        epochs=24, batch_size=64, seed=7))

    def ev(ckpt, specs, model_id):
        return evaluate_model(ckpt.build_model(), eval_ds, specs, EVAL_ATTACK,
                              model_id=model_id, keep_flags=True)

    reports = {
        "nominal": ev(nominal, [LINF, L2], "nominal"),
        "theta_inf": ev(theta_inf, [LINF, L2], "theta_inf"),
        "theta_inf_to_2": ev(theta_inf_to_2, [LINF, L2], "theta_inf_to_2"),
        "theta_inf/union": ev(theta_inf, [LINF, L1], "theta_inf"),
        "theta_max/union": ev(theta_max, [LINF, L1], "theta_max"),
    }

    sweep = []
    for i in range(11):
        w = round(i / 10, 1)
        model = soup_of([theta_inf, theta_inf_to_2], [1.0 - w, w])
        sweep.append((w, evaluate_model(
            model, eval_ds, [LINF, L2], EVAL_ATTACK,
            model_id="sweep-w%.1f" % w, keep_flags=True)))

    return {
        "train_ds": train_ds,
        "eval_ds": eval_ds,
        "theta_inf": theta_inf,
        "theta_inf_to_2": theta_inf_to_2,
        "reports": reports,
        "sweep": sweep,
        "elapsed": time.time() - t0,
    }


def test_criterion_01_gradients_match_finite_differences():
    """Analytic gradients of 100 random small networks vs central FD."""
    t0 = time.time()
    rng = np.random.default_rng(424242)
    checked = 0
    attempts = 0
    worst = 0.0
    with T.using_dtype(np.float64):
        while checked < 100 and attempts < 1000:
            attempts += 1
            model, shape, n_classes = random_tiny_model(rng)
            x = rng.uniform(-1.0, 1.0, size=(2,) + shape)
            y = rng.integers(0, n_classes, size=2)
            if preactivations_near_zero(model, x.astype(np.float64)):
                continue
            checked += 1
            for _, p in model.named_parameters():
                p.data = p.data.astype(np.float64)

            xt = T.Tensor(x, requires_grad=True, dtype=np.float64)
            T.backward(T.cross_entropy(model(xt), y))

            def loss_at_x(flat):
                logits = model(T.Tensor(flat.reshape(x.shape),
                                        dtype=np.float64))
                return T.cross_entropy(logits, y).item()

            worst = max(worst, relative_error(
                xt.grad, numeric_gradient(loss_at_x, x.copy())))

            for p_name, p in model.named_parameters():
                base = p.data.copy()

                def loss_at_p(flat, p=p, base=base):
                    p.data = flat.reshape(base.shape)
                    try:
                        logits = model(T.Tensor(x, dtype=np.float64))
                        return T.cross_entropy(logits, y).item()
                    finally:
                        p.data = base

                fd = numeric_gradient(loss_at_p, base.copy())
                worst = max(worst, relative_error(p.grad, fd))
                model.zero_grad()
                xt = T.Tensor(x, requires_grad=True, dtype=np.float64)
                T.backward(T.cross_entropy(model(xt), y))
    assert checked >= 100, "only %d usable models in %d draws" % (checked,
                                                                  attempts)
    assert worst < 1e-4, "worst relative error %.3g" % worst
    assert time.time() - t0 < 60.0


def test_criterion_02_projections_match_penalty_oracle():
    """Ball projections vs an independent penalty solver, plus the
    alternating ball/box intersection behaving as an exact projection."""
    t0 = time.time()
    rng = np.random.default_rng(0)

    # ball projections: center the box at 0.5 with budgets <= 0.45 so the
    # box never binds and the joint projection reduces to the ball case
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(10, 50))
        v = rng.normal(0, 1.0, d) * rng.uniform(0.05, 0.6)
        eps = float(rng.uniform(0.05, 0.45))
        x = np.full(d, 0.5)
        for norm in ("l2", "l1"):
            got = project(v, x, ThreatSpec(norm, eps))
            want = project_ball_oracle(v, norm, eps)
            worst = max(worst, float(np.max(np.abs(got - want))))
    assert worst <= 1e-5, "worst oracle disagreement %.3g" % worst

    # intersection: both constraints can bind; outputs must satisfy both
    # within 1e-6 and re-projecting must not move them
    worst_ball = worst_box = worst_move = 0.0
    for _ in range(300):
        d = int(rng.integers(10, 50))
        x = rng.uniform(0, 1, d)
        v = rng.normal(0, 1.5, d)
        for norm in ("l2", "l1"):
            eps = float(rng.uniform(0.2, 2.0) if norm == "l1"
                        else rng.uniform(0.1, 0.8))
            spec = ThreatSpec(norm, eps)
            z = project(v, x, spec)
            nrm = np.abs(z).sum() if norm == "l1" else np.sqrt((z * z).sum())
            worst_ball = max(worst_ball, float(nrm - eps))
            worst_box = max(worst_box, float(np.max(
                np.maximum(-x - z, z - (1.0 - x)))))
            worst_move = max(worst_move, float(np.max(
                np.abs(project(z, x, spec) - z))))
    assert worst_ball <= 1e-6
    assert worst_box <= 1e-6
    assert worst_move <= 1e-9
    assert time.time() - t0 < 60.0


def test_criterion_03_soup_algebra():
    model_a = build_model("cnn8", (1, SIZE, SIZE), N_CLASSES, seed=1)
    model_b = build_model("cnn8", (1, SIZE, SIZE), N_CLASSES, seed=2)
    pv_a, pv_b = extract(model_a), extract(model_b)
    images = make_shapes(32, seed=505, size=SIZE).images

    # a one-hot soup is its constituent, down to logit bits
    one_hot = affine_combine([pv_a, pv_b], SoupWeights([1.0, 0.0]))
    souped = inject(build_model("cnn8", (1, SIZE, SIZE), N_CLASSES), one_hot)
    got = predict_logits(souped, images)
    want = predict_logits(model_a, images)
    assert got.tobytes() == want.tobytes()

    # soups of soups flatten to the equivalent direct combination
    s1 = affine_combine([pv_a, pv_b], SoupWeights([0.5, 0.5]))
    s2 = affine_combine([pv_a, pv_b], SoupWeights([0.25, 0.75]))
    nested = affine_combine([s1, s2], SoupWeights([0.4, 0.6]))
    direct = affine_combine([pv_a, pv_b], SoupWeights([0.35, 0.65]))
    for name, arr in nested.items():
        np.testing.assert_allclose(arr, dict(direct.items())[name],
                                   rtol=1e-6, atol=1e-12)

    # 64-bit accumulation: 0.3 * 1.0 + 0.7 * 2.0 is exactly 1.7
    ones = ParamVector([("w", np.array([1.0]))])
    twos = ParamVector([("w", np.array([2.0]))])
    mixed = affine_combine([ones, twos], SoupWeights([0.3, 0.7]))
    assert mixed.arrays[0][0] == 1.7


def test_criterion_04_grid_enumeration():
    six = uniform_grid_values(0.0, 1.0, 0.2)
    assert len(six) == 6

    for n_models, expected in ((2, 6), (3, 21)):
        grid = WeightGrid(values=six, n_models=n_models, mode="convex")
        got = enumerate_weights(grid)
        assert len(got) == expected
        assert sorted(got) == sorted(
            enumerate_weights_bruteforce(six, n_models, "convex"))

    affine_values = uniform_grid_values(-0.4, 1.4, 0.2)
    grid = WeightGrid(values=affine_values, n_models=4, mode="affine")
    got = enumerate_weights(grid)
    brute = enumerate_weights_bruteforce(affine_values, 4, "affine")
    assert len(got) == len(brute) == 480
    assert sorted(got) == sorted(brute)


def test_criterion_05_tradeoff_reproduction(desk):
    reports = desk["reports"]
    r_nom, r_inf = reports["nominal"], reports["theta_inf"]
    r_ft = reports["theta_inf_to_2"]

    # (a) adversarial training buys at least 10 points of robust accuracy
    gap = r_inf.robust_acc[LINF.key()] - r_nom.robust_acc[LINF.key()]
    assert gap >= 0.10, "linf robustness gap %.3f" % gap

    # (b) fine-tuning toward the second norm helps against it
    assert r_ft.robust_acc[L2.key()] > r_inf.robust_acc[L2.key()]

    # (c) the soup sweep: exact endpoints, valid intermediates, and an
    # intermediate that nearly keeps the fine-tune's l2 robustness while
    # beating its linf robustness
    sweep = desk["sweep"]
    assert [w for w, _ in sweep] == [round(i / 10, 1) for i in range(11)]

    def comparable(rep):
        return (rep.clean_acc, rep.robust_acc, rep.union_robust_acc,
                rep.n_points, rep.attack_cfg_digest,
                {k: v.tobytes() for k, v in rep.flags.items()})

    assert comparable(sweep[0][1]) == comparable(r_inf)
    assert comparable(sweep[-1][1]) == comparable(r_ft)

    for w, rep in sweep:
        values = [rep.clean_acc, rep.union_robust_acc]
        values.extend(rep.robust_acc.values())
        assert all(np.isfinite(v) and 0.0 <= v <= 1.0 for v in values), w

    winners = [
        w for w, rep in sweep[1:-1]
        if rep.robust_acc[L2.key()] >= r_ft.robust_acc[L2.key()] - 0.05
        and rep.robust_acc[LINF.key()] > r_ft.robust_acc[LINF.key()]
    ]
    assert winners, "no intermediate soup on the trade-off front"

    assert desk["elapsed"] < 1800.0


def test_criterion_06_union_ordering(desk):
    checked = 0
    all_reports = list(desk["reports"].values())
    all_reports.extend(rep for _, rep in desk["sweep"])
    for rep in all_reports:
        threat_keys = [k for k in rep.flags if k != "clean"]
        if not threat_keys:
            continue
        checked += 1
        stacked = np.stack([rep.flags[k] for k in threat_keys])
        union = stacked.all(axis=0).mean()
        assert rep.union_robust_acc == union
        per_threat = [rep.flags[k].mean() for k in threat_keys]
        assert union <= min(per_threat)
        assert min(per_threat) <= rep.flags["clean"].mean() + 1e-12
        assert rep.clean_acc == rep.flags["clean"].mean()
    assert checked == len(all_reports)


def test_criterion_07_max_sat_baselines(desk):
    # degenerate case: both multi-threat modes with one threat are plain
    # adversarial training, bit for bit
    small_ds = make_shapes(64, seed=5, size=8, name="tiny")
    small_init = build_model("mlp64", (1, 8, 8), N_CLASSES, seed=3)
    threat = ThreatSpec("linf", 0.05)
    cfg = TrainConfig(epochs=2, batch_size=32, seed=3, threat=threat,
                      attack=AttackConfig(steps=3))
    plain = train(small_init, small_ds, cfg)
    via_max = train_max(small_init, small_ds, [threat], cfg)
    via_sat = train_sat(small_init, small_ds, [threat], cfg)
    for other in (via_max, via_sat):
        for (name, arr), (name2, arr2) in zip(plain.params.items(),
                                              other.params.items()):
            assert name == name2
            assert arr.tobytes() == arr2.tobytes()

    # directional: training on the worst of (linf, l1) defends the union of
    # both threats at least as well as linf-only training
    r_inf = desk["reports"]["theta_inf/union"]
    r_max = desk["reports"]["theta_max/union"]
    assert r_max.union_robust_acc >= r_inf.union_robust_acc


def test_criterion_08_few_shot_selection(desk):
    base = make_shapes(1200, seed=303, size=SIZE, name="shift-base")
    spec = CorruptionSpec("gaussian_noise", 3, seed=29)
    shifted = Dataset(apply_corruption(base.images, spec), base.labels,
                      name="shift-base+gaussian_noise-s3")

    grid = WeightGrid(values=tuple(round(i / 10, 1) for i in range(11)),
                      n_models=2, mode="convex")
    theta_inf, theta_ft = desk["theta_inf"], desk["theta_inf_to_2"]
    candidates = make_candidates(grid, [theta_inf.short_id(),
                                        theta_ft.short_id()])
    result = few_shot_selection(candidates, [theta_inf, theta_ft], shifted,
                                k_values=(10, 100, 500), trials=50,
                                heldout_size=500, seed=17)

    assert result["trials"] == 50
    per_k = result["per_k"]
    assert per_k[500]["std"] <= per_k[10]["std"]
    gap = abs(per_k[100]["mean"] - result["full_pool"]["heldout_acc"])
    assert gap <= 0.02, "selection at k=100 off by %.4f" % gap


def test_criterion_09_shift_suite():
    base = make_shapes(64, seed=404, size=SIZE, name="shiftbase")
    suite = build_shift_suite(base)
    assert len(suite) == 25

    rebuilt = build_shift_suite(base)
    for ds, ds2 in zip(suite, rebuilt):
        assert ds.name == ds2.name
        assert ds.images.tobytes() == ds2.images.tobytes()

    by_kind = {}
    for ds in suite:
        dist = float(np.sqrt(((ds.images - base.images) ** 2)
                             .sum(axis=(1, 2, 3))).mean())
        by_kind.setdefault(ds.meta["kind"], []).append(
            (ds.meta["severity"], dist))
    assert len(by_kind) == 5
    for kind, rows in by_kind.items():
        dists = [d for _, d in sorted(rows)]
        assert len(dists) == 5
        assert all(a < b for a, b in zip(dists, dists[1:])), kind


def test_criterion_10_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("SOUPKIT_OUTPUT_DIR", raising=False)
    monkeypatch.delenv("SOUPKIT_THREADS", raising=False)

    train_cfg = tmp_path / "train.json"
    train_cfg.write_text(json.dumps({
        "seed": 3,
        "dataset": {"kind": "shapes", "n": 48, "size": 8, "name": "clitiny"},
        "model": {"arch": "mlp64"},
        "train": {"mode": "nominal", "epochs": 2, "batch_size": 16},
    }))

    outs = []
    for name in ("t1", "t2"):
        out = tmp_path / name
        assert main(["train", "--config", str(train_cfg),
                     "--output-dir", str(out)]) == 0
        outs.append(out)
    for rel in ("model.ckpt", "train_log.jsonl", "manifest.json"):
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()

    second = tmp_path / "second"
    assert main(["train", "--config", str(train_cfg), "--set", "seed=4",
                 "--output-dir", str(second)]) == 0

    search_cfg = tmp_path / "search.json"
    search_cfg.write_text(json.dumps({
        "dataset": {"kind": "shapes", "n": 32, "size": 8, "name": "searchds"},
        "soup_search": {
            "checkpoints": [str(outs[0] / "model.ckpt"),
                            str(second / "model.ckpt")],
            "grid": {"values": [0.0, 0.5, 1.0]},
            "metric": "clean",
        },
    }))
    search_outs = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        assert main(["soup-search", "--config", str(search_cfg),
                     "--output-dir", str(out)]) == 0
        search_outs.append(out)
    for rel in ("candidates.csv", "selection.json", "best.ckpt",
                "manifest.json"):
        assert (search_outs[0] / rel).read_bytes() == \
            (search_outs[1] / rel).read_bytes()
