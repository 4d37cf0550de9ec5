"""Command-line surface.

Every command reads one JSON config (plus --set overrides), writes its
artifacts into an output directory, and finishes with a manifest.json
recording the config digest, seed, build id, and a SHA-256 per output file.
Outputs are write-once: an existing file aborts the command. Nothing in an
artifact depends on wall-clock time or absolute paths, so a command re-run
from its manifest's config and seed reproduces identical bytes.

Exit codes: 0 success, 2 usage/config, 3 data, 4 numeric.
"""

import argparse
import csv
import io
import json
import math
import os
import sys

from . import __version__
from .checkpoint_io import load_checkpoint, save_checkpoint
from .config import (apply_overrides, config_digest, load_config,
                     require_section, validate_config)
from .data import load_npz, make_shapes
from .errors import ConfigError, DataError, NumericError
from .evaluate import EvalReport, evaluate_model
from .ioutil import canonical_json, file_sha256, sha256_hex
from .kernels import backend_name
from .nn import build_model
from .params import SoupWeights, affine_combine
from .rng import derive_seed
from .search import (CleanAccuracyMetric, RobustAccuracyMetric, WeightGrid,
                     adaptation_subset, composition_report,
                     evaluate_candidates, few_shot_selection, make_candidates,
                     select_best_per_dataset, uniform_grid_values)
from .shifts import build_shift_suite, load_suite, save_suite
from .threats import AttackConfig, ThreatSpec, default_epsilon
from .training import Checkpoint, TrainConfig, finetune, train, train_max, train_sat


class OutputWriter:
    """Write-once output directory with per-file SHA-256 bookkeeping."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.outputs = {}
        os.makedirs(out_dir, exist_ok=True)

    def reserve(self, rel):
        path = os.path.join(self.out_dir, rel)
        if os.path.exists(path):
            raise DataError("refusing to overwrite existing output %s" % path)
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        return path

    def register(self, rel):
        self.outputs[rel] = file_sha256(os.path.join(self.out_dir, rel))

    def write_bytes(self, rel, data):
        path = self.reserve(rel)
        with open(path, "wb") as f:
            f.write(data)
        self.outputs[rel] = sha256_hex(data)

    def write_text(self, rel, text):
        self.write_bytes(rel, text.encode("utf-8"))

    def write_manifest(self, command, cfg_digest, seed, threads, extras):
        doc = {
            "command": command,
            "config_digest": cfg_digest,
            "seed": seed,
            "threads": threads,
            "build": {"version": __version__, "kernel_backend": backend_name()},
            "outputs": dict(sorted(self.outputs.items())),
        }
        doc.update(extras)
        self.write_text("manifest.json",
                        json.dumps(doc, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# config -> domain objects


def _resolve_threat(tdict, d):
    eps = tdict["epsilon"]
    if eps is None:
        eps = default_epsilon(tdict["norm"], d)
    try:
        return ThreatSpec(tdict["norm"], float(eps))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _resolve_attack(adict, master_seed):
    if adict is None:
        return None
    rng_seed = adict["rng_seed"]
    if rng_seed is None:
        rng_seed = derive_seed(master_seed, "attack")
    try:
        return AttackConfig(
            steps=adict["steps"],
            initial_step_size=adict["step_size"],
            loss=adict["loss"],
            restarts=adict["restarts"],
            l1_sparsity_fraction=adict["l1_sparsity_fraction"],
            rng_seed=int(rng_seed),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _resolve_dataset(section, master_seed, what):
    kind = section["kind"]
    if kind == "shapes":
        return make_shapes(section["n"],
                           derive_seed(master_seed, section["seed_key"]),
                           size=section["size"], noise=section["noise"],
                           name=section["name"] or "shapes")
    if kind == "npz":
        if not section["path"]:
            raise ConfigError("config.%s.path: required when kind is npz" % what)
        return load_npz(section["path"], name=section["name"])
    if kind == "suite":
        if not section["path"] or not section["member"]:
            raise ConfigError(
                "config.%s: kind suite needs both path and member" % what)
        suite = load_suite(section["path"])
        for ds in suite:
            if ds.name == section["member"]:
                return ds
        raise DataError("suite at %s has no member %r (members: %s)"
                        % (section["path"], section["member"],
                           ", ".join(ds.name for ds in suite)))
    raise ConfigError("config.%s.kind: unknown kind %r" % (what, kind))


def _resolve_grid(gdict, n_models):
    explicit = gdict["values"] is not None
    ranged = any(gdict[k] is not None for k in ("lo", "hi", "step"))
    if explicit and ranged:
        raise ConfigError("grid: give either values or lo/hi/step, not both")
    if explicit:
        values = tuple(gdict["values"])
    elif ranged:
        if any(gdict[k] is None for k in ("lo", "hi", "step")):
            raise ConfigError("grid: lo, hi, and step must all be set")
        values = uniform_grid_values(gdict["lo"], gdict["hi"], gdict["step"])
    else:
        raise ConfigError("grid: set values or lo/hi/step")
    try:
        return WeightGrid(values, n_models, gdict["mode"])
    except ValueError as exc:
        raise ConfigError("grid: %s" % exc) from exc


def _load_checkpoints(paths):
    ckpts = [load_checkpoint(p) for p in paths]
    first = ckpts[0]
    for i, c in enumerate(ckpts[1:], start=1):
        if c.params.schema_hash() != first.params.schema_hash():
            raise DataError(
                "checkpoint %s does not match the parameter schema of %s"
                % (paths[i], paths[0]))
    return ckpts


def _train_config(section, seed, threat, attack, epochs_key="epochs"):
    try:
        return TrainConfig(
            epochs=section[epochs_key],
            batch_size=section["batch_size"],
            peak_lr=section["peak_lr"],
            momentum=section["momentum"],
            weight_decay=section["weight_decay"],
            seed=seed,
            threat=threat,
            attack=attack,
            loss=section["loss"],
            val_fraction=section["val_fraction"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _checkpoint_extras(ckpt):
    return {
        "checkpoint_id": ckpt.short_id(),
        "val_metrics": ckpt.val_metrics,
        "lineage": ckpt.lineage,
    }


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg, writer, seed):
    ds = _resolve_dataset(require_section(cfg, "dataset", "train"),
                          seed, "dataset")
    tr = require_section(cfg, "train", "train")
    arch = cfg["model"]["arch"]
    d = int(math.prod(ds.input_shape))
    attack = _resolve_attack(tr.get("attack"), seed)
    mode = tr["mode"]
    if mode == "nominal":
        threats = [ThreatSpec("nominal")]
    else:
        threats = [_resolve_threat(t, d) for t in tr["threats"]]
        if not threats:
            raise ConfigError("config.train.threats: must not be empty")
        if mode == "single" and len(threats) != 1:
            raise ConfigError(
                "config.train.threats: mode single takes exactly one threat, "
                "got %d" % len(threats))
    model_init = build_model(arch, ds.input_shape, ds.n_classes, seed=seed)
    log_path = writer.reserve("train_log.jsonl")
    tcfg = _train_config(tr, seed, threats[0], attack)
    if mode in ("nominal", "single"):
        ckpt = train(model_init, ds, tcfg, log_file=log_path)
    elif mode == "max":
        ckpt = train_max(model_init, ds, threats, tcfg, log_file=log_path)
    else:
        ckpt = train_sat(model_init, ds, threats, tcfg, log_file=log_path)
    writer.register("train_log.jsonl")
    save_checkpoint(ckpt, writer.reserve("model.ckpt"))
    writer.register("model.ckpt")
    return _checkpoint_extras(ckpt)


def cmd_finetune(cfg, writer, seed):
    ds = _resolve_dataset(require_section(cfg, "dataset", "finetune"),
                          seed, "dataset")
    ft = require_section(cfg, "finetune", "finetune")
    base = load_checkpoint(ft["base"])
    d = int(math.prod(base.input_shape))
    target = _resolve_threat(ft["target"], d)
    attack = _resolve_attack(ft.get("attack"), seed)
    tcfg = _train_config(ft, seed, target, attack)
    log_path = writer.reserve("train_log.jsonl")
    ckpt = finetune(base, ds, target, tcfg, log_file=log_path)
    writer.register("train_log.jsonl")
    save_checkpoint(ckpt, writer.reserve("model.ckpt"))
    writer.register("model.ckpt")
    return _checkpoint_extras(ckpt)


def cmd_attack_eval(cfg, writer, seed):
    section = "eval_dataset" if "eval_dataset" in cfg else "dataset"
    ds = _resolve_dataset(require_section(cfg, section, "attack-eval"),
                          seed, section)
    ev = require_section(cfg, "eval", "attack-eval")
    d = int(math.prod(ds.input_shape))
    threats = [_resolve_threat(t, d) for t in ev["threats"]]
    attack = _resolve_attack(cfg["attack"], seed)
    reports = []
    for i, path in enumerate(ev["checkpoints"]):
        ckpt = load_checkpoint(path)
        model = ckpt.build_model()
        report = evaluate_model(model, ds, threats, attack,
                                model_id=ckpt.short_id(),
                                batch_size=ev["batch_size"])
        rel = "eval_%02d_%s.json" % (i, ckpt.short_id())
        writer.write_text(rel, report.to_json() + "\n")
        reports.append({"checkpoint": ckpt.short_id(), "file": rel,
                        "clean_acc": report.clean_acc,
                        "union_robust_acc": report.union_robust_acc})
    return {"reports": reports, "dataset": ds.name, "n_points": len(ds)}


def cmd_soup(cfg, writer, seed):
    sp = require_section(cfg, "soup", "soup")
    if len(sp["checkpoints"]) != len(sp["weights"]):
        raise ConfigError(
            "config.soup: %d checkpoints but %d weights"
            % (len(sp["checkpoints"]), len(sp["weights"])))
    ckpts = _load_checkpoints(sp["checkpoints"])
    try:
        weights = SoupWeights(sp["weights"], mode=sp["mode"])
    except ValueError as exc:
        raise ConfigError("config.soup.weights: %s" % exc) from exc
    combined = affine_combine([c.params for c in ckpts], weights)
    first = ckpts[0]
    souped = Checkpoint(
        params=combined,
        arch=first.arch,
        input_shape=first.input_shape,
        n_classes=first.n_classes,
        lineage=[{
            "mode": "soup",
            "combine": sp["mode"],
            "weights": [float(w) for w in weights.as_tuple()],
            "constituents": [c.short_id() for c in ckpts],
        }],
        val_metrics={},
        seed=seed,
    )
    save_checkpoint(souped, writer.reserve("soup.ckpt"))
    writer.register("soup.ckpt")
    return _checkpoint_extras(souped)


def _candidate_csv(candidates, n_models, score_key):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["w%d" % i for i in range(n_models)] + ["score"])
    for cand in candidates:
        w.writerow([repr(v) for v in cand.weight_tuple()]
                   + [repr(cand.scores[score_key])])
    return buf.getvalue()


def _search_metric(cfg, ss, d, seed):
    if ss["metric"] == "clean":
        return CleanAccuracyMetric()
    threat_cfg = ss.get("threat")
    if threat_cfg is None:
        raise ConfigError(
            "config.soup_search.threat: required when metric is robust")
    threat = _resolve_threat(threat_cfg, d)
    if threat.norm == "nominal":
        raise ConfigError("config.soup_search.threat: must be an lp threat")
    return RobustAccuracyMetric(threat, _resolve_attack(cfg["attack"], seed))


def cmd_soup_search(cfg, writer, seed):
    ss = require_section(cfg, "soup_search", "soup-search")
    ds = _resolve_dataset(require_section(cfg, "dataset", "soup-search"),
                          seed, "dataset")
    ckpts = _load_checkpoints(ss["checkpoints"])
    grid = _resolve_grid(ss["grid"], len(ckpts))
    candidates = make_candidates(grid, tuple(c.short_id() for c in ckpts))
    if not candidates:
        raise ConfigError("config.soup_search.grid: no weight vector sums to 1")
    adapt, adapt_size = adaptation_subset(ds, seed, ss["adaptation_size"])
    metric = _search_metric(cfg, ss, int(math.prod(ds.input_shape)), seed)
    candidates, cache = evaluate_candidates(candidates, ckpts, [adapt], metric)
    top = select_best_per_dataset(candidates, adapt.name, metric.metric_id,
                                  k=ss["top_k"])
    score_key = (adapt.name, metric.metric_id)
    writer.write_text("candidates.csv",
                      _candidate_csv(candidates, grid.n_models, score_key))
    best = top[0]
    souped = Checkpoint(
        params=affine_combine([c.params for c in ckpts], best.weights),
        arch=ckpts[0].arch,
        input_shape=ckpts[0].input_shape,
        n_classes=ckpts[0].n_classes,
        lineage=[{
            "mode": "soup",
            "combine": grid.mode,
            "weights": [float(w) for w in best.weight_tuple()],
            "constituents": list(best.constituent_ids),
        }],
        val_metrics={"search_score": best.scores[score_key]},
        seed=seed,
    )
    save_checkpoint(souped, writer.reserve("best.ckpt"))
    writer.register("best.ckpt")
    selection = {
        "metric": metric.metric_id,
        "dataset": ds.name,
        "adaptation_size": adapt_size,
        "n_candidates": len(candidates),
        "top": [{"weights": list(c.weight_tuple()),
                 "score": c.scores[score_key]} for c in top],
        "composition": composition_report(top),
    }
    writer.write_text("selection.json", canonical_json(selection) + "\n")
    return {
        "n_candidates": len(candidates),
        "cache": {"hits": cache.hits, "misses": cache.misses},
        "best_weights": list(best.weight_tuple()),
        "best_score": best.scores[score_key],
    }


def cmd_shift_suite(cfg, writer, seed):
    ds = _resolve_dataset(require_section(cfg, "dataset", "shift-suite"),
                          seed, "dataset")
    sh = cfg["shift"]
    suite_dir = os.path.join(writer.out_dir, "suite")
    if os.path.exists(os.path.join(suite_dir, "suite_manifest.json")):
        raise DataError("refusing to overwrite existing output %s"
                        % os.path.join(suite_dir, "suite_manifest.json"))
    suite = build_shift_suite(ds, kinds=sh["kinds"],
                              severities=sh["severities"], seed=seed)
    manifest = save_suite(suite, suite_dir)
    writer.register("suite/suite_manifest.json")
    for entry in manifest["entries"]:
        writer.register("suite/" + entry["images"])
        writer.register("suite/" + entry["labels"])
    return {
        "base_dataset": ds.name,
        "n_datasets": len(suite),
        "members": [d.name for d in suite],
    }


def cmd_few_shot(cfg, writer, seed):
    fs = require_section(cfg, "few_shot", "few-shot")
    ds = _resolve_dataset(require_section(cfg, "dataset", "few-shot"),
                          seed, "dataset")
    ckpts = _load_checkpoints(fs["checkpoints"])
    grid = _resolve_grid(fs["grid"], len(ckpts))
    candidates = make_candidates(grid, tuple(c.short_id() for c in ckpts))
    if not candidates:
        raise ConfigError("config.few_shot.grid: no weight vector sums to 1")
    try:
        result = few_shot_selection(
            candidates, ckpts, ds, k_values=fs["k_values"],
            trials=fs["trials"], heldout_size=fs["heldout_size"], seed=seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    result["dataset"] = ds.name
    result["n_candidates"] = len(candidates)
    writer.write_text("few_shot.json", canonical_json(result) + "\n")
    return {"n_candidates": len(candidates),
            "k_values": fs["k_values"], "trials": fs["trials"]}


def _report_eval_rows(inputs):
    reports = []
    for path in inputs:
        try:
            with open(path, "r", encoding="utf-8") as f:
                reports.append((os.path.basename(path),
                                EvalReport.from_dict(json.load(f))))
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise DataError("cannot read eval report %s: %s" % (path, exc))
    threat_keys = sorted({k for _, r in reports for k in r.robust_acc})
    header = (["source", "model_id", "dataset_id", "n_points", "clean_acc"]
              + ["robust_acc:" + k for k in threat_keys]
              + ["union_robust_acc"])
    rows = [header]
    for name, r in reports:
        rows.append([name, r.model_id, r.dataset_id, r.n_points, r.clean_acc]
                    + [r.robust_acc.get(k, "") for k in threat_keys]
                    + [r.union_robust_acc])
    return rows


def _report_composition_rows(inputs):
    rows = []
    for path in inputs:
        try:
            with open(path, "r", encoding="utf-8") as f:
                comp = json.load(f)["composition"]
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise DataError("cannot read selection %s: %s" % (path, exc))
        ids = comp["constituents"]
        if not rows:
            rows.append(["source", "rank"] + ["weight:%s" % c for c in ids])
        for rank, soup in enumerate(comp["soups"]):
            rows.append([os.path.basename(path), rank] + list(soup))
    return rows


def _report_few_shot_rows(inputs):
    rows = [["source", "k", "mean", "std"]]
    for path in inputs:
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = json.load(f)
            per_k = doc["per_k"]
            full = doc["full_pool"]
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise DataError("cannot read few-shot result %s: %s" % (path, exc))
        name = os.path.basename(path)
        for k in sorted(per_k, key=int):
            rows.append([name, k, per_k[k]["mean"], per_k[k]["std"]])
        rows.append([name, "full", full["heldout_acc"], 0.0])
    return rows


def cmd_report(cfg, writer, seed):
    rp = require_section(cfg, "report", "report")
    builders = {
        "eval": _report_eval_rows,
        "composition": _report_composition_rows,
        "few_shot": _report_few_shot_rows,
    }
    rows = builders[rp["kind"]](rp["inputs"])
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    writer.write_text("report.csv", buf.getvalue())
    return {"kind": rp["kind"], "n_rows": len(rows) - 1}


COMMANDS = {
    "train": cmd_train,
    "finetune": cmd_finetune,
    "attack-eval": cmd_attack_eval,
    "soup": cmd_soup,
    "soup-search": cmd_soup_search,
    "shift-suite": cmd_shift_suite,
    "few-shot": cmd_few_shot,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="soupkit",
        description="Train, attack, combine, and select small robust models.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                       dest="overrides", help="override a config key")
        p.add_argument("--output-dir", default=None)
        p.add_argument("--threads", type=int, default=None)
    return parser


def _resolve_output_dir(args, cfg):
    if args.output_dir:
        return args.output_dir
    env = os.environ.get("SOUPKIT_OUTPUT_DIR")
    if env:
        return env
    if cfg.get("output_dir"):
        return cfg["output_dir"]
    raise ConfigError("no output directory: set config.output_dir, "
                      "--output-dir, or SOUPKIT_OUTPUT_DIR")


def _resolve_threads(args, cfg):
    if args.threads is not None:
        value = args.threads
    else:
        env = os.environ.get("SOUPKIT_THREADS")
        if env is not None:
            try:
                value = int(env)
            except ValueError:
                raise ConfigError("SOUPKIT_THREADS must be an integer, got %r"
                                  % env) from None
        else:
            value = cfg.get("threads") or 1
    if value < 1:
        raise ConfigError("threads must be positive, got %d" % value)
    return value


def run(args):
    doc = load_config(args.config)
    apply_overrides(doc, args.overrides)
    cfg = validate_config(doc)
    digest = config_digest(cfg)
    out_dir = _resolve_output_dir(args, cfg)
    threads = _resolve_threads(args, cfg)
    seed = cfg["seed"]
    writer = OutputWriter(out_dir)
    extras = COMMANDS[args.command](cfg, writer, seed)
    writer.write_manifest(args.command, digest, seed, threads, extras)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except DataError as exc:
        print("data error: %s" % exc, file=sys.stderr)
        return 3
    except NumericError as exc:
        print("numeric error: %s" % exc, file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
