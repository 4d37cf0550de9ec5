"""Experiment configuration: schema validation, overrides, digests.

Configs are single JSON documents. Validation fills defaults, rejects
unknown keys with path-qualified messages, and returns a normalized dict
whose canonical JSON form is the config digest recorded in manifests.
"""

import json

from .errors import ConfigError
from .ioutil import canonical_json, sha256_hex
from .nn import ARCHITECTURES
from .shifts import CORRUPTION_KINDS, SEVERITIES
from .threats import ATTACK_LOSSES, NORMS

_MISSING = object()


class Opt:
    """Leaf schema node: type, default, choices, nullability."""

    def __init__(self, types, default=_MISSING, required=False, choices=None,
                 nullable=False, item=None, check=None):
        self.types = types if isinstance(types, tuple) else (types,)
        self.default = default
        self.required = required
        self.choices = choices
        self.nullable = nullable
        self.item = item
        self.check = check


class Section:
    """Interior schema node: a mapping of known keys."""

    def __init__(self, fields, required=False, default=_MISSING):
        self.fields = fields
        self.required = required
        self.default = default


def _type_name(types):
    return " or ".join(t.__name__ for t in types)


def _validate_leaf(value, opt, path):
    if value is None:
        if opt.nullable:
            return None
        raise ConfigError("%s: must not be null" % path)
    if bool in opt.types and isinstance(value, bool):
        pass
    elif isinstance(value, bool) and bool not in opt.types:
        raise ConfigError("%s: expected %s, got bool"
                          % (path, _type_name(opt.types)))
    elif float in opt.types and isinstance(value, int):
        value = float(value)
    elif not isinstance(value, opt.types):
        raise ConfigError("%s: expected %s, got %s"
                          % (path, _type_name(opt.types), type(value).__name__))
    if opt.choices is not None and value not in opt.choices:
        raise ConfigError("%s: must be one of %s, got %r"
                          % (path, sorted(opt.choices), value))
    if opt.item is not None:
        out = []
        for i, elem in enumerate(value):
            out.append(_validate_node(elem, opt.item, "%s[%d]" % (path, i)))
        value = out
    if opt.check is not None:
        err = opt.check(value)
        if err:
            raise ConfigError("%s: %s" % (path, err))
    return value


def _validate_node(value, node, path):
    if isinstance(node, Section):
        if not isinstance(value, dict):
            raise ConfigError("%s: expected an object, got %s"
                              % (path, type(value).__name__))
        out = {}
        for key in value:
            if key not in node.fields:
                raise ConfigError("%s.%s: unknown key" % (path, key))
        for key, sub in node.fields.items():
            if key in value:
                out[key] = _validate_node(value[key], sub, "%s.%s" % (path, key))
            elif isinstance(sub, Section):
                if sub.required:
                    raise ConfigError("%s.%s: required section missing"
                                      % (path, key))
                if sub.default is not _MISSING:
                    out[key] = _validate_node(sub.default, sub,
                                              "%s.%s" % (path, key))
            else:
                if sub.required:
                    raise ConfigError("%s.%s: required key missing"
                                      % (path, key))
                if sub.default is not _MISSING:
                    if sub.default is None:
                        out[key] = None
                    else:
                        out[key] = _validate_leaf(sub.default, sub,
                                                  "%s.%s" % (path, key))
        return out
    return _validate_leaf(value, node, path)


def _positive(v):
    return None if v > 0 else "must be positive"


def _nonnegative(v):
    return None if v >= 0 else "must be nonnegative"


def _fraction(v):
    return None if 0.0 <= v < 1.0 else "must be in [0, 1)"


_THREAT = Section({
    "norm": Opt(str, required=True, choices=NORMS),
    "epsilon": Opt(float, default=None, nullable=True, check=_nonnegative),
})

_ATTACK = Section({
    "steps": Opt(int, default=40, check=_positive),
    "step_size": Opt(float, default=None, nullable=True, check=_positive),
    "loss": Opt(str, default="cross_entropy", choices=ATTACK_LOSSES),
    "restarts": Opt(int, default=1, check=_positive),
    "l1_sparsity_fraction": Opt(float, default=0.05, check=_positive),
    "rng_seed": Opt(int, default=None, nullable=True),
})

_DATASET = Section({
    "kind": Opt(str, required=True, choices=("shapes", "npz", "suite")),
    "n": Opt(int, default=2048, check=_positive),
    "size": Opt(int, default=16, check=_positive),
    "noise": Opt(float, default=0.12, check=_nonnegative),
    "name": Opt(str, default=None, nullable=True),
    "path": Opt(str, default=None, nullable=True),
    "member": Opt(str, default=None, nullable=True),
    "seed_key": Opt(str, default="data"),
})

_GRID = Section({
    "values": Opt(list, default=None, nullable=True,
                  item=Opt(float)),
    "lo": Opt(float, default=None, nullable=True),
    "hi": Opt(float, default=None, nullable=True),
    "step": Opt(float, default=None, nullable=True, check=_positive),
    "mode": Opt(str, default="convex", choices=("convex", "affine")),
})

_TRAIN_FIELDS = {
    "mode": Opt(str, default="single",
                choices=("nominal", "single", "max", "sat")),
    "epochs": Opt(float, default=10.0, check=_nonnegative),
    "batch_size": Opt(int, default=128, check=_positive),
    "peak_lr": Opt(float, default=None, nullable=True, check=_positive),
    "momentum": Opt(float, default=0.9, check=_nonnegative),
    "weight_decay": Opt(float, default=5e-4, check=_nonnegative),
    "loss": Opt(str, default="cross_entropy", choices=ATTACK_LOSSES),
    "val_fraction": Opt(float, default=0.1, check=_fraction),
    "threats": Opt(list, default=[{"norm": "nominal", "epsilon": None}],
                   item=_THREAT),
    "attack": Section(dict(_ATTACK.fields)),
}

SCHEMA = Section({
    "seed": Opt(int, default=0),
    "output_dir": Opt(str, default=None, nullable=True),
    "threads": Opt(int, default=None, nullable=True, check=_positive),
    "dataset": Section(dict(_DATASET.fields)),
    "eval_dataset": Section(dict(_DATASET.fields)),
    "model": Section({
        "arch": Opt(str, default="cnn8", choices=tuple(ARCHITECTURES)),
    }, default={}),
    "train": Section(dict(_TRAIN_FIELDS)),
    "finetune": Section({
        "base": Opt(str, required=True),
        "target": Section(dict(_THREAT.fields), required=True),
        "epochs": Opt(float, default=3.0, check=_nonnegative),
        "batch_size": Opt(int, default=128, check=_positive),
        "peak_lr": Opt(float, default=None, nullable=True, check=_positive),
        "momentum": Opt(float, default=0.9, check=_nonnegative),
        "weight_decay": Opt(float, default=5e-4, check=_nonnegative),
        "loss": Opt(str, default="cross_entropy", choices=ATTACK_LOSSES),
        "val_fraction": Opt(float, default=0.1, check=_fraction),
        "attack": Section(dict(_ATTACK.fields)),
    }),
    "eval": Section({
        "checkpoints": Opt(list, required=True, item=Opt(str)),
        "threats": Opt(list, default=[], item=_THREAT),
        "batch_size": Opt(int, default=256, check=_positive),
    }),
    "attack": Section(dict(_ATTACK.fields), default={}),
    "soup": Section({
        "checkpoints": Opt(list, required=True, item=Opt(str)),
        "weights": Opt(list, required=True, item=Opt(float)),
        "mode": Opt(str, default="affine", choices=("convex", "affine")),
    }),
    "soup_search": Section({
        "checkpoints": Opt(list, required=True, item=Opt(str)),
        "grid": Section(dict(_GRID.fields), required=True),
        "metric": Opt(str, default="clean", choices=("clean", "robust")),
        "threat": Section(dict(_THREAT.fields)),
        "top_k": Opt(int, default=5, check=_positive),
        "adaptation_size": Opt(int, default=1000, check=_positive),
    }),
    "shift": Section({
        "kinds": Opt(list, default=list(CORRUPTION_KINDS),
                     item=Opt(str, choices=CORRUPTION_KINDS)),
        "severities": Opt(list, default=list(SEVERITIES),
                          item=Opt(int, choices=SEVERITIES)),
    }, default={}),
    "few_shot": Section({
        "checkpoints": Opt(list, required=True, item=Opt(str)),
        "grid": Section(dict(_GRID.fields), required=True),
        "k_values": Opt(list, default=[10, 30, 100, 300, 500],
                        item=Opt(int, check=_positive)),
        "trials": Opt(int, default=50, check=_positive),
        "heldout_size": Opt(int, default=500, check=_positive),
    }),
    "report": Section({
        "kind": Opt(str, required=True,
                    choices=("eval", "composition", "few_shot")),
        "inputs": Opt(list, required=True, item=Opt(str)),
    }),
})


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError("cannot read config %s: %s" % (path, exc)) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config %s is not valid JSON: %s"
                          % (path, exc)) from exc
    if not isinstance(doc, dict):
        raise ConfigError("config %s: top level must be an object" % path)
    return doc


def apply_overrides(doc, assignments):
    """Apply --set key.path=value assignments; values parse as JSON first."""
    for raw in assignments:
        if "=" not in raw:
            raise ConfigError("--set expects key=value, got %r" % raw)
        key, _, text = raw.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError("--set expects key=value, got %r" % raw)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            elif not isinstance(nxt, dict):
                raise ConfigError("--set %s: %s is not an object" % (key, part))
            node = nxt
        node[parts[-1]] = value
    return doc


def validate_config(doc):
    """Normalize a raw config document against the schema."""
    return _validate_node(doc, SCHEMA, "config")


def config_digest(normalized):
    return sha256_hex(canonical_json(normalized).encode("utf-8"))


def require_section(cfg, name, command):
    if name not in cfg:
        raise ConfigError("config.%s: required by the %s command"
                          % (name, command))
    return cfg[name]
