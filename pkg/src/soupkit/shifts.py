"""Synthetic distribution shifts: severity-graded image corruptions.

Five corruption kinds, each with five severities whose parameters are fixed
constants chosen so that the mean perturbation size strictly grows with
severity and severity 5 visibly degrades a nominally trained model. All
corruptions are deterministic given their spec (including the seed used by
the stochastic ones) and keep pixels in [0, 1].
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import Dataset
from .errors import DataError
from .rng import derive_rng, derive_seed

CORRUPTION_KINDS = ("gaussian_noise", "blur", "pixelate", "quantize", "contrast")

SEVERITY_PARAMS = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),   # sigma
    "blur": (1, 2, 3, 4, 5),                            # box radius
    "pixelate": (2, 3, 4, 6, 8),                        # block factor
    "quantize": (32, 16, 8, 5, 3),                      # levels per channel
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.2),            # scale around 0.5
}

SEVERITIES = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError("kind must be one of %s, got %r"
                             % (CORRUPTION_KINDS, self.kind))
        if self.severity not in SEVERITIES:
            raise ValueError("severity must be in 1..5, got %r" % (self.severity,))

    @property
    def parameter(self):
        return SEVERITY_PARAMS[self.kind][self.severity - 1]


def quantize_midpoints(images, levels):
    """Map each pixel to the midpoint of its uniform quantization bin.

    With L levels the bin midpoints are (i + 0.5) / L for i in 0..L-1, so
    L = 2 sends every pixel to 0.25 or 0.75.
    """
    idx = np.clip(np.floor(images * levels), 0, levels - 1)
    return ((idx + 0.5) / levels).astype(images.dtype)


def block_average(images, factor):
    """Replace each factor x factor block by its mean (edge blocks may be smaller)."""
    if factor <= 1:
        return images.copy()
    out = np.empty_like(images)
    h, w = images.shape[-2], images.shape[-1]
    for bi in range(0, h, factor):
        for bj in range(0, w, factor):
            block = images[..., bi:bi + factor, bj:bj + factor]
            out[..., bi:bi + factor, bj:bj + factor] = block.mean(
                axis=(-2, -1), keepdims=True)
    return out


def apply_corruption(images, spec):
    """Corrupt one image (c, h, w) or a batch (n, c, h, w); output in [0, 1]."""
    arr = np.asarray(images, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError("expected (c, h, w) or (n, c, h, w), got shape %s"
                         % (images.shape,))
    if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ValueError("corruption inputs must lie in [0, 1]")

    p = spec.parameter
    if spec.kind == "gaussian_noise":
        rng = derive_rng(spec.seed, "gaussian_noise", spec.severity)
        out = arr + p * rng.standard_normal(arr.shape)
    elif spec.kind == "blur":
        size = 2 * int(p) + 1
        out = ndimage.uniform_filter(arr, size=(1, 1, size, size), mode="nearest")
    elif spec.kind == "pixelate":
        out = block_average(arr, int(p))
    elif spec.kind == "quantize":
        out = quantize_midpoints(block_average(arr, 2), int(p))
    elif spec.kind == "contrast":
        out = 0.5 + p * (arr - 0.5)
    else:
        raise ValueError("unknown corruption kind %r" % (spec.kind,))

    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return out[0] if single else out


def build_shift_suite(base, kinds=CORRUPTION_KINDS, severities=SEVERITIES, seed=0):
    """One corrupted copy of the base dataset per (kind, severity)."""
    suite = []
    base_digest = base.digest()
    for kind in kinds:
        for severity in severities:
            spec = CorruptionSpec(kind=kind, severity=int(severity),
                                  seed=derive_seed(seed, "shift", kind, int(severity)))
            images = apply_corruption(base.images, spec)
            suite.append(Dataset(
                images=images,
                labels=base.labels.copy(),
                name="%s+%s-s%d" % (base.name, kind, severity),
                meta={"kind": kind, "severity": int(severity),
                      "seed": int(spec.seed), "base_digest": base_digest},
            ))
    return suite


def save_suite(suite, out_dir):
    """Materialize a suite as .npy arrays plus a JSON manifest."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, ds in enumerate(suite):
        stem = "shift_%02d_%s_s%d" % (i, ds.meta["kind"], ds.meta["severity"])
        img_file = stem + "_images.npy"
        lab_file = stem + "_labels.npy"
        np.save(os.path.join(out_dir, img_file), ds.images)
        np.save(os.path.join(out_dir, lab_file), ds.labels)
        entries.append({
            "name": ds.name,
            "kind": ds.meta["kind"],
            "severity": ds.meta["severity"],
            "seed": ds.meta["seed"],
            "base_digest": ds.meta["base_digest"],
            "images": img_file,
            "labels": lab_file,
        })
    manifest = {"schema_version": 1, "entries": entries}
    with open(os.path.join(out_dir, "suite_manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return manifest


def load_suite(suite_dir):
    """Load a materialized suite back into Dataset objects."""
    manifest_path = os.path.join(suite_dir, "suite_manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError("no suite manifest at %s" % manifest_path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    suite = []
    for entry in manifest["entries"]:
        images = np.load(os.path.join(suite_dir, entry["images"]))
        labels = np.load(os.path.join(suite_dir, entry["labels"]))
        suite.append(Dataset(
            images=images, labels=labels, name=entry["name"],
            meta={"kind": entry["kind"], "severity": entry["severity"],
                  "seed": entry["seed"], "base_digest": entry["base_digest"]},
        ))
    return suite
