"""Datasets: a bundled deterministic shape generator plus raw-array loaders.

The generator renders 10 distinguishable grayscale glyph classes on small
square images with per-sample jitter in position, scale, contrast, and
additive noise. It is entirely seed-determined, so experiments and tests are
hermetic: no downloads, no files, same bytes on every run.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .rng import derive_rng

CLASS_NAMES = (
    "disk", "ring", "plus", "cross", "hbars",
    "vbars", "frame", "triangle", "checker", "stripes",
)


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError("images must be (n, c, h, w), got shape %s"
                             % (self.images.shape,))
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise ValueError("labels must be one per image: %d labels, %d images"
                             % (len(self.labels), len(self.images)))
        lo, hi = float(self.images.min(initial=0.0)), float(self.images.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise ValueError("image values must lie in [0, 1], got range [%g, %g]"
                             % (lo, hi))

    def __len__(self):
        return len(self.images)

    @property
    def input_shape(self):
        return self.images.shape[1:]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def digest(self):
        h = hashlib.sha256()
        h.update(np.asarray(self.images.shape, dtype=np.int64).tobytes())
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()

    def subset(self, indices, name=None):
        indices = np.asarray(indices)
        return Dataset(
            images=self.images[indices],
            labels=self.labels[indices],
            name=name if name is not None else self.name + "/subset",
            meta=dict(self.meta),
        )


def _soft(t):
    # soft step: 0 below -0.5, 1 above 0.5, linear between
    return np.clip(t + 0.5, 0.0, 1.0)


def _render_mask(label, size, cx, cy, scale, phase):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xs - cx
    dy = ys - cy
    r = np.sqrt(dx * dx + dy * dy)
    big = 0.30 * size * scale
    thin = max(0.85, 0.055 * size)
    period = max(3.4, 0.24 * size) * scale
    edge = 0.9

    if label == 0:  # disk
        return _soft((big - r) / edge)
    if label == 1:  # ring
        return _soft((thin + 0.2 - np.abs(r - big)) / edge)
    if label == 2:  # plus
        horiz = np.minimum(_soft((thin - np.abs(dy)) / edge), _soft((big - np.abs(dx)) / edge))
        vert = np.minimum(_soft((thin - np.abs(dx)) / edge), _soft((big - np.abs(dy)) / edge))
        return np.maximum(horiz, vert)
    if label == 3:  # diagonal cross
        u = np.abs(dx - dy) / np.sqrt(2.0)
        v = np.abs(dx + dy) / np.sqrt(2.0)
        extent = _soft((big - np.maximum(np.abs(dx), np.abs(dy))) / edge)
        return np.maximum(_soft((thin - u) / edge), _soft((thin - v) / edge)) * extent
    if label == 4:  # horizontal bars
        wave = np.sin(2.0 * np.pi * (ys + phase) / period)
        return np.clip(1.6 * wave + 0.5, 0.0, 1.0)
    if label == 5:  # vertical bars
        wave = np.sin(2.0 * np.pi * (xs + phase) / period)
        return np.clip(1.6 * wave + 0.5, 0.0, 1.0)
    if label == 6:  # square frame
        q = np.maximum(np.abs(dx), np.abs(dy))
        return _soft((thin + 0.2 - np.abs(q - big)) / edge)
    if label == 7:  # filled triangle, apex up
        apex_y = cy - big
        base_y = cy + 0.75 * big
        halfwidth = (ys - apex_y) * 0.85
        inside_x = _soft((halfwidth - np.abs(dx)) / edge)
        below_apex = _soft((ys - apex_y) / edge)
        above_base = _soft((base_y - ys) / edge)
        return inside_x * below_apex * above_base
    if label == 8:  # checkerboard
        cell = max(2, int(round(period / 2.0)))
        return (((xs + phase).astype(np.int64) // cell
                 + (ys + phase).astype(np.int64) // cell) % 2).astype(np.float64)
    if label == 9:  # diagonal stripes
        wave = np.sin(2.0 * np.pi * (xs + ys + phase) / (period * np.sqrt(2.0)))
        return np.clip(1.6 * wave + 0.5, 0.0, 1.0)
    raise ValueError("unknown shape label %d" % label)


def make_shapes(n, seed, size=16, noise=0.12, name=None):
    """Generate n jittered glyph images with balanced 10-class labels."""
    if size < 8:
        raise ValueError("shape images need size >= 8, got %d" % size)
    rng = derive_rng(seed, "shapes")
    labels = (np.arange(n) % 10)[rng.permutation(n)].astype(np.int64)
    center = (size - 1) / 2.0
    cxs = center + rng.uniform(-1.5, 1.5, n) * size / 16.0
    cys = center + rng.uniform(-1.5, 1.5, n) * size / 16.0
    scales = rng.uniform(0.85, 1.15, n)
    phases = rng.uniform(0.0, 8.0, n)
    fgs = rng.uniform(0.68, 0.95, n)
    bgs = rng.uniform(0.05, 0.32, n)
    noise_field = rng.normal(0.0, 1.0, (n, 1, size, size))

    images = np.empty((n, 1, size, size), dtype=np.float32)
    for i in range(n):
        mask = _render_mask(int(labels[i]), size, cxs[i], cys[i], scales[i], phases[i])
        img = bgs[i] + (fgs[i] - bgs[i]) * mask
        img = img + noise * noise_field[i, 0]
        images[i, 0] = np.clip(img, 0.0, 1.0)

    ds_name = name if name is not None else "shapes-n%d-s%d" % (n, seed)
    return Dataset(images=images, labels=labels, name=ds_name,
                   meta={"generator": "shapes", "seed": int(seed),
                         "size": int(size), "noise": float(noise)})


def load_npz(path, name=None):
    """Load a dataset from a .npz archive with 'images' and 'labels' arrays.

    Images may be (n, h, w) or (n, c, h, w); grayscale gains a channel axis.
    Values must already lie in [0, 1].
    """
    with np.load(path) as archive:
        if "images" not in archive or "labels" not in archive:
            raise ValueError("%s: expected arrays 'images' and 'labels'" % path)
        images = archive["images"]
        labels = archive["labels"]
    if images.ndim == 3:
        images = images[:, None, :, :]
    return Dataset(images=images, labels=labels,
                   name=name if name is not None else str(path))
