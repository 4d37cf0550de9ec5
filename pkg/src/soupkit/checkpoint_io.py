"""Binary checkpoint container.

Layout, all integers little-endian:

    bytes 0..7    magic b"SOUPCKPT"
    bytes 8..11   format version, uint32
    bytes 12..19  header length in bytes, uint64
    header        canonical JSON (sorted keys, no whitespace), UTF-8
    payloads      tensor data in header order, little-endian, C-contiguous
    trailer       SHA-256 over everything above, 32 raw bytes

The header records architecture, input shape, class count, the parameter
schema hash, lineage, validation metrics, seed, and one entry per tensor
(name, shape, dtype). Canonical JSON plus fixed payload order makes
save -> load -> save byte-identical.
"""

import hashlib
import json
import struct

import numpy as np

from .errors import DataError
from .ioutil import canonical_json
from .params import ParamVector
from .training import Checkpoint

MAGIC = b"SOUPCKPT"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = ("float32", "float64")


def _header_dict(ckpt):
    return {
        "format": "soupkit-checkpoint",
        "version": FORMAT_VERSION,
        "arch": ckpt.arch,
        "input_shape": list(ckpt.input_shape),
        "n_classes": ckpt.n_classes,
        "schema_hash": ckpt.params.schema_hash(),
        "lineage": ckpt.lineage,
        "val_metrics": ckpt.val_metrics,
        "seed": ckpt.seed,
        "tensors": [
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
            for name, arr in ckpt.params.items()
        ],
    }


def checkpoint_bytes(ckpt):
    header = canonical_json(_header_dict(ckpt)).encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<Q", len(header)),
        header,
    ]
    for _, arr in ckpt.params.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        parts.append(le.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt, path):
    blob = checkpoint_bytes(ckpt)
    with open(path, "wb") as f:
        f.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise DataError("cannot read checkpoint %s: %s" % (path, exc)) from exc
    return checkpoint_from_bytes(blob, source=str(path))


def checkpoint_from_bytes(blob, source="<bytes>"):
    if len(blob) < len(MAGIC) + 4 + 8 + 32:
        raise DataError("checkpoint %s is truncated" % source)
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError("checkpoint %s failed checksum validation" % source)
    if body[:len(MAGIC)] != MAGIC:
        raise DataError("checkpoint %s has wrong magic bytes" % source)
    off = len(MAGIC)
    version = int(np.frombuffer(body, dtype="<u4", count=1, offset=off)[0])
    if version != FORMAT_VERSION:
        raise DataError("checkpoint %s has unsupported format version %d"
                        % (source, version))
    off += 4
    header_len = int(np.frombuffer(body, dtype="<u8", count=1, offset=off)[0])
    off += 8
    if off + header_len > len(body):
        raise DataError("checkpoint %s is truncated" % source)
    try:
        header = json.loads(body[off:off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError("checkpoint %s has a corrupt header: %s"
                        % (source, exc)) from exc
    off += header_len

    items = []
    for entry in header["tensors"]:
        dtype = entry["dtype"]
        if dtype not in _ALLOWED_DTYPES:
            raise DataError("checkpoint %s declares unsupported dtype %s"
                            % (source, dtype))
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * np.dtype(dtype).itemsize
        if off + nbytes > len(body):
            raise DataError("checkpoint %s is truncated" % source)
        arr = np.frombuffer(body, dtype=np.dtype(dtype).newbyteorder("<"),
                            count=count, offset=off)
        items.append((entry["name"],
                      arr.astype(dtype, copy=True).reshape(shape)))
        off += nbytes
    if off != len(body):
        raise DataError("checkpoint %s has %d trailing payload bytes"
                        % (source, len(body) - off))

    params = ParamVector(items)
    if params.schema_hash() != header["schema_hash"]:
        raise DataError(
            "checkpoint %s schema hash mismatch: stored %s, recomputed %s"
            % (source, header["schema_hash"], params.schema_hash()))
    return Checkpoint(
        params=params,
        arch=header["arch"],
        input_shape=tuple(header["input_shape"]),
        n_classes=int(header["n_classes"]),
        lineage=header["lineage"],
        val_metrics=header["val_metrics"],
        seed=int(header["seed"]),
    )
