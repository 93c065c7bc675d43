"""Named-tensor weight container and a small MLP used by every decoder head.

Layout (all little-endian)::

    b"S4DW" | version uint32 | manifest length uint64 | manifest JSON (utf-8)
    | zero padding to 8 bytes | tensor payloads, each 8-byte aligned

The manifest is ``{"meta": {...}, "tensors": [{name, shape, dtype, offset,
nbytes}, ...]}`` with offsets relative to the start of the payload block.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"S4DW"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4", "int64": "<i8", "uint8": "u1"}


class WeightError(ValueError):
    pass


def _pad8(n: int) -> int:
    return (-n) % 8


def save_weights(path, tensors: dict, meta: dict | None = None) -> None:
    entries, blobs, off = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.name
        if dt not in _DTYPES:
            raise WeightError(f"{name}: unsupported dtype {dt}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt,
                        "offset": off, "nbytes": len(raw)})
        blobs.append(raw + b"\0" * _pad8(len(raw)))
        off += len(blobs[-1])
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    head = MAGIC + struct.pack("<IQ", VERSION, len(manifest)) + manifest
    head += b"\0" * _pad8(len(head))
    Path(path).write_bytes(head + b"".join(blobs))


def load_weights(path, with_meta: bool = False):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise WeightError(f"{path}: bad magic {raw[:4]!r}")
    version, mlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise WeightError(f"{path}: unsupported container version {version}")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightError(f"{path}: corrupt manifest: {exc}") from exc
    base = 16 + mlen + _pad8(16 + mlen)
    out = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise WeightError(f"{path}: tensor {e['name']} truncated")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start)
        out[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"])
    return (out, manifest["meta"]) if with_meta else out


def subtree(tensors: dict, prefix: str) -> dict:
    """Entries under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


@dataclass
class MLP:
    """Dense ReLU network with a linear output layer."""

    weights: list  # [(in, out)] matrices
    biases: list

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise WeightError("MLP needs matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise WeightError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise WeightError(f"layer {i}: input {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def sizes(self) -> list:
        return [self.in_dim] + [w.shape[1] for w in self.weights]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise WeightError(f"MLP expects input width {self.in_dim}, got {x.shape[-1]}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < len(self.weights) - 1:
                x = np.maximum(x, 0.0)
        return x

    @classmethod
    def random(cls, sizes, rng: np.random.Generator, scale: float = 1.0) -> "MLP":
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            ws.append(rng.normal(0, scale / np.sqrt(a), (a, b)))
            bs.append(rng.normal(0, 0.1 * scale, b))
        return cls(ws, bs)

    @classmethod
    def zeros(cls, sizes) -> "MLP":
        return cls([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(b) for b in sizes[1:]])

    def to_tensors(self, prefix: str) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.weight"] = w
            out[f"{prefix}.{i}.bias"] = b
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str) -> "MLP":
        sub = subtree(tensors, prefix)
        n = len({k.split(".")[0] for k in sub})
        try:
            return cls([sub[f"{i}.weight"] for i in range(n)], [sub[f"{i}.bias"] for i in range(n)])
        except KeyError as exc:
            raise WeightError(f"{prefix}: missing tensor {exc}") from None
