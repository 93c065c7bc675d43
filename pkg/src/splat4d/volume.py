"""Sparse voxel feature volume, sparse 3D U-Net, trilinear queries and the
close-range geometry decoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .gaussians import quat_identity_bias
from .ingest import FeatureCloud
from .weights import MLP, WeightError, subtree

log = logging.getLogger(__name__)

VOXEL_SIZE = 0.1
RECURSION_DEPTH = 2
BN_EPS = 1e-5

_BIAS = 1 << 19
_SPAN = 1 << 20

# 3x3x3 neighborhood, lexicographic in (dx, dy, dz)
KERNEL_OFFSETS = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), -1).reshape(27, 3)


def encode_coords(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64) + _BIAS
    if np.any(c < 0) or np.any(c >= _SPAN):
        raise ValueError("voxel coordinates out of hashable range")
    return (c[:, 0] * _SPAN + c[:, 1]) * _SPAN + c[:, 2]


class VoxelIndex:
    """Coordinate -> row lookup via sorted hash keys."""

    def __init__(self, coords: np.ndarray):
        keys = encode_coords(coords)
        self.order = np.argsort(keys, kind="stable")
        self.keys = keys[self.order]
        if len(self.keys) > 1 and np.any(self.keys[1:] == self.keys[:-1]):
            raise ValueError("duplicate voxel coordinates")

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index per query coordinate, -1 where unoccupied."""
        coords = np.asarray(coords, dtype=np.int64)
        out = np.full(len(coords), -1, dtype=np.int64)
        c = coords + _BIAS
        inrange = np.all((c >= 0) & (c < _SPAN), axis=1)
        if not inrange.any() or len(self.keys) == 0:
            return out
        q = encode_coords(coords[inrange])
        pos = np.searchsorted(self.keys, q)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        hit = self.keys[pos_c] == q
        sub = np.full(len(q), -1, dtype=np.int64)
        sub[hit] = self.order[pos_c[hit]]
        out[inrange] = sub
        return out


@dataclass
class FeatureVolume:
    coords: np.ndarray  # (M, 3) int64
    features: np.ndarray  # (M, C)
    voxel_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    _index: VoxelIndex | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64).reshape(len(self.coords), -1)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.voxel_size <= 0:
            raise ValueError("voxel size must be positive")

    @property
    def index(self) -> VoxelIndex:
        if self._index is None:
            self._index = VoxelIndex(self.coords)
        return self._index

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.coords)

    def centers(self) -> np.ndarray:
        return self.origin + (self.coords + 0.5) * self.voxel_size

    def with_features(self, feats: np.ndarray) -> "FeatureVolume":
        return FeatureVolume(self.coords, feats, self.voxel_size, self.origin, self._index)


def voxelize_cloud(cloud: FeatureCloud, vsize: float = VOXEL_SIZE, origin=None) -> FeatureVolume:
    if vsize <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        raise ValueError("cannot voxelize an empty cloud")
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
    ijk = np.floor((cloud.positions - origin) / vsize).astype(np.int64)
    keys = encode_coords(ijk)
    uk, first, inv = np.unique(keys, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    feats = np.zeros((len(uk), cloud.features.shape[1]))
    np.add.at(feats, inv, cloud.features)
    feats /= np.bincount(inv, minlength=len(uk))[:, None]
    return FeatureVolume(ijk[first], feats, vsize, origin)


# ---------------------------------------------------------------------------
# sparse convolutions
# ---------------------------------------------------------------------------

def downsample_coords(coords: np.ndarray) -> np.ndarray:
    c = np.floor_divide(np.asarray(coords, dtype=np.int64), 2)
    keys = encode_coords(c)
    _, first = np.unique(keys, return_index=True)
    return c[first]


def sparse_conv(in_coords, feats, kernel, out_coords=None, mode: str = "sub",
                in_index: VoxelIndex | None = None) -> np.ndarray:
    """3x3x3 sparse convolution.

    mode ``sub``: out[p] = sum_d in[p + d] W[d] on the input occupancy.
    mode ``down``: out[q] = sum_d in[2q + d] W[d].
    mode ``up`` (transposed): out[p] = sum_d in[q] W[d] over q with 2q + d = p.
    ``kernel`` is (3, 3, 3, Cin, Cout) indexed by d + 1.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    cin, cout = kernel.shape[3:]
    if feats.shape[1] != cin:
        raise WeightError(f"kernel expects {cin} input channels, got {feats.shape[1]}")
    if out_coords is None:
        if mode != "sub":
            raise ValueError(f"mode {mode!r} needs explicit output coordinates")
        out_coords = in_coords
    idx = in_index or VoxelIndex(in_coords)
    out_coords = np.asarray(out_coords, dtype=np.int64)
    out = np.zeros((len(out_coords), cout))
    wflat = kernel.reshape(27, cin, cout)
    for k, d in enumerate(KERNEL_OFFSETS):
        if mode == "sub":
            src = idx.lookup(out_coords + d)
        elif mode == "down":
            src = idx.lookup(2 * out_coords + d)
        elif mode == "up":
            num = out_coords - d
            even = np.all(num % 2 == 0, axis=1)
            src = np.full(len(out_coords), -1, dtype=np.int64)
            src[even] = idx.lookup(num[even] // 2)
        else:
            raise ValueError(f"unknown conv mode {mode!r}")
        hit = src >= 0
        if hit.any() and np.any(wflat[k]):
            out[hit] += feats[src[hit]] @ wflat[k]
    return out


@dataclass
class BatchNorm:
    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = BN_EPS

    def __call__(self, x):
        return self.gamma * (x - self.mean) / np.sqrt(self.var + self.eps) + self.beta


@dataclass(frozen=True)
class LayerSpec:
    name: str
    cin: int
    cout: int
    mode: str  # sub | down | up


# Channel chain of the close-range U-Net. deconv6 runs at stride 1 on the
# bottleneck so that three upsamplings undo the three downsamplings.
UNET_LAYERS = (
    LayerSpec("conv0", 16, 16, "sub"),
    LayerSpec("conv1", 16, 16, "down"),
    LayerSpec("conv2", 16, 32, "down"),
    LayerSpec("conv3", 32, 32, "sub"),
    LayerSpec("conv4", 32, 64, "down"),
    LayerSpec("conv5", 64, 64, "sub"),
    LayerSpec("deconv6", 64, 32, "sub"),
    LayerSpec("deconv7", 32, 32, "up"),
    LayerSpec("deconv8", 32, 16, "up"),
    LayerSpec("deconv9", 16, 16, "up"),
)
UNET_SKIPS = {"deconv7": "conv3", "deconv8": "conv1", "deconv9": "conv0"}


@dataclass
class SparseNetWeights:
    kernels: dict  # name -> (3, 3, 3, cin, cout)
    norms: dict  # name -> BatchNorm | None

    def __post_init__(self):
        for spec in UNET_LAYERS:
            if spec.name not in self.kernels:
                raise WeightError(f"missing layer {spec.name}")
            k = np.asarray(self.kernels[spec.name], dtype=np.float64)
            if k.shape != (3, 3, 3, spec.cin, spec.cout):
                raise WeightError(f"{spec.name}: kernel {k.shape}, expected {(3, 3, 3, spec.cin, spec.cout)}")
            self.kernels[spec.name] = k
            bn = self.norms.get(spec.name)
            if bn is not None:
                for nm in ("mean", "var", "gamma", "beta"):
                    if np.shape(getattr(bn, nm)) != (spec.cout,):
                        raise WeightError(f"{spec.name}.bn.{nm}: expected ({spec.cout},)")
                if np.any(np.asarray(bn.var) < 0):
                    raise WeightError(f"{spec.name}: negative BN variance")

    @classmethod
    def random(cls, seed: int, scale: float = 1.0, batchnorm: bool = True) -> "SparseNetWeights":
        rng = np.random.default_rng(seed)
        kernels, norms = {}, {}
        for s in UNET_LAYERS:
            kernels[s.name] = rng.normal(0, scale / np.sqrt(27 * s.cin), (3, 3, 3, s.cin, s.cout))
            norms[s.name] = BatchNorm(rng.normal(0, 0.05, s.cout), rng.uniform(0.5, 1.5, s.cout),
                                      rng.uniform(0.8, 1.2, s.cout), rng.normal(0, 0.05, s.cout)) if batchnorm else None
        return cls(kernels, norms)

    @classmethod
    def zeros(cls) -> "SparseNetWeights":
        return cls({s.name: np.zeros((3, 3, 3, s.cin, s.cout)) for s in UNET_LAYERS},
                   {s.name: None for s in UNET_LAYERS})

    def to_tensors(self, prefix: str = "unet") -> dict:
        out = {}
        for s in UNET_LAYERS:
            out[f"{prefix}.{s.name}.kernel"] = self.kernels[s.name]
            bn = self.norms.get(s.name)
            if bn is not None:
                for nm in ("mean", "var", "gamma", "beta"):
                    out[f"{prefix}.{s.name}.bn.{nm}"] = np.asarray(getattr(bn, nm))
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str = "unet") -> "SparseNetWeights":
        sub = subtree(tensors, prefix)
        known = {s.name for s in UNET_LAYERS}
        extra = {k.split(".")[0] for k in sub} - known
        if extra:
            raise WeightError(f"unexpected layers in weight file: {sorted(extra)}")
        kernels, norms = {}, {}
        for s in UNET_LAYERS:
            if f"{s.name}.kernel" not in sub:
                raise WeightError(f"missing tensor {prefix}.{s.name}.kernel")
            kernels[s.name] = sub[f"{s.name}.kernel"]
            if f"{s.name}.bn.mean" in sub:
                norms[s.name] = BatchNorm(*(sub[f"{s.name}.bn.{nm}"] for nm in ("mean", "var", "gamma", "beta")))
            else:
                norms[s.name] = None
        return cls(kernels, norms)


def sparse_unet_forward(vol: FeatureVolume, w: SparseNetWeights) -> FeatureVolume:
    if vol.channels != UNET_LAYERS[0].cin:
        raise WeightError(f"volume has {vol.channels} channels, network expects {UNET_LAYERS[0].cin}")
    levels = [vol.coords]
    for _ in range(3):
        levels.append(downsample_coords(levels[-1]))
    indices = [vol.index] + [VoxelIndex(c) for c in levels[1:]]
    lvl = 0
    x = vol.features
    saved = {}
    for spec in UNET_LAYERS:
        if spec.mode == "sub":
            y = sparse_conv(levels[lvl], x, w.kernels[spec.name], mode="sub", in_index=indices[lvl])
        elif spec.mode == "down":
            y = sparse_conv(levels[lvl], x, w.kernels[spec.name], levels[lvl + 1], "down", indices[lvl])
            lvl += 1
        else:
            y = sparse_conv(levels[lvl], x, w.kernels[spec.name], levels[lvl - 1], "up", indices[lvl])
            lvl -= 1
        bn = w.norms.get(spec.name)
        if bn is not None:
            y = bn(y)
        y = np.maximum(y, 0.0)
        if spec.name in UNET_SKIPS:
            y = y + saved[UNET_SKIPS[spec.name]]
        saved[spec.name] = y
        x = y
    assert lvl == 0
    return vol.with_features(x)


# ---------------------------------------------------------------------------
# queries and decoding
# ---------------------------------------------------------------------------

_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


def trilinear_query(vol: FeatureVolume, x: np.ndarray) -> np.ndarray:
    """Trilinear blend of the 8 surrounding voxel centers; empty voxels count
    as zero features."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    local = (x - vol.origin) / vol.voxel_size - 0.5
    base = np.floor(local).astype(np.int64)
    t = local - base
    out = np.zeros((len(x), vol.channels))
    for c in _CORNERS:
        wgt = np.prod(np.where(c == 1, t, 1.0 - t), axis=1)
        rows = vol.index.lookup(base + c)
        hit = rows >= 0
        out[hit] += wgt[hit, None] * vol.features[rows[hit]]
    return out


@dataclass
class DecodeHeads:
    opa: MLP
    cov: MLP
    pos: MLP

    def __post_init__(self):
        c = self.opa.in_dim
        if self.cov.in_dim != c or self.pos.in_dim != c:
            raise WeightError("decode heads disagree on input width")
        for name, head, n in (("opa", self.opa, 1), ("cov", self.cov, 7), ("pos", self.pos, 3)):
            if head.out_dim != n:
                raise WeightError(f"{name} head outputs {head.out_dim}, expected {n}")

    @classmethod
    def random(cls, seed: int, channels: int = 16, hidden: int = 32, scale: float = 1.0) -> "DecodeHeads":
        rng = np.random.default_rng(seed)
        return cls(*(MLP.random([channels, hidden, n], rng, scale) for n in (1, 7, 3)))

    def to_tensors(self, prefix: str = "heads") -> dict:
        out = {}
        for nm in ("opa", "cov", "pos"):
            out.update(getattr(self, nm).to_tensors(f"{prefix}.{nm}"))
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str = "heads") -> "DecodeHeads":
        return cls(*(MLP.from_tensors(tensors, f"{prefix}.{nm}") for nm in ("opa", "cov", "pos")))


def recurse_offsets(offset_fn, x0: np.ndarray, depth: int):
    """Iterate ``d_k = offset_fn(x0 + d_{k-1})`` from ``d_0 = 0``.

    Returns the final offset and the per-iteration gaps ``max ||d_k - d_{k-1}||``.
    """
    if depth < 1:
        raise ValueError("recursion depth must be >= 1")
    d = np.zeros_like(x0, dtype=np.float64)
    gaps = []
    for _ in range(depth):
        nd = offset_fn(x0 + d)
        gaps.append(float(np.max(np.linalg.norm(nd - d, axis=-1))) if len(d) else 0.0)
        d = nd
    return d, gaps


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def init_scales_knn(positions: np.ndarray, k: int = 3, vsize: float = VOXEL_SIZE) -> np.ndarray:
    """Isotropic initial scale: mean distance to the ``k`` nearest neighbors."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if n <= k:
        log.warning("only %d points for k=%d neighbors; using voxel size", n, k)
        return np.full((n, 3), float(vsize))
    d, _ = cKDTree(positions).query(positions, k=k + 1)
    s = np.clip(d[:, 1:].mean(1), 1e-4, 10 * vsize)
    return np.repeat(s[:, None], 3, axis=1)


@dataclass
class GeometryDecode:
    means: np.ndarray
    opacities: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    offsets: np.ndarray
    gaps: list
    features: np.ndarray  # volume feature at the converged point


def decode_geometry(vol: FeatureVolume, cloud: FeatureCloud | np.ndarray, heads: DecodeHeads,
                    recursion_depth: int = RECURSION_DEPTH, knn_k: int = 3) -> GeometryDecode:
    mu0 = cloud.positions if isinstance(cloud, FeatureCloud) else np.asarray(cloud, dtype=np.float64)
    vs = vol.voxel_size

    def offset_fn(x):
        return np.tanh(heads.pos(trilinear_query(vol, x))) * vs

    delta, gaps = recurse_offsets(offset_fn, mu0, recursion_depth)
    means = mu0 + delta
    h = trilinear_query(vol, means)
    opac = sigmoid(heads.opa(h)[:, 0])
    cov = heads.cov(h)
    s_init = init_scales_knn(mu0, knn_k, vs)
    # residual applied in softplus space keeps scales positive
    scales = softplus(softplus_inv(s_init) + cov[:, :3])
    quats = quat_identity_bias(cov[:, 3:7])
    return GeometryDecode(means, opac, quats, scales, delta, gaps, h)
