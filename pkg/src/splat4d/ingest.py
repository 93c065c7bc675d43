"""Global semantic point cloud construction from posed depth + feature maps."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import CameraFrame, depth_map_to_points, project_points

log = logging.getLogger(__name__)

FEATURE_DIM = 16
DEPTH_CONSISTENCY_SIGMA = 0.2  # meters
SOR_NEIGHBORS = 20
SOR_STD_RATIO = 2.0


class EmptySceneError(RuntimeError):
    pass


@dataclass
class FeatureCloud:
    positions: np.ndarray
    features: np.ndarray
    frame_index: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            self.features = self.features.reshape(n, -1)
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64).reshape(n)
        if self.features.shape[1] != FEATURE_DIM:
            raise ValueError(f"features must be {FEATURE_DIM}-dimensional, got {self.features.shape[1]}")
        if not (np.isfinite(self.positions).all() and np.isfinite(self.features).all()):
            raise ValueError("non-finite entries in feature cloud")

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx) -> "FeatureCloud":
        return FeatureCloud(self.positions[idx], self.features[idx], self.frame_index[idx])

    @staticmethod
    def concat(clouds) -> "FeatureCloud":
        clouds = list(clouds)
        if not clouds:
            return FeatureCloud(np.zeros((0, 3)), np.zeros((0, FEATURE_DIM)), np.zeros(0))
        return FeatureCloud(np.concatenate([c.positions for c in clouds]),
                            np.concatenate([c.features for c in clouds]),
                            np.concatenate([c.frame_index for c in clouds]))


@dataclass
class FrameBundle:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    features: np.ndarray  # (H, W, F)
    camera: CameraFrame

    def __post_init__(self):
        hw = (self.camera.height, self.camera.width)
        for name in ("image", "depth", "features"):
            arr = getattr(self, name)
            if arr is not None and tuple(np.shape(arr)[:2]) != hw:
                raise ValueError(f"{name} is {np.shape(arr)[:2]}, camera expects {hw}")
        if self.depth is not None and np.any(np.asarray(self.depth) < 0):
            raise ValueError("negative depth")

    @property
    def timestamp(self) -> float:
        return self.camera.timestamp


@dataclass(frozen=True)
class VolumeBounds:
    """Axis-aligned world box that feeds the close-range branch."""

    lo: tuple
    hi: tuple

    @classmethod
    def around_camera(cls, cam: CameraFrame, length: float = 80.0, height: float = 12.8,
                      width: float = 40.0, below: float = 3.2) -> "VolumeBounds":
        # world axes: x right, y down, z forward; `below` meters under the camera
        c = cam.center
        lo = (c[0] - width / 2, c[1] + below - height, c[2])
        hi = (c[0] + width / 2, c[1] + below, c[2] + length)
        return cls(tuple(float(v) for v in lo), tuple(float(v) for v in hi))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts)
        return np.all((pts >= np.asarray(self.lo)) & (pts < np.asarray(self.hi)), axis=1)

    def dense_shape(self, voxel_size: float) -> tuple:
        """(height, width, length) in voxels."""
        ext = np.asarray(self.hi) - np.asarray(self.lo)
        return tuple(int(round(v)) for v in (ext[1] / voxel_size, ext[0] / voxel_size, ext[2] / voxel_size))


# ---------------------------------------------------------------------------
# depth consistency
# ---------------------------------------------------------------------------

def depth_consistency_mask(frame_i: FrameBundle, frame_j: FrameBundle,
                           sigma: float = DEPTH_CONSISTENCY_SIGMA, relative: bool = False) -> np.ndarray:
    """Pixels of ``frame_i`` whose depth agrees with ``frame_j`` after reprojection.

    The reprojected depth is compared with ``frame_j``'s depth at the
    containing pixel. With ``relative=True`` the residual is divided by that
    depth before thresholding.
    """
    H, W = frame_i.depth.shape
    mask = np.zeros((H, W), dtype=bool)
    pts, (rows, cols) = depth_map_to_points(frame_i.depth, frame_i.camera)
    if len(pts) == 0:
        return mask
    cj = frame_j.camera
    uv, z, valid = project_points(pts, cj)
    uvs = np.where(valid[:, None], uv, -1.0)
    u = np.floor(uvs[:, 0]).astype(np.int64)
    v = np.floor(uvs[:, 1]).astype(np.int64)
    inside = valid & (u >= 0) & (u < cj.width) & (v >= 0) & (v < cj.height)
    dj = np.zeros(len(pts))
    dj[inside] = frame_j.depth[v[inside], u[inside]]
    ok = inside & (dj > 0)
    resid = np.abs(z - dj)
    if relative:
        resid = resid / np.where(dj > 0, dj, 1.0)
    mask[rows, cols] = ok & (resid < sigma)
    return mask


def consistency_masks(frames, sigma: float = DEPTH_CONSISTENCY_SIGMA, relative: bool = False,
                      neighbor_offset: int = 1):
    """Mask every frame against its temporal neighbor ``i + offset`` (the last
    frame falls back to ``i - offset``)."""
    n = len(frames)
    masks = []
    for i in range(n):
        j = i + neighbor_offset if i + neighbor_offset < n else i - neighbor_offset
        j = min(max(j, 0), n - 1)
        masks.append(depth_consistency_mask(frames[i], frames[j], sigma, relative))
    return masks


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PCABasis:
    mean: np.ndarray  # (F,)
    components: np.ndarray  # (16, F); zero rows for missing rank
    explained_variance: np.ndarray  # (16,)

    def transform(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.mean) @ self.components.T


def pca_compress(maps, n_components: int = FEATURE_DIM):
    """Project every pixel of every map onto the top principal directions of
    all pixels pooled together. Returns ``(compressed maps, basis)``."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    F = maps[0].shape[-1]
    if F < n_components:
        raise ValueError(f"need at least {n_components} input channels, got {F}")
    X = np.concatenate([m.reshape(-1, F) for m in maps])
    if len(X) < n_components:
        raise ValueError(f"need at least {n_components} samples, got {len(X)}")
    mean = X.mean(0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    var = s ** 2 / max(len(X) - 1, 1)
    tol = s.max() * max(Xc.shape) * np.finfo(float).eps if s.size else 0.0
    rank = int(np.count_nonzero(s > tol))
    comps = np.zeros((n_components, F))
    k = min(rank, n_components)
    comps[:k] = vt[:k]
    # deterministic sign: largest-magnitude entry positive
    flip = np.sign(comps[np.arange(n_components), np.abs(comps).argmax(1)])
    comps *= np.where(flip == 0, 1.0, flip)[:, None]
    ev = np.zeros(n_components)
    ev[:k] = var[:k]
    if rank < n_components:
        log.warning("feature rank %d < %d; padding with zero components", rank, n_components)
    basis = PCABasis(mean, comps, ev)
    out = [basis.transform(m.reshape(-1, F)).reshape(m.shape[:-1] + (n_components,)) for m in maps]
    return out, basis


# ---------------------------------------------------------------------------
# cloud construction and filtering
# ---------------------------------------------------------------------------

def build_feature_cloud(frames, masks=None, bounds: VolumeBounds | None = None) -> FeatureCloud:
    """Unproject masked valid-depth pixels of all frames into one world cloud."""
    parts = []
    for idx, fr in enumerate(frames):
        depth = np.asarray(fr.depth)
        if masks is not None:
            depth = np.where(masks[idx], depth, 0.0)
        pts, (rows, cols) = depth_map_to_points(depth, fr.camera)
        feats = np.asarray(fr.features)[rows, cols]
        if feats.shape[-1] != FEATURE_DIM:
            raise ValueError(f"frame {idx}: features must be compressed to {FEATURE_DIM} channels first")
        keep = bounds.contains(pts) if bounds is not None else np.ones(len(pts), bool)
        parts.append(FeatureCloud(pts[keep], feats[keep], np.full(int(keep.sum()), idx)))
    cloud = FeatureCloud.concat(parts)
    if len(cloud) == 0:
        raise EmptySceneError("no valid depth pixels survived masking; scene is unreconstructable")
    return cloud


def _group_by_cell(positions: np.ndarray, cell: float, origin=None):
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
    keys = np.floor((positions - origin) / cell).astype(np.int64)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return uniq, inverse.reshape(-1), counts


def voxel_downsample(cloud: FeatureCloud, cell: float) -> FeatureCloud:
    """One point per occupied cell: centroid position, mean feature."""
    if cell <= 0:
        raise ValueError("cell size must be positive")
    if len(cloud) == 0:
        return cloud
    uniq, inv, counts = _group_by_cell(cloud.positions, cell)
    m = len(uniq)
    pos = np.zeros((m, 3))
    feat = np.zeros((m, cloud.features.shape[1]))
    np.add.at(pos, inv, cloud.positions)
    np.add.at(feat, inv, cloud.features)
    frame = np.full(m, np.iinfo(np.int64).max)
    np.minimum.at(frame, inv, cloud.frame_index)
    return FeatureCloud(pos / counts[:, None], feat / counts[:, None], frame)


def knn_mean_distance(positions: np.ndarray, k: int) -> np.ndarray:
    """Mean distance of each point to its ``k`` nearest other points."""
    tree = cKDTree(positions)
    d, _ = tree.query(positions, k=k + 1)
    return d[:, 1:].mean(1)


def statistical_outlier_filter(cloud: FeatureCloud, k: int = SOR_NEIGHBORS,
                               ratio: float = SOR_STD_RATIO) -> FeatureCloud:
    """Drop points whose mean k-NN distance exceeds ``mean + ratio * std``."""
    if len(cloud) <= k:
        log.warning("statistical filter skipped: %d points <= k=%d", len(cloud), k)
        return cloud
    md = knn_mean_distance(cloud.positions, k)
    mu, sd = md.mean(), md.std()
    # slack absorbs roundoff when all neighborhoods are congruent
    thr = mu + ratio * sd + 1e-9 * mu
    return cloud.subset(md <= thr)


def project_close_range_mask(cloud: FeatureCloud, cam: CameraFrame, dilate: int = 1) -> np.ndarray:
    """Binary image of pixels hit by at least one cloud point in front of ``cam``."""
    mask = np.zeros((cam.height, cam.width), dtype=bool)
    if len(cloud) == 0:
        return mask
    uv, _, valid = project_points(cloud.positions, cam)
    uv = uv[valid]
    u = np.floor(uv[:, 0]).astype(np.int64)
    v = np.floor(uv[:, 1]).astype(np.int64)
    ok = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    mask[v[ok], u[ok]] = True
    if dilate > 0:
        mask = ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool), iterations=dilate)
    return mask
