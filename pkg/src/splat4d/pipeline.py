"""Feed-forward reconstruction: frames + tracks + weights -> SceneState."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import actors as act
from .compositor import SceneState
from .farfield import Z_FAR, Z_NEAR, FarFieldWeights, predict_far_field
from .gaussians import BranchTag, GaussianSet
from .ibr import N_REFS, SIGMA_DEPTH, TAU, WINDOW, ColorDecoderWeights, appearance
from .ingest import (FEATURE_DIM, EmptySceneError, FrameBundle, VolumeBounds, build_feature_cloud,
                     consistency_masks, pca_compress, project_close_range_mask,
                     statistical_outlier_filter, voxel_downsample)
from .rasterizer import RasterConfig, rasterize
from .volume import (RECURSION_DEPTH, VOXEL_SIZE, DecodeHeads, SparseNetWeights, decode_geometry,
                     sparse_unet_forward, voxelize_cloud)
from .weights import load_weights, save_weights

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {exc}")


@dataclass
class ModelWeights:
    unet: SparseNetWeights
    heads: DecodeHeads
    color: ColorDecoderWeights
    dynamic: act.DynamicDecoderWeights
    far: FarFieldWeights

    @classmethod
    def random(cls, seed: int = 0, n_views: int = N_REFS, window: int = WINDOW) -> "ModelWeights":
        return cls(SparseNetWeights.random(seed), DecodeHeads.random(seed + 1),
                   ColorDecoderWeights.random(seed + 2, n_views, window),
                   act.DynamicDecoderWeights.random(seed + 3, n_views, window),
                   FarFieldWeights.random(seed + 4))

    def save(self, path) -> None:
        t = {}
        for part in (self.unet, self.heads, self.color, self.dynamic, self.far):
            t.update(part.to_tensors())
        save_weights(path, t, {"n_views": self.color.n_views, "window": self.color.window})

    @classmethod
    def load(cls, path) -> "ModelWeights":
        t, meta = load_weights(path, with_meta=True)
        k, w = int(meta["n_views"]), int(meta["window"])
        return cls(SparseNetWeights.from_tensors(t), DecodeHeads.from_tensors(t),
                   ColorDecoderWeights.from_tensors(t, k, w), act.DynamicDecoderWeights.from_tensors(t, k, w),
                   FarFieldWeights.from_tensors(t))


@dataclass
class ReconConfig:
    voxel_size: float = VOXEL_SIZE
    bounds: tuple | None = None  # ((lo), (hi)); default: box around the first camera
    recursion_depth: int = RECURSION_DEPTH
    tau: float = TAU
    visibility: str = "feature"
    sigma_d: float = SIGMA_DEPTH
    depth_sigma: float = 0.2
    relative_depth_check: bool = False
    sor_k: int = 20
    sor_ratio: float = 2.0
    knn_k: int = 3
    z_near: float = Z_NEAR
    z_far: float = Z_FAR
    far_scale: float = 0.5  # far-field input resolution factor
    box_dilation: float = act.BOX_DILATION
    raster: RasterConfig = field(default_factory=RasterConfig)


@dataclass
class Reconstruction:
    scene: SceneState
    frames: list  # PCA-compressed frames
    close_masks: list  # per-frame close-range supervision masks
    timings: dict
    gaps: list


def _stage(name, timings):
    class _Ctx:
        def __enter__(self):
            self.t = time.perf_counter()

        def __exit__(self, et, ev, tb):
            timings[name] = time.perf_counter() - self.t
            if ev is not None and not isinstance(ev, StageError):
                raise StageError(name, ev) from ev
    return _Ctx()


def compress_frames(frames) -> list:
    F = np.shape(frames[0].features)[-1]
    if F == FEATURE_DIM:
        return list(frames)
    maps, _ = pca_compress([f.features for f in frames])
    return [FrameBundle(f.image, f.depth, m, f.camera) for f, m in zip(frames, maps)]


def reconstruct(frames, tracks, weights: ModelWeights, cfg: ReconConfig = ReconConfig()) -> Reconstruction:
    timings = {}
    with _stage("ingest", timings):
        frames = compress_frames(sorted(frames, key=lambda f: f.timestamp))
        masks = consistency_masks(frames, cfg.depth_sigma, cfg.relative_depth_check)
        for i, fr in enumerate(frames):
            masks[i] &= ~act.actor_pixel_mask(fr, tracks, cfg.box_dilation)
        bounds = VolumeBounds(*cfg.bounds) if cfg.bounds else VolumeBounds.around_camera(frames[0].camera)
        cloud = build_feature_cloud(frames, masks, bounds)
        cloud = voxel_downsample(cloud, cfg.voxel_size)
        cloud = statistical_outlier_filter(cloud, cfg.sor_k, cfg.sor_ratio)
    with _stage("volume", timings):
        vol = sparse_unet_forward(voxelize_cloud(cloud, cfg.voxel_size), weights.unet)
        geo = decode_geometry(vol, cloud, weights.heads, cfg.recursion_depth, cfg.knn_k)
    with _stage("appearance", timings):
        sh, ok = appearance(geo.means, cloud.features, frames, weights.color, cfg.tau,
                            cfg.visibility, cfg.sigma_d)
        cr = GaussianSet(geo.means, np.where(ok, geo.opacities, 0.0), geo.quats, geo.scales, sh,
                         BranchTag.CLOSE_RANGE)
    with _stage("dynamic", timings):
        dyn = []
        k, W = weights.dynamic.n_views, weights.dynamic.window
        for tr in tracks:
            can = act.aggregate_canonical_cloud(frames, tr, cfg.voxel_size, cfg.box_dilation)
            if can is None:
                continue
            refs = act.select_actor_refs(tr, frames, k)
            samp = act.motion_adjusted_sample(can, refs, W, cfg.tau)
            dyn.append(act.decode_dynamic_gaussians(can, samp, weights.dynamic, cfg.voxel_size, cfg.knn_k))
        scene = SceneState(cr, dyn, GaussianSet.empty(), frames[0].timestamp)
    with _stage("far_field", timings):
        small = [FrameBundle(_resize(f.image, cfg.far_scale), None, None, f.camera.scaled(cfg.far_scale))
                 for f in frames]
        dmasks = [rasterize(scene.dynamic_at(f.timestamp), f.camera, cfg.raster).opacity > 0.5 for f in small]
        idx = _far_refs(frames, weights.color.n_views)
        refs, rmasks = [small[i] for i in idx], [dmasks[i] for i in idx]
        far = predict_far_field(refs, weights.far, rmasks, cfg.z_near, cfg.z_far)
        scene = SceneState(cr, dyn, far, frames[0].timestamp)
    with _stage("masks", timings):
        close = [project_close_range_mask(cloud, f.camera) for f in frames]
    return Reconstruction(scene, frames, close, timings, geo.gaps)


def _far_refs(frames, k: int) -> list:
    """``k`` frames spread evenly over the sequence."""
    n = len(frames)
    k = min(k, n)
    return sorted({int(round(i)) for i in np.linspace(0, n - 1, k)})


def _resize(img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1:
        return img
    H, W = img.shape[:2]
    h, w = max(1, round(H * factor)), max(1, round(W * factor))
    ys = np.minimum(((np.arange(h) + 0.5) / factor).astype(int), H - 1)
    xs = np.minimum(((np.arange(w) + 0.5) / factor).astype(int), W - 1)
    if factor < 1 and abs(1 / factor - round(1 / factor)) < 1e-9:
        s = int(round(1 / factor))
        return img[:h * s, :w * s].reshape(h, s, w, s, -1).mean((1, 3))
    return img[ys][:, xs]


__all__ = ["ModelWeights", "ReconConfig", "Reconstruction", "reconstruct", "StageError", "EmptySceneError"]
