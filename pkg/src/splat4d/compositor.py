"""Scene assembly and layered near/far compositing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussians import BranchTag, GaussianSet
from .geometry import CameraFrame
from .rasterizer import RasterConfig, RenderTarget, rasterize

MASK_THRESHOLD = 0.5


@dataclass
class SceneState:
    close_range: GaussianSet
    actors: list = field(default_factory=list)  # DynamicActor
    far_field: GaussianSet = field(default_factory=GaussianSet.empty)
    timestamp: float = 0.0

    def __post_init__(self):
        for name, g, tag in (("close_range", self.close_range, BranchTag.CLOSE_RANGE),
                             ("far_field", self.far_field, BranchTag.FAR_FIELD)):
            if len(g) and np.any(g.tags != tag):
                raise ValueError(f"{name} holds Gaussians tagged for another branch")

    def actor(self, actor_id: str):
        for a in self.actors:
            if a.actor_id == actor_id:
                return a
        raise KeyError(actor_id)

    def dynamic_at(self, t: float, poses: dict | None = None) -> GaussianSet:
        """All actors placed at ``t``; ``poses`` may override per-actor poses."""
        sets = []
        for a in self.actors:
            if not a.track.covers(t):
                continue
            sets.append(a.placed(t, None if poses is None else poses.get(a.actor_id)))
        return GaussianSet.concat(sets)

    def near_at(self, t: float) -> GaussianSet:
        return GaussianSet.concat([self.close_range, self.dynamic_at(t)])

    def counts(self) -> dict:
        return {"close_range": len(self.close_range), "far_field": len(self.far_field),
                "dynamic": int(sum(len(a.gaussians) for a in self.actors)), "actors": len(self.actors)}


def composite(near: RenderTarget, far: RenderTarget) -> RenderTarget:
    """Far field as a background layer behind the accumulated near field."""
    keep = 1.0 - near.opacity
    depth = np.where(near.opacity > MASK_THRESHOLD, near.depth, far.depth)
    return RenderTarget(near.color + keep[..., None] * far.color,
                        near.opacity + keep * far.opacity, depth,
                        near.count + far.count, near.n_culled + far.n_culled)


def render_composite(scene: SceneState, cam: CameraFrame, t: float | None = None,
                     cfg: RasterConfig = RasterConfig()) -> RenderTarget:
    t = scene.timestamp if t is None else t
    near = rasterize(scene.near_at(t), cam, cfg)
    far = rasterize(scene.far_field, cam, cfg)
    return composite(near, far)


def dynamic_mask(dyn: RenderTarget) -> np.ndarray:
    return dyn.opacity > MASK_THRESHOLD


def render_decomposed(scene: SceneState, cam: CameraFrame, t: float | None = None,
                      cfg: RasterConfig = RasterConfig()) -> dict:
    t = scene.timestamp if t is None else t
    dyn = rasterize(scene.dynamic_at(t), cam, cfg)
    return {"close_range": rasterize(scene.close_range, cam, cfg), "dynamic": dyn,
            "far_field": rasterize(scene.far_field, cam, cfg), "mask": dynamic_mask(dyn)}


def check_depth_separation(scene: SceneState, cams, times=None) -> float:
    """Smallest gap (meters) between the farthest near-field mean and the
    nearest far-field mean in camera depth; raises if they overlap."""
    gap = np.inf
    for k, cam in enumerate(cams):
        t = cam.timestamp if times is None else times[k]
        near, far = scene.near_at(t), scene.far_field
        if not len(near) or not len(far):
            continue
        zn = cam.world_to_camera(near.means)[:, 2]
        zf = cam.world_to_camera(far.means)[:, 2]
        zf = zf[zf > 0]
        if not len(zf):
            continue
        g = float(zf.min() - zn.max())
        if g <= 0:
            raise ValueError(f"camera {k}: far field starts {-g:.3f} m inside the near field")
        gap = min(gap, g)
    return gap
