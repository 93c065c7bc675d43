"""Procedural street scene: textured ground plane, one moving cuboid car and a
sky gradient, ray-cast into posed RGB / depth / feature frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actors import ActorTrack
from .geometry import CameraFrame, RigidPose, quat_from_axis_angle
from .ingest import FrameBundle

GROUND_Y = 1.6  # world y points down; camera at y = 0
CAR_EXTENTS = (1.8, 1.5, 4.2)
LIDAR_RANGE = 60.0
RAW_FEATURES = 24


@dataclass
class SyntheticScene:
    frames: list
    tracks: list
    held_out: tuple = ()

    def split(self):
        train = [f for i, f in enumerate(self.frames) if i not in self.held_out]
        test = [f for i, f in enumerate(self.frames) if i in self.held_out]
        return train, test


def _ground_color(x, z):
    c = np.stack([0.42 + 0.10 * np.sin(0.8 * x + 0.3) * np.cos(0.45 * z),
                  0.45 + 0.08 * np.sin(0.35 * z + 0.25 * x),
                  0.40 + 0.09 * np.cos(0.6 * x - 0.2 * z)], -1)
    return c


def _car_color(local):
    x, y, z = local[..., 0], local[..., 1], local[..., 2]
    stripe = 0.12 * np.sin(2.2 * z) + 0.08 * np.cos(2.8 * x)
    roof = y < -0.5 * CAR_EXTENTS[1] + 0.05
    base = np.stack([0.72 + stripe, 0.22 + 0.5 * stripe, 0.20 + 0.05 * np.sin(3.0 * y)], -1)
    return np.where(roof[..., None], base * 0.6, base)


def _sky_color(d):
    up = np.clip(-d[..., 1], 0, 1)
    return np.stack([0.80 - 0.30 * up, 0.86 - 0.18 * up, 0.95 - 0.05 * up], -1)


def _ray_box(o, d, pose: RigidPose, extents):
    """Entry distance of world rays into an oriented box (inf on miss)."""
    Rt = pose.rotmat.T
    lo = (o - pose.translation) @ Rt.T
    ld = d @ Rt.T
    half = 0.5 * np.asarray(extents)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / ld
        t1 = (-half - lo) * inv
        t2 = (half - lo) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmin > 1e-6)
    return np.where(hit, tmin, np.inf)


class _FeatureBasis:
    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        self.cls = rng.normal(size=(3, RAW_FEATURES))
        self.pos = rng.normal(size=(18, RAW_FEATURES)) * 0.3

    def __call__(self, cls_idx, coords):
        enc = np.concatenate([f(s * coords) for s in (0.3, 0.8, 1.7) for f in (np.sin, np.cos)], -1)
        return self.cls[cls_idx] + enc @ self.pos


def _cast(cam: CameraFrame, uv, car_pose, extents, feats: _FeatureBasis):
    hom = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], -1)
    d_cam = hom @ np.linalg.inv(cam.intrinsics).T
    d = d_cam @ cam.rotation
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.center, d.shape)
    with np.errstate(divide="ignore"):
        t_g = np.where(d[..., 1] > 1e-9, (GROUND_Y - o[..., 1]) / d[..., 1], np.inf)
    t_c = _ray_box(o, d, car_pose, extents) if car_pose is not None else np.full(d.shape[:-1], np.inf)
    t = np.minimum(t_g, t_c)
    p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
    color = _sky_color(d)
    gmask = np.isfinite(t_g) & (t_g <= t_c)
    cmask = np.isfinite(t_c) & (t_c < t_g)
    color = np.where(gmask[..., None], _ground_color(p[..., 0], p[..., 2]), color)
    cls = np.full(d.shape[:-1], 2)
    cls[gmask] = 0
    coords = np.zeros(d.shape)
    coords[gmask] = p[gmask]
    if car_pose is not None and cmask.any():
        local = car_pose.inverse().apply(p[cmask])
        color[cmask] = _car_color(local)
        cls[cmask] = 1
        coords[cmask] = local
    zdepth = np.where(np.isfinite(t), t * (d @ cam.rotation.T)[..., 2], 0.0)
    return np.clip(color, 0, 1), zdepth, feats(cls, coords)


def make_synthetic_scene(n_frames: int = 8, width: int = 96, height: int = 64, focal: float = 70.0,
                         ego_step: float = 1.0, car_speed: float = 1.2, car_start=(2.6, 10.0),
                         car_yaw: float = 0.05, with_car: bool = True, supersample: int = 2,
                         held_out=(3, 6), seed: int = 0) -> SyntheticScene:
    feats = _FeatureBasis(seed)
    K = np.array([[focal, 0, width / 2], [0, focal, height / 2], [0, 0, 1.0]])
    car_q = quat_from_axis_angle(np.array([0.0, car_yaw, 0.0]))
    poses = {}
    frames = []
    ss = supersample
    for k in range(n_frames):
        eye = np.array([0.0, 0.0, k * ego_step])
        cam = CameraFrame.look_at(eye, eye + np.array([0, 0, 1.0]), focal, focal, width, height)
        cam = CameraFrame(K, cam.extrinsics, width, height, float(k))
        car = None
        if with_car:
            car = RigidPose(car_q, np.array([car_start[0], GROUND_Y - CAR_EXTENTS[1] / 2,
                                             car_start[1] + car_speed * k]))
            poses[float(k)] = car
        # color supersampled, depth/features at pixel centers
        jj, ii = np.meshgrid((np.arange(width * ss) + 0.5) / ss, (np.arange(height * ss) + 0.5) / ss)
        col, _, _ = _cast(cam, np.stack([jj, ii], -1), car, CAR_EXTENTS, feats)
        col = col.reshape(height, ss, width, ss, 3).mean((1, 3))
        jj, ii = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
        _, depth, f = _cast(cam, np.stack([jj, ii], -1), car, CAR_EXTENTS, feats)
        depth = np.where(depth <= LIDAR_RANGE, depth, 0.0)
        frames.append(FrameBundle(col, depth, f, cam))
    tracks = [ActorTrack("car0", np.array(CAR_EXTENTS), poses, "car")] if with_car else []
    return SyntheticScene(frames, tracks, tuple(h for h in held_out if h < n_frames))
