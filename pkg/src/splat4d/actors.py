"""Rigid dynamic actors in object-centric canonical frames."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gaussians import BranchTag, GaussianSet, quat_identity_bias
from .geometry import RigidPose, depth_map_to_points, pose_interpolate, quat_multiply
from .ibr import (WINDOW, TAU, WindowSample, raw_to_sh, sample_features, sample_views,
                  visibility_feature_guided, decoder_input, mean_color_mlp)
from .ingest import FeatureCloud, voxel_downsample
from .volume import VOXEL_SIZE, init_scales_knn, sigmoid, softplus, softplus_inv
from .weights import MLP, WeightError

log = logging.getLogger(__name__)

BOX_DILATION = 0.05
DYN_OUT = 20  # opacity 1, quaternion 4, scale 3, SH 12


@dataclass
class ActorTrack:
    actor_id: str
    extents: np.ndarray
    poses: dict  # timestamp -> RigidPose (object -> world)
    label: str = "car"

    def __post_init__(self):
        self.extents = np.asarray(self.extents, dtype=np.float64).reshape(3)
        if not self.poses:
            raise ValueError(f"actor {self.actor_id}: no poses")
        if np.any(self.extents <= 0):
            raise ValueError(f"actor {self.actor_id}: extents must be positive")
        self.poses = {float(t): p for t, p in sorted(self.poses.items())}

    @property
    def timestamps(self) -> np.ndarray:
        return np.array(list(self.poses))

    def pose_at(self, t: float, extrapolate: bool = False) -> RigidPose:
        t = float(t)
        if t in self.poses:
            return self.poses[t]
        ts = self.timestamps
        if t < ts[0] or t > ts[-1]:
            if not extrapolate:
                raise ValueError(f"actor {self.actor_id}: t={t} outside [{ts[0]}, {ts[-1]}]")
            return self.poses[float(ts[0] if t < ts[0] else ts[-1])]
        hi = int(np.searchsorted(ts, t))
        a, b = ts[hi - 1], ts[hi]
        return pose_interpolate(self.poses[a], self.poses[b], (t - a) / (b - a))

    def covers(self, t: float) -> bool:
        ts = self.timestamps
        return ts[0] <= t <= ts[-1]

    def with_poses(self, poses: dict) -> "ActorTrack":
        return ActorTrack(self.actor_id, self.extents.copy(), dict(poses), self.label)


def to_canonical(points: np.ndarray, pose: RigidPose) -> np.ndarray:
    return pose.inverse().apply(points)


def to_world(points: np.ndarray, pose: RigidPose) -> np.ndarray:
    return pose.apply(points)


def points_in_box(points: np.ndarray, pose: RigidPose, extents: np.ndarray,
                  dilation: float = BOX_DILATION) -> np.ndarray:
    local = to_canonical(points, pose)
    half = 0.5 * np.asarray(extents) * (1 + dilation)
    return np.all(np.abs(local) <= half, axis=1)


@dataclass
class CanonicalActor:
    cloud: FeatureCloud  # object frame
    track: ActorTrack

    @property
    def actor_id(self) -> str:
        return self.track.actor_id


def aggregate_canonical_cloud(frames, track: ActorTrack, vsize: float = VOXEL_SIZE,
                              dilation: float = BOX_DILATION) -> CanonicalActor | None:
    parts = []
    for idx, fr in enumerate(frames):
        if not track.covers(fr.timestamp):
            continue
        pose = track.pose_at(fr.timestamp)
        pts, (rows, cols) = depth_map_to_points(np.asarray(fr.depth), fr.camera)
        inside = points_in_box(pts, pose, track.extents, dilation)
        if not inside.any():
            continue
        parts.append(FeatureCloud(to_canonical(pts[inside], pose),
                                  np.asarray(fr.features)[rows[inside], cols[inside]],
                                  np.full(int(inside.sum()), idx)))
    cloud = FeatureCloud.concat(parts)
    if len(cloud) == 0:
        log.warning("actor %s: no points inside its box in any frame; dropped", track.actor_id)
        return None
    return CanonicalActor(voxel_downsample(cloud, vsize), track)


def actor_to_world(actor: CanonicalActor, t: float, extrapolate: bool = False) -> FeatureCloud:
    pose = actor.track.pose_at(t, extrapolate)
    c = actor.cloud
    return FeatureCloud(to_world(c.positions, pose), c.features, c.frame_index)


def actor_pixel_mask(frame, tracks, dilation: float = BOX_DILATION) -> np.ndarray:
    """Pixels of ``frame`` whose unprojected depth falls inside any actor box."""
    H, W = np.shape(frame.depth)
    mask = np.zeros((H, W), bool)
    pts, (rows, cols) = depth_map_to_points(np.asarray(frame.depth), frame.camera)
    for tr in tracks:
        if tr.covers(frame.timestamp):
            inside = points_in_box(pts, tr.pose_at(frame.timestamp), tr.extents, dilation)
            mask[rows[inside], cols[inside]] = True
    return mask


def select_actor_refs(track: ActorTrack, frames, k: int) -> list:
    """The ``k`` frames (within the track's time span) whose cameras are
    closest to the actor at their own timestamp."""
    cand = [fr for fr in frames if track.covers(fr.timestamp)]
    if len(cand) < k:
        raise ValueError(f"actor {track.actor_id}: {len(cand)} frames cover the track, need {k}")
    dist = [np.linalg.norm(fr.camera.center - track.pose_at(fr.timestamp).translation) for fr in cand]
    order = np.argsort(dist, kind="stable")[:k]
    return [cand[i] for i in sorted(order)]


def motion_adjusted_sample(actor: CanonicalActor, refs, W: int = WINDOW, tau: float = TAU) -> WindowSample:
    """Place canonical points at each reference timestamp before sampling."""
    placed = [to_world(actor.cloud.positions, actor.track.pose_at(fr.timestamp)) for fr in refs]
    s = sample_views(placed, refs, W)
    f2d = sample_features(placed, refs, s.valid)
    return s.with_visibility(visibility_feature_guided(actor.cloud.features, f2d, tau, s.valid))


@dataclass
class DynamicDecoderWeights:
    mlp: MLP
    n_views: int = 3
    window: int = WINDOW

    def __post_init__(self):
        want = self.n_views * (self.window * self.window * 3 + 1)
        if self.mlp.in_dim != want or self.mlp.out_dim != DYN_OUT:
            raise WeightError(f"dynamic decoder is {self.mlp.in_dim}->{self.mlp.out_dim}, "
                              f"expected {want}->{DYN_OUT}")
        if len(self.mlp.weights) != 3:
            raise WeightError("dynamic decoder must have 3 layers")

    @classmethod
    def random(cls, seed: int, n_views: int = 3, window: int = WINDOW, hidden: int = 64,
               scale: float = 1.0) -> "DynamicDecoderWeights":
        rng = np.random.default_rng(seed)
        d = n_views * (window * window * 3 + 1)
        return cls(MLP.random([d, hidden, hidden, DYN_OUT], rng, scale), n_views, window)

    @classmethod
    def mean_color(cls, n_views: int = 3, window: int = WINDOW, pixel_weights=None) -> "DynamicDecoderWeights":
        """Hand-set decoder: opaque, identity rotation, KNN scales, base color
        = mean of the sampled pixels (see :func:`mean_color_mlp`)."""
        bias = np.zeros(DYN_OUT)
        bias[0] = 4.0  # opacity ~0.98
        return cls(mean_color_mlp(n_views, window, DYN_OUT, 8, extra_bias=bias,
                                  pixel_weights=pixel_weights), n_views, window)

    def to_tensors(self, prefix: str = "dynamic") -> dict:
        return self.mlp.to_tensors(prefix)

    @classmethod
    def from_tensors(cls, tensors: dict, n_views: int, window: int, prefix: str = "dynamic"):
        return cls(MLP.from_tensors(tensors, prefix), n_views, window)


@dataclass
class DynamicActor:
    canonical: CanonicalActor
    gaussians: GaussianSet  # object frame

    @property
    def actor_id(self) -> str:
        return self.canonical.actor_id

    @property
    def track(self) -> ActorTrack:
        return self.canonical.track

    def placed(self, t: float, pose: RigidPose | None = None) -> GaussianSet:
        """World-space Gaussians at time ``t``. SH stays in world frame."""
        pose = pose or self.track.pose_at(t)
        g = self.gaussians
        return GaussianSet(to_world(g.means, pose), g.opacities,
                           quat_multiply(np.broadcast_to(pose.rotation, g.quats.shape), g.quats),
                           g.scales, g.sh, BranchTag.DYNAMIC)


def decode_dynamic_gaussians(actor: CanonicalActor, samples: WindowSample, w: DynamicDecoderWeights,
                             vsize: float = VOXEL_SIZE, knn_k: int = 3) -> DynamicActor:
    if samples.valid.shape[1] != w.n_views or samples.window != w.window:
        raise WeightError("sample layout does not match dynamic decoder")
    raw = w.mlp(decoder_input(samples))
    pts = actor.cloud.positions
    opac = sigmoid(raw[:, 0])
    opac = np.where(samples.appearance_ok, opac, 0.0)
    quats = quat_identity_bias(raw[:, 1:5])
    s_init = init_scales_knn(pts, knn_k, vsize)
    scales = softplus(softplus_inv(s_init) + raw[:, 5:8])
    sh = raw_to_sh(raw[:, 8:20])
    g = GaussianSet(pts.copy(), opac, quats, scales, sh, BranchTag.DYNAMIC)
    return DynamicActor(actor, g)


# ---------------------------------------------------------------------------
# editing
# ---------------------------------------------------------------------------

def _find(scene, actor_id: str) -> int:
    for i, a in enumerate(scene.actors):
        if a.actor_id == actor_id:
            return i
    raise KeyError(f"unknown actor {actor_id!r}")


def edit_actor(scene, actor_id: str, edit: dict):
    """Return a new scene with one edit applied.

    ``edit`` is ``{"op": "delete"}``, ``{"op": "translate", "delta": [x, y, z]}``
    or ``{"op": "replace", "with": other_id}``.
    """
    i = _find(scene, actor_id)
    actors = list(scene.actors)
    op = edit.get("op")
    if op == "delete":
        del actors[i]
    elif op == "translate":
        shift = RigidPose.from_translation(np.asarray(edit["delta"], dtype=np.float64))
        a = actors[i]
        track = a.track.with_poses({t: shift @ p for t, p in a.track.poses.items()})
        actors[i] = DynamicActor(CanonicalActor(a.canonical.cloud, track), a.gaussians)
    elif op == "replace":
        src = actors[_find(scene, edit["with"])]
        a = actors[i]
        actors[i] = DynamicActor(CanonicalActor(src.canonical.cloud, a.track), src.gaussians.copy())
    else:
        raise ValueError(f"unknown edit op {op!r}")
    return dataclasses.replace(scene, actors=actors)


# ---------------------------------------------------------------------------
# track files (JSON lines)
# ---------------------------------------------------------------------------

def load_tracks(path) -> list:
    recs = {}
    path = Path(path)
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            pose = RigidPose(np.asarray(r["quaternion"], float), np.asarray(r["position"], float))
            entry = recs.setdefault(str(r["id"]), {"class": r.get("class", "car"),
                                                   "extents": r["extents"], "poses": {}})
            entry["poses"][float(r["timestamp"])] = pose
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad track record ({exc})") from exc
    return [ActorTrack(i, e["extents"], e["poses"], e["class"]) for i, e in sorted(recs.items())]


def save_tracks(path, tracks) -> None:
    lines = []
    for tr in tracks:
        for t, p in tr.poses.items():
            lines.append(json.dumps({"id": tr.actor_id, "class": tr.label,
                                     "extents": tr.extents.tolist(), "position": p.translation.tolist(),
                                     "quaternion": p.rotation.tolist(), "timestamp": t}))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

