"""KITTI-style scene folders and on-disk scene state.

Dataset layout::

    calib.txt        K: fx 0 cx 0 fy cy 0 0 1
                     size: W H
    poses.txt        one camera-to-world 3x4 matrix per line, row-major
    times.txt        one timestamp per line (optional; defaults to 0, 1, ...)
    image/NNNNNN.png
    depth/NNNNNN.pfm     meters (16-bit PNG in millimeters also accepted)
    features/NNNNNN.feat
    tracks.jsonl     optional actor boxes

Scene layout (``gaussians/`` under a command's output directory)::

    close_range.ply  far_field.ply  actor_<id>.ply (object frame)
    tracks.jsonl     scene.json
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .actors import CanonicalActor, DynamicActor, load_tracks, save_tracks
from .compositor import SceneState
from .gaussians import BranchTag, GaussianSet, load_ply, save_ply
from .geometry import CameraFrame, RigidPose
from .imageio import (FileFormatError, read_depth, read_features, read_image, write_depth,
                      write_features, write_png8)
from .ingest import FEATURE_DIM, FeatureCloud, FrameBundle


class DataError(RuntimeError):
    pass


def _read_lines(path: Path) -> list:
    if not path.exists():
        raise DataError(f"missing file {path}")
    return [ln for ln in path.read_text().splitlines() if ln.strip()]


def parse_calib(path) -> tuple:
    """Returns ``(K, width, height)``."""
    path = Path(path)
    K = size = None
    for ln in _read_lines(path):
        key, _, rest = ln.partition(":")
        vals = rest.split()
        try:
            if key.strip() == "K":
                K = np.array([float(v) for v in vals]).reshape(3, 3)
            elif key.strip() == "size":
                size = (int(vals[0]), int(vals[1]))
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}: bad '{key.strip()}' entry ({exc})") from None
    if K is None or size is None:
        raise DataError(f"{path}: needs 'K:' and 'size:' lines")
    return K, size[0], size[1]


def parse_poses(path) -> list:
    """Camera-to-world 4x4 matrices, one per line of 12 numbers."""
    path = Path(path)
    out = []
    for i, ln in enumerate(_read_lines(path), 1):
        try:
            v = np.array([float(x) for x in ln.split()])
        except ValueError:
            raise DataError(f"{path}:{i}: non-numeric pose entry") from None
        if v.size != 12:
            raise DataError(f"{path}:{i}: expected 12 values, got {v.size}")
        T = np.eye(4)
        T[:3] = v.reshape(3, 4)
        out.append(T)
    return out


def camera_from_pose(K, width, height, cam_to_world: np.ndarray, timestamp: float, where="") -> CameraFrame:
    try:
        pose = RigidPose.from_matrix(cam_to_world, tol=1e-3)
    except ValueError as exc:
        raise DataError(f"{where}: {exc} (tolerance 1e-3)") from None
    # re-orthonormalized through the quaternion
    return CameraFrame(K, pose.inverse().matrix(), width, height, timestamp)


def load_scene_bundle(root) -> tuple:
    """``(frames sorted by timestamp, tracks)`` from a dataset folder."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset folder {root} does not exist")
    K, W, H = parse_calib(root / "calib.txt")
    poses = parse_poses(root / "poses.txt")
    tpath = root / "times.txt"
    times = [float(x) for x in _read_lines(tpath)] if tpath.exists() else [float(i) for i in range(len(poses))]
    if len(times) != len(poses):
        raise DataError(f"{tpath}: {len(times)} timestamps for {len(poses)} poses")
    frames = []
    for i, (T, t) in enumerate(zip(poses, times)):
        cam = camera_from_pose(K, W, H, T, t, f"{root / 'poses.txt'}:{i + 1}")
        stem = f"{i:06d}"
        img = read_image(_find(root / "image", stem, (".png",)))
        depth = read_depth(_find(root / "depth", stem, (".pfm", ".png")))
        feat = read_features(_find(root / "features", stem, (".feat",)))
        try:
            frames.append(FrameBundle(img, depth, feat, cam))
        except ValueError as exc:
            raise DataError(f"frame {stem}: {exc}") from None
    tracks = load_tracks(root / "tracks.jsonl") if (root / "tracks.jsonl").exists() else []
    order = sorted(range(len(frames)), key=lambda k: (frames[k].timestamp, k))
    return [frames[k] for k in order], tracks


def _find(folder: Path, stem: str, exts) -> Path:
    for e in exts:
        p = folder / (stem + e)
        if p.exists():
            return p
    raise DataError(f"missing file {folder / stem}{{{','.join(exts)}}}")


def save_scene_bundle(root, frames, tracks=()) -> None:
    root = Path(root)
    for sub in ("image", "depth", "features"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    cam0 = frames[0].camera
    K = cam0.intrinsics
    (root / "calib.txt").write_text("K: " + " ".join(repr(float(v)) for v in K.ravel())
                                    + f"\nsize: {cam0.width} {cam0.height}\n")
    pose_lines, time_lines = [], []
    for i, f in enumerate(frames):
        c2w = f.camera.cam_to_world()
        pose_lines.append(" ".join(repr(float(v)) for v in c2w[:3].ravel()))
        time_lines.append(repr(float(f.timestamp)))
        stem = f"{i:06d}"
        write_png8(root / "image" / f"{stem}.png", f.image)
        write_depth(root / "depth" / f"{stem}.pfm", f.depth)
        write_features(root / "features" / f"{stem}.feat", f.features)
    (root / "poses.txt").write_text("\n".join(pose_lines) + "\n")
    (root / "times.txt").write_text("\n".join(time_lines) + "\n")
    if tracks:
        save_tracks(root / "tracks.jsonl", tracks)


def hash_tree(root) -> str:
    """sha256 over relative paths and contents of every file under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# scene state on disk
# ---------------------------------------------------------------------------

def save_scene(scene: SceneState, folder) -> dict:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    files = {"close_range": "close_range.ply", "far_field": "far_field.ply"}
    save_ply(scene.close_range, folder / files["close_range"])
    save_ply(scene.far_field, folder / files["far_field"])
    actors = []
    for a in scene.actors:
        name = f"actor_{a.actor_id}.ply"
        save_ply(a.gaussians, folder / name)
        actors.append({"id": a.actor_id, "file": name})
    save_tracks(folder / "tracks.jsonl", [a.track for a in scene.actors])
    meta = {"timestamp": scene.timestamp, "actors": actors, "files": files}
    (folder / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def load_scene(folder) -> SceneState:
    folder = Path(folder)
    meta_path = folder / "scene.json"
    if not meta_path.exists():
        raise DataError(f"missing file {meta_path}")
    meta = json.loads(meta_path.read_text())
    cr = load_ply(folder / meta["files"]["close_range"])
    far = load_ply(folder / meta["files"]["far_field"])
    tracks = {t.actor_id: t for t in load_tracks(folder / "tracks.jsonl")} if meta["actors"] else {}
    actors = []
    for rec in meta["actors"]:
        g = load_ply(folder / rec["file"])
        g.tags[:] = BranchTag.DYNAMIC
        cloud = FeatureCloud(g.means, np.zeros((len(g), FEATURE_DIM)), np.zeros(len(g)))
        actors.append(DynamicActor(CanonicalActor(cloud, tracks[rec["id"]]), g))
    return SceneState(_retag(cr, BranchTag.CLOSE_RANGE), actors, _retag(far, BranchTag.FAR_FIELD),
                      float(meta["timestamp"]))


def _retag(g: GaussianSet, tag) -> GaussianSet:
    if len(g) and np.any(g.tags != tag):
        raise DataError(f"PLY holds Gaussians tagged {sorted(set(g.tags.tolist()))}, expected {int(tag)}")
    return g


__all__ = ["DataError", "FileFormatError", "load_scene_bundle", "save_scene_bundle", "load_scene",
           "save_scene", "parse_poses", "parse_calib", "hash_tree"]
