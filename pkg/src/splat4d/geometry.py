"""Pinhole cameras, rigid poses and quaternion algebra.

Conventions used across the package:

* quaternions are stored ``(w, x, y, z)`` and renormalized on construction;
* camera space is x-right, y-down, z-forward;
* extrinsics are world-to-camera;
* pixel ``(i, j)`` (row, column) samples the continuous image point
  ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# quaternion helpers (vectorized over leading axes)
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (already normalized) quaternions, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a quaternion with non-negative w."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return q if q[0] >= 0 else -q


def quat_from_axis_angle(axis_angle: np.ndarray) -> np.ndarray:
    """Exponential map from a rotation vector to a unit quaternion."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x)/x with a Taylor fallback near zero
    small = theta < 1e-8
    k = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    return np.concatenate([np.cos(half), k * v], axis=-1)


def quat_slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    d = float(np.dot(q0, q1))
    if d < 0:
        q1, d = -q1, -d
    if d > 0.9995:
        return quat_normalize(q0 + t * (q1 - q0))
    th = np.arccos(d)
    return (np.sin((1 - t) * th) * q0 + np.sin(t * th) * q1) / np.sin(th)


# ---------------------------------------------------------------------------
# rigid poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidPose:
    """Rigid transform ``x -> R(q) x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(q)) or not np.all(np.isfinite(t)):
            raise ValueError("non-finite pose")
        object.__setattr__(self, "rotation", _frozen(quat_normalize(q)))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "RigidPose":
        return cls(translation=t)

    @classmethod
    def from_matrix(cls, T: np.ndarray, tol: float = 1e-3) -> "RigidPose":
        T = np.asarray(T, dtype=np.float64)
        R = T[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > tol or np.linalg.det(R) <= 0:
            raise ValueError("rotation block is not a proper rotation")
        return cls(rotation=rotmat_to_quat(R), translation=T[:3, 3])

    @property
    def rotmat(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotmat
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "RigidPose":
        qi = quat_conjugate(self.rotation)
        return RigidPose(qi, -quat_to_rotmat(qi) @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotmat.T + self.translation

    def __matmul__(self, other: "RigidPose") -> "RigidPose":
        return pose_compose(self, other)


def pose_compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    q = quat_multiply(a.rotation, b.rotation)
    t = quat_to_rotmat(a.rotation) @ b.translation + a.translation
    return RigidPose(q, t)


def pose_interpolate(a: RigidPose, b: RigidPose, s: float) -> RigidPose:
    """Linear translation + slerp rotation, ``s`` in [0, 1]."""
    return RigidPose(quat_slerp(a.rotation, b.rotation, s),
                     (1 - s) * a.translation + s * b.translation)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraFrame:
    intrinsics: np.ndarray
    extrinsics: np.ndarray  # world -> camera
    width: int
    height: int
    timestamp: float = 0.0

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        T = np.asarray(self.extrinsics, dtype=np.float64)
        if K.shape != (3, 3) or T.shape != (4, 4):
            raise ValueError("intrinsics must be 3x3 and extrinsics 4x4")
        if abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsics must be upper-triangular with positive focal lengths")
        R = T[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("extrinsic rotation block is not orthonormal")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "intrinsics", _frozen(K))
        object.__setattr__(self, "extrinsics", _frozen(T))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def from_pose(cls, fx, fy, cx, cy, width, height, world_to_cam: RigidPose | np.ndarray,
                  timestamp: float = 0.0) -> "CameraFrame":
        K = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
        T = world_to_cam.matrix() if isinstance(world_to_cam, RigidPose) else world_to_cam
        return cls(K, T, width, height, timestamp)

    @classmethod
    def look_at(cls, eye, target, fx, fy, width, height, up=(0.0, -1.0, 0.0),
                timestamp: float = 0.0) -> "CameraFrame":
        """Camera at ``eye`` looking at ``target``; ``up`` is the world direction
        that should appear towards the top of the image."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])  # rows: camera axes in world coordinates
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = -R @ eye
        return cls.from_pose(fx, fy, width / 2.0, height / 2.0, width, height, T, timestamp)

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2].copy()

    def cam_to_world(self) -> np.ndarray:
        return np.linalg.inv(self.extrinsics)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def with_extrinsics(self, extrinsics: np.ndarray, timestamp: float | None = None) -> "CameraFrame":
        return CameraFrame(self.intrinsics, extrinsics, self.width, self.height,
                           self.timestamp if timestamp is None else timestamp)

    def scaled(self, factor: float) -> "CameraFrame":
        """Same camera at a different resolution (``factor`` < 1 downsamples)."""
        K = self.intrinsics.copy()
        K[:2] *= factor
        return CameraFrame(K, self.extrinsics, max(1, round(self.width * factor)),
                           max(1, round(self.height * factor)), self.timestamp)


def project_points(points: np.ndarray, cam: CameraFrame):
    """Project world points, returning ``(pixels (N,2), depth (N,), valid (N,))``.

    Points with non-positive camera-space depth are flagged invalid; their pixel
    coordinates are NaN.
    """
    pc = cam.world_to_camera(np.atleast_2d(points))
    z = pc[:, 2]
    valid = z > 0
    zs = np.where(valid, z, 1.0)
    hom = pc @ cam.intrinsics.T
    uv = hom[:, :2] / zs[:, None]
    uv[~valid] = np.nan
    return uv, z, valid


def project_point(p: np.ndarray, cam: CameraFrame):
    uv, z, valid = project_points(np.asarray(p, dtype=np.float64)[None], cam)
    return uv[0], float(z[0]), bool(valid[0])


def unproject_pixels(uv: np.ndarray, depth: np.ndarray, cam: CameraFrame) -> np.ndarray:
    """Inverse of :func:`project_points` for camera-space depth ``depth``."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    hom = np.concatenate([uv, np.ones((len(uv), 1))], axis=1)
    rays = np.linalg.solve(cam.intrinsics, hom.T).T  # z component == 1
    pc = rays * depth[:, None]
    return (pc - cam.translation) @ cam.rotation


def unproject_pixel(u: np.ndarray, d: float, cam: CameraFrame) -> np.ndarray:
    if d <= 0:
        raise ValueError("depth must be positive")
    return unproject_pixels(np.asarray(u)[None], np.array([d]), cam)[0]


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(H, W, 2) continuous coordinates of pixel centers, ``(x, y)`` order."""
    jj, ii = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([jj, ii], axis=-1)


def depth_map_to_points(depth: np.ndarray, cam: CameraFrame):
    """Unproject every pixel with positive depth. Returns ``(points, (rows, cols))``."""
    rows, cols = np.nonzero(depth > 0)
    uv = np.stack([cols + 0.5, rows + 0.5], axis=1)
    return unproject_pixels(uv, depth[rows, cols], cam), (rows, cols)


def plucker_rays(uv: np.ndarray, cam: CameraFrame):
    """Plücker embedding of pixel rays: ``(moment o×r, unit direction r)``."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    hom = np.concatenate([uv, np.ones((len(uv), 1))], axis=1)
    d_cam = np.linalg.solve(cam.intrinsics, hom.T).T
    d = d_cam @ cam.rotation  # R^T d_cam, row-wise
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = cam.center
    return np.cross(np.broadcast_to(o, d.shape), d), d


def plucker_ray(u: np.ndarray, cam: CameraFrame):
    m, d = plucker_rays(np.asarray(u)[None], cam)
    return m[0], d[0]


def plucker_image(cam: CameraFrame):
    """Per-pixel Plücker maps, each (H, W, 3)."""
    uv = pixel_centers(cam.width, cam.height).reshape(-1, 2)
    m, d = plucker_rays(uv, cam)
    shape = (cam.height, cam.width, 3)
    return m.reshape(shape), d.reshape(shape)
