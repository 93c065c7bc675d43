"""Gaussian primitives: data model, covariance, density, SH shading, EWA projection."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraFrame, quat_to_rotmat

log = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_DIM = 4  # degree 1

# anti-aliasing floor added to the screen-space covariance diagonal (px^2)
CONIC_DILATION = 0.3
QUAT_TOL = 1e-6

# bumped whenever a non-unit quaternion had to be renormalized
normalization_warnings = 0


class BranchTag(enum.IntEnum):
    CLOSE_RANGE = 0
    DYNAMIC = 1
    FAR_FIELD = 2


@dataclass
class GaussianSet:
    means: np.ndarray
    opacities: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    sh: np.ndarray
    tags: np.ndarray = None

    def __post_init__(self):
        n = len(np.atleast_2d(self.means)) if np.size(self.means) else 0
        self.means = np.asarray(self.means, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, 3, SH_DIM)
        if self.tags is None:
            self.tags = np.full(n, BranchTag.CLOSE_RANGE, dtype=np.uint8)
        else:
            self.tags = np.broadcast_to(np.asarray(self.tags, dtype=np.uint8), (n,)).copy()

    def validate(self, strict: bool = True) -> None:
        """Raise ``ValueError`` if any type invariant is violated.

        With ``strict=False`` non-finite entries are tolerated (the rasterizer
        culls them), but range invariants are still checked on finite entries.
        """
        arrays = (self.means, self.opacities, self.quats, self.scales, self.sh)
        if strict and not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("non-finite Gaussian attribute")
        with np.errstate(invalid="ignore"):
            if np.any(self.opacities < 0) or np.any(self.opacities > 1):
                raise ValueError("opacity outside [0, 1]")
            if np.any(self.scales <= 0):
                raise ValueError("scales must be strictly positive")
            qn = np.linalg.norm(self.quats, axis=1)
            if strict and np.any(np.abs(qn - 1) > QUAT_TOL):
                raise ValueError("quaternions must be unit-norm")

    def __len__(self) -> int:
        return len(self.means)

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros((0, 3, SH_DIM)), np.zeros(0, dtype=np.uint8))

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(self.means[idx], self.opacities[idx], self.quats[idx],
                           self.scales[idx], self.sh[idx], self.tags[idx])

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.means.copy(), self.opacities.copy(), self.quats.copy(),
                           self.scales.copy(), self.sh.copy(), self.tags.copy())

    @staticmethod
    def concat(sets) -> "GaussianSet":
        sets = [s for s in sets if s is not None]
        if not sets:
            return GaussianSet.empty()
        return GaussianSet(*(np.concatenate([getattr(s, f) for s in sets])
                             for f in ("means", "opacities", "quats", "scales", "sh", "tags")))

    def colors_dc(self) -> np.ndarray:
        """View-independent part of the color, clamped to [0, 1]."""
        return np.clip(self.sh[:, :, 0] * SH_C0 + 0.5, 0.0, 1.0)


# ---------------------------------------------------------------------------
# covariance and density
# ---------------------------------------------------------------------------

def normalize_quats(q: np.ndarray) -> np.ndarray:
    global normalization_warnings
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    off = np.abs(n - 1.0) > QUAT_TOL
    if np.any(off):
        normalization_warnings += int(np.count_nonzero(off))
        log.debug("renormalized %d non-unit quaternions", int(np.count_nonzero(off)))
    return q / n


def quat_identity_bias(raw: np.ndarray) -> np.ndarray:
    """Head output -> unit quaternion; zero output decodes to the identity."""
    q = np.asarray(raw, dtype=np.float64) + np.array([1.0, 0.0, 0.0, 0.0])
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(n > 1e-12, q / np.maximum(n, 1e-12), np.array([1.0, 0.0, 0.0, 0.0]))


def covariances(quats: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Batched ``R S S^T R^T`` (N, 3, 3)."""
    R = quat_to_rotmat(normalize_quats(quats))
    M = R * np.asarray(scales, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def build_covariance(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    return covariances(np.asarray(q)[None], np.asarray(s)[None])[0]


def eval_density(x, mean, opacity, q, s) -> float:
    """Unnormalized Gaussian weighted by opacity, evaluated at ``x``."""
    R = quat_to_rotmat(normalize_quats(np.asarray(q, dtype=np.float64)))
    # Σ^-1 = R S^-2 R^T, so the quadratic form is |S^-1 R^T d|^2
    d = np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    local = (R.T @ d) / np.asarray(s, dtype=np.float64)
    return float(opacity * np.exp(-0.5 * local @ local))


# ---------------------------------------------------------------------------
# spherical harmonics (degree 1)
# ---------------------------------------------------------------------------

def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Real SH basis values (..., 4) in the usual splatting sign convention."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    return np.stack([np.full_like(x, SH_C0), -SH_C1 * y, SH_C1 * z, -SH_C1 * x], axis=-1)


def eval_sh_raw(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Unclamped ``coeffs · Y(dir) + 0.5``; coeffs (..., 3, 4), dirs (..., 3)."""
    return np.einsum("...ck,...k->...c", coeffs, sh_basis(dirs)) + 0.5


def eval_sh(coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    return np.clip(eval_sh_raw(coeffs, view_dir), 0.0, 1.0)


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    """SH coefficients reproducing a constant color (degree-1 terms zero)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    sh = np.zeros(rgb.shape + (SH_DIM,))
    sh[..., 0] = (rgb - 0.5) / SH_C0
    return sh


# ---------------------------------------------------------------------------
# screen-space projection
# ---------------------------------------------------------------------------

@dataclass
class Conic2D:
    center: np.ndarray
    inv_cov: np.ndarray
    radius: float


@dataclass
class Projection:
    """Per-Gaussian screen-space footprint for one camera (arrays over N)."""

    centers: np.ndarray  # (N, 2) pixels
    conics: np.ndarray  # (N, 3) a, b, c of the inverse 2D covariance
    cov2d: np.ndarray  # (N, 2, 2) dilated
    radii: np.ndarray  # (N,) pixels
    depths: np.ndarray  # (N,) camera-space z
    cam_means: np.ndarray  # (N, 3)
    valid: np.ndarray  # (N,) bool
    dirs: np.ndarray = field(default=None)  # (N, 3) unit view directions


def perspective_jacobian(cam_means: np.ndarray, K: np.ndarray) -> np.ndarray:
    """d(pixel)/d(camera point) at each camera-space mean, (N, 2, 3)."""
    fx, skew, fy = K[0, 0], K[0, 1], K[1, 1]
    tx, ty, tz = cam_means[:, 0], cam_means[:, 1], cam_means[:, 2]
    J = np.zeros((len(cam_means), 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 1] = skew / tz
    J[:, 0, 2] = -(fx * tx + skew * ty) / tz ** 2
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / tz ** 2
    return J


def project_gaussians(g: GaussianSet, cam: CameraFrame, dilation: float = CONIC_DILATION,
                      near: float = 1e-2) -> Projection:
    """EWA projection of every Gaussian; culled entries have ``valid == False``."""
    n = len(g)
    finite = (np.all(np.isfinite(g.means), 1) & np.isfinite(g.opacities)
              & np.all(np.isfinite(g.quats), 1) & np.all(np.isfinite(g.scales), 1)
              & np.all(np.isfinite(g.sh.reshape(n, -1)), 1))
    finite &= np.linalg.norm(np.where(np.isfinite(g.quats), g.quats, 0), axis=1) > 0
    means = np.where(finite[:, None], g.means, 0.0)
    quats = np.where(finite[:, None], g.quats, np.array([1.0, 0, 0, 0]))
    scales = np.where(finite[:, None], g.scales, 1.0)

    W = cam.rotation
    tc = means @ W.T + cam.translation
    tz = tc[:, 2]
    front = finite & (tz > near)
    tcs = np.where(front[:, None], tc, np.array([0.0, 0.0, 1.0]))

    sigma = covariances(quats, scales)
    J = perspective_jacobian(tcs, cam.intrinsics)
    T = J @ W
    cov = T @ sigma @ np.swapaxes(T, 1, 2)
    cov[:, 0, 0] += dilation
    cov[:, 1, 1] += dilation
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    ok = front & (det > 0) & np.isfinite(det)
    dsafe = np.where(ok, det, 1.0)
    conics = np.stack([cov[:, 1, 1] / dsafe, -cov[:, 0, 1] / dsafe, cov[:, 0, 0] / dsafe], axis=1)
    mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid ** 2 - det, 0.0))
    radii = 3.0 * np.sqrt(np.maximum(lam, 0.0))

    hom = tcs @ cam.intrinsics.T
    centers = hom[:, :2] / hom[:, 2:3]
    dirs = means - cam.center
    dn = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = dirs / np.where(dn > 0, dn, 1.0)
    return Projection(centers, conics, cov, radii, tz, tcs, ok, dirs)


def project_covariance(mean, q, s, cam: CameraFrame, dilation: float = CONIC_DILATION) -> Conic2D | None:
    """Screen-space conic of a single Gaussian, or ``None`` if culled."""
    g = GaussianSet(np.asarray(mean)[None], [1.0], np.asarray(q)[None], np.asarray(s)[None],
                    np.zeros((1, 3, SH_DIM)))
    p = project_gaussians(g, cam, dilation)
    if not p.valid[0]:
        return None
    a, b, c = p.conics[0]
    return Conic2D(p.centers[0], np.array([[a, b], [b, c]]), float(p.radii[0]))


# ---------------------------------------------------------------------------
# PLY interchange
# ---------------------------------------------------------------------------

_PLY_FIELDS = (["x", "y", "z", "opacity"] + [f"rot_{i}" for i in range(4)]
               + [f"scale_{i}" for i in range(3)] + [f"f_dc_{i}" for i in range(3)]
               + [f"f_rest_{i}" for i in range(9)])


def _logit(p):
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return np.log(p) - np.log1p(-p)


def save_ply(g: GaussianSet, path) -> None:
    """Binary little-endian PLY in the layout common splat viewers read.

    Opacity is written as a logit and scales as logs, which is what those
    viewers expect; ``load_ply`` undoes both.
    """
    n = len(g)
    dtype = [(f, "<f4") for f in _PLY_FIELDS] + [("branch_tag", "u1")]
    rec = np.zeros(n, dtype=dtype)
    rec["x"], rec["y"], rec["z"] = g.means.T
    rec["opacity"] = _logit(g.opacities)
    for i in range(4):
        rec[f"rot_{i}"] = g.quats[:, i]
    for i in range(3):
        rec[f"scale_{i}"] = np.log(g.scales[:, i])
        rec[f"f_dc_{i}"] = g.sh[:, i, 0]
    rest = g.sh[:, :, 1:].reshape(n, 9)  # channel-major
    for i in range(9):
        rec[f"f_rest_{i}"] = rest[:, i]
    rec["branch_tag"] = g.tags
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {f}" for f in _PLY_FIELDS]
    header += ["property uchar branch_tag", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "uchar": "u1", "uint8": "u1",
              "int": "<i4", "int32": "<i4", "uint": "<u4", "short": "<i2", "ushort": "<u2"}


def load_ply(path) -> GaussianSet:
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    n, props = 0, []
    for ln in lines:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    rec = np.frombuffer(raw, dtype=props, count=n, offset=end + len(b"end_header\n"))
    f = lambda k: rec[k].astype(np.float64)
    means = np.stack([f("x"), f("y"), f("z")], 1)
    op = 1.0 / (1.0 + np.exp(-f("opacity")))
    quats = np.stack([f(f"rot_{i}") for i in range(4)], 1)
    scales = np.exp(np.stack([f(f"scale_{i}") for i in range(3)], 1))
    sh = np.zeros((n, 3, SH_DIM))
    for i in range(3):
        sh[:, i, 0] = f(f"f_dc_{i}")
    names = rec.dtype.names
    if "f_rest_0" in names:
        sh[:, :, 1:] = np.stack([f(f"f_rest_{i}") for i in range(9)], 1).reshape(n, 3, 3)
    tags = rec["branch_tag"].astype(np.uint8) if "branch_tag" in names else None
    return GaussianSet(means, op, quats, scales, sh, tags)
