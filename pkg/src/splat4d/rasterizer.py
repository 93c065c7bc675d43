"""Tile-based Gaussian rasterization with an analytic backward pass.

Blending rule shared with :mod:`splat4d.raster_oracle`:

* Gaussians are sorted globally by camera-space depth of their means, ties
  broken by input index;
* a Gaussian touches a pixel iff the pixel center lies inside the circle of
  radius ``3 * sqrt(lambda_max)`` around its projected center;
* ``alpha = opacity * exp(-0.5 d^T conic d)`` and
  ``C = sum c_i alpha_i prod_{j<i} (1 - alpha_j)``;
* a pixel stops blending after the Gaussian that drops its transmittance
  below ``cfg.t_min`` (that Gaussian still contributes).

Each 16x16 tile gets the depth-ordered list of Gaussians whose footprint
box overlaps it, and a compiled kernel blends every pixel of the tile against
that list. Tiles run in parallel but write disjoint outputs, and per-Gaussian
gradients are reduced in a fixed order, so results do not depend on the
worker count. The backward pass recomputes each pixel's blend and walks it in
reverse, so it never divides by ``1 - alpha``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .gaussians import (CONIC_DILATION, SH_C1, GaussianSet, Projection, covariances,
                        eval_sh_raw, normalize_quats, perspective_jacobian, project_gaussians,
                        sh_basis)
from .geometry import CameraFrame, quat_to_rotmat

log = logging.getLogger(__name__)

# skip the TBB probe (it warns on older system TBB builds)
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

MAX_IMAGE_SIDE = 8192


@dataclass(frozen=True)
class RasterConfig:
    tile_size: int = 16
    t_min: float = 1e-5
    dilation: float = CONIC_DILATION
    near: float = 1e-2
    threads: int = 1


@dataclass
class RenderTarget:
    color: np.ndarray  # (H, W, 3)
    opacity: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W), expected depth of the blended surface
    count: np.ndarray  # (H, W) number of blended Gaussians
    n_culled: int = 0

    @classmethod
    def blank(cls, height: int, width: int) -> "RenderTarget":
        return cls(np.zeros((height, width, 3)), np.zeros((height, width)),
                   np.zeros((height, width)), np.zeros((height, width), dtype=np.int64))


@dataclass
class AttributeGradients:
    d_mean: np.ndarray
    d_opacity: np.ndarray
    d_quaternion: np.ndarray
    d_scale: np.ndarray
    d_sh: np.ndarray
    d_mean2d: np.ndarray  # screen-space, used by densification

    @classmethod
    def zeros(cls, n: int) -> "AttributeGradients":
        return cls(np.zeros((n, 3)), np.zeros(n), np.zeros((n, 4)), np.zeros((n, 3)),
                   np.zeros((n, 3, 4)), np.zeros((n, 2)))

    def __iadd__(self, other: "AttributeGradients") -> "AttributeGradients":
        for f in ("d_mean", "d_opacity", "d_quaternion", "d_scale", "d_sh", "d_mean2d"):
            getattr(self, f).__iadd__(getattr(other, f))
        return self


@dataclass
class _Prepared:
    proj: Projection
    colors: np.ndarray  # clamped (N, 3)
    raw_colors: np.ndarray  # unclamped
    order: np.ndarray  # sorted indices of drawable Gaussians
    tile_start: np.ndarray  # (ntiles + 1,) offsets into tile_gid
    tile_gid: np.ndarray  # Gaussian ids per tile, blend order
    n_culled: int


def _check_camera(cam: CameraFrame):
    if cam.width > MAX_IMAGE_SIDE or cam.height > MAX_IMAGE_SIDE:
        raise ValueError(f"image {cam.width}x{cam.height} exceeds {MAX_IMAGE_SIDE}^2")


def _prepare(g: GaussianSet, cam: CameraFrame, cfg: RasterConfig) -> _Prepared:
    _check_camera(cam)
    n = len(g)
    proj = project_gaussians(g, cam, cfg.dilation, cfg.near)
    raw = eval_sh_raw(np.where(np.isfinite(g.sh), g.sh, 0.0), proj.dirs)
    colors = np.clip(raw, 0.0, 1.0)
    finite = np.all(np.isfinite(g.means), 1) & np.isfinite(g.opacities) \
        & np.all(np.isfinite(g.quats), 1) & np.all(np.isfinite(g.scales), 1) \
        & np.all(np.isfinite(g.sh.reshape(n, -1)), 1)
    n_culled = int(np.count_nonzero(~finite))
    if n_culled:
        log.warning("culled %d Gaussians with non-finite attributes", n_culled)

    c, r = proj.centers, proj.radii
    W, H = cam.width, cam.height
    on_screen = (proj.valid & (c[:, 0] + r > 0) & (c[:, 0] - r < W)
                 & (c[:, 1] + r > 0) & (c[:, 1] - r < H) & (r > 0))
    idx = np.nonzero(on_screen)[0]
    order = idx[np.lexsort((idx, proj.depths[idx]))]

    # pixel-center bounding box of each footprint, then the tiles it spans
    ts = cfg.tile_size
    ntx, nty = -(-W // ts), -(-H // ts)
    cx, cy, rr = c[order, 0], c[order, 1], r[order]
    j0 = np.clip(np.ceil(cx - rr - 0.5), 0, W).astype(np.int64)
    j1 = np.clip(np.floor(cx + rr - 0.5), -1, W - 1).astype(np.int64)
    i0 = np.clip(np.ceil(cy - rr - 0.5), 0, H).astype(np.int64)
    i1 = np.clip(np.floor(cy + rr - 0.5), -1, H - 1).astype(np.int64)
    hit = (j1 >= j0) & (i1 >= i0)
    order, j0, j1, i0, i1 = order[hit], j0[hit], j1[hit], i0[hit], i1[hit]
    tx0, tx1, ty0, ty1 = j0 // ts, j1 // ts, i0 // ts, i1 // ts
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    cnt = nx * ny
    rank = np.repeat(np.arange(len(order)), cnt)
    local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    tile = (ty0[rank] + local // nx[rank]) * ntx + tx0[rank] + local % nx[rank]
    perm = np.argsort(tile, kind="stable")  # stable: keeps blend order per tile
    tile_gid = order[rank[perm]]
    tile_start = np.searchsorted(tile[perm], np.arange(ntx * nty + 1))
    return _Prepared(proj, colors, raw, order, tile_start, tile_gid, n_culled)


@njit(parallel=True, cache=True)
def _forward_kernel(tile_start, tile_gid, cx, cy, r2, conic, opac, colors, depths,
                    W, H, ts, t_min, out):
    """out[i, j] = (r, g, b, opacity, depth * opacity, count)."""
    ntx = (W + ts - 1) // ts
    for t in prange(len(tile_start) - 1):
        a, b = tile_start[t], tile_start[t + 1]
        if a == b:
            continue
        i_lo, j_lo = (t // ntx) * ts, (t % ntx) * ts
        for i in range(i_lo, min(i_lo + ts, H)):
            for j in range(j_lo, min(j_lo + ts, W)):
                T = 1.0
                px, py = j + 0.5, i + 0.5
                for k in range(a, b):
                    if T < t_min:
                        break
                    g = tile_gid[k]
                    dx, dy = px - cx[g], py - cy[g]
                    if dx * dx + dy * dy > r2[g]:
                        continue
                    power = 0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) + conic[g, 1] * dx * dy
                    alpha = opac[g] * np.exp(-power)
                    w = alpha * T
                    out[i, j, 0] += w * colors[g, 0]
                    out[i, j, 1] += w * colors[g, 1]
                    out[i, j, 2] += w * colors[g, 2]
                    out[i, j, 3] += w
                    out[i, j, 4] += w * depths[g]
                    out[i, j, 5] += 1.0
                    T *= 1.0 - alpha


@njit(parallel=True, cache=True)
def _backward_kernel(tile_start, tile_gid, cx, cy, r2, conic, opac, colors,
                     W, H, ts, t_min, d_color, d_opac, out):
    """Per tile-list slot: out[k] = (d_rgb[3], d_opacity, d_center[2], d_conic[3])."""
    ntx = (W + ts - 1) // ts
    for t in prange(len(tile_start) - 1):
        a, b = tile_start[t], tile_start[t + 1]
        if a == b:
            continue
        L = b - a
        slot = np.empty(L, np.int64)
        al = np.empty(L)
        tb = np.empty(L)
        ddx = np.empty(L)
        ddy = np.empty(L)
        i_lo, j_lo = (t // ntx) * ts, (t % ntx) * ts
        for i in range(i_lo, min(i_lo + ts, H)):
            for j in range(j_lo, min(j_lo + ts, W)):
                gr, gg, gb, go = d_color[i, j, 0], d_color[i, j, 1], d_color[i, j, 2], d_opac[i, j]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and go == 0.0:
                    continue
                T = 1.0
                px, py = j + 0.5, i + 0.5
                m = 0
                for k in range(a, b):
                    if T < t_min:
                        break
                    g = tile_gid[k]
                    dx, dy = px - cx[g], py - cy[g]
                    if dx * dx + dy * dy > r2[g]:
                        continue
                    power = 0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) + conic[g, 1] * dx * dy
                    alpha = opac[g] * np.exp(-power)
                    slot[m], al[m], tb[m], ddx[m], ddy[m] = k, alpha, T, dx, dy
                    m += 1
                    T *= 1.0 - alpha
                R = 0.0  # value of everything behind, relative to the transmittance after it
                for e in range(m - 1, -1, -1):
                    k = slot[e]
                    g = tile_gid[k]
                    alpha, T, dx, dy = al[e], tb[e], ddx[e], ddy[e]
                    val = gr * colors[g, 0] + gg * colors[g, 1] + gb * colors[g, 2] + go
                    w = alpha * T
                    out[k, 0] += w * gr
                    out[k, 1] += w * gg
                    out[k, 2] += w * gb
                    d_alpha = T * (val - R)
                    R = alpha * val + (1.0 - alpha) * R
                    if opac[g] > 0:
                        out[k, 3] += d_alpha * alpha / opac[g]
                    else:
                        power = 0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) + conic[g, 1] * dx * dy
                        out[k, 3] += d_alpha * np.exp(-power)
                    d_power = -d_alpha * alpha
                    out[k, 4] += d_power * -(conic[g, 0] * dx + conic[g, 1] * dy)
                    out[k, 5] += d_power * -(conic[g, 1] * dx + conic[g, 2] * dy)
                    out[k, 6] += d_power * 0.5 * dx * dx
                    out[k, 7] += d_power * dx * dy
                    out[k, 8] += d_power * 0.5 * dy * dy


def _kernel_args(prep: _Prepared, g: GaussianSet):
    p = prep.proj
    cx = np.ascontiguousarray(p.centers[:, 0])
    cy = np.ascontiguousarray(p.centers[:, 1])
    r2 = np.where(p.valid, p.radii, 0.0) ** 2
    opac = np.where(np.isfinite(g.opacities), g.opacities, 0.0)
    return cx, cy, r2, np.ascontiguousarray(p.conics), opac, np.ascontiguousarray(prep.colors)


def _set_threads(threads: int):
    numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))


def rasterize(g: GaussianSet, cam: CameraFrame, cfg: RasterConfig = RasterConfig()) -> RenderTarget:
    out = RenderTarget.blank(cam.height, cam.width)
    if len(g) == 0:
        return out
    g.validate(strict=False)
    prep = _prepare(g, cam, cfg)
    out.n_culled = prep.n_culled
    H, W = cam.height, cam.width
    acc = np.zeros((H, W, 6))
    if len(prep.tile_gid):
        _set_threads(cfg.threads)
        cx, cy, r2, con, opac, col = _kernel_args(prep, g)
        _forward_kernel(prep.tile_start, prep.tile_gid, cx, cy, r2, con, opac, col,
                        np.ascontiguousarray(prep.proj.depths), W, H, cfg.tile_size, cfg.t_min, acc)
    out.color = acc[..., :3].copy()
    out.opacity = acc[..., 3].copy()
    out.count = acc[..., 5].astype(np.int64)
    opac = acc[..., 3]
    out.depth = np.divide(acc[..., 4], opac, out=np.zeros((H, W)), where=opac > 0)
    return out


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _rotation_vjp(q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. (w, x, y, z) of ``sum(G * R(q))`` for unit ``q``."""
    w, x, y, z = q.T
    g = lambda i, j: G[:, i, j]
    dw = 2 * (-g(0, 1) * z + g(0, 2) * y + g(1, 0) * z - g(1, 2) * x - g(2, 0) * y + g(2, 1) * x)
    dx = 2 * (g(0, 1) * y + g(0, 2) * z + g(1, 0) * y - 2 * g(1, 1) * x - g(1, 2) * w
              + g(2, 0) * z + g(2, 1) * w - 2 * g(2, 2) * x)
    dy = 2 * (-2 * g(0, 0) * y + g(0, 1) * x + g(0, 2) * w + g(1, 0) * x + g(1, 2) * z
              - g(2, 0) * w + g(2, 1) * z - 2 * g(2, 2) * y)
    dz = 2 * (-2 * g(0, 0) * z - g(0, 1) * w + g(0, 2) * x + g(1, 0) * w - 2 * g(1, 1) * z
              + g(1, 2) * y + g(2, 0) * x + g(2, 1) * y)
    return np.stack([dw, dx, dy, dz], axis=1)


def rasterize_backward(g: GaussianSet, cam: CameraFrame, cfg: RasterConfig,
                       d_color: np.ndarray, d_opacity: np.ndarray | None = None) -> AttributeGradients:
    """Gradients of ``sum(d_color * C) + sum(d_opacity * O)`` w.r.t. Gaussian attributes.

    ``d_quaternion`` is taken w.r.t. the stored (possibly unnormalized)
    quaternion and ``d_scale`` w.r.t. the linear scale.
    """
    H, W = cam.height, cam.width
    d_color = np.asarray(d_color, dtype=np.float64)
    if d_color.shape != (H, W, 3):
        raise ValueError(f"d_color shape {d_color.shape} != {(H, W, 3)}")
    d_opacity = np.zeros((H, W)) if d_opacity is None else np.asarray(d_opacity, dtype=np.float64)
    if d_opacity.shape != (H, W):
        raise ValueError(f"d_opacity shape {d_opacity.shape} != {(H, W)}")
    bad = ~np.isfinite(d_color).all(-1) | ~np.isfinite(d_opacity)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(f"non-finite upstream gradient at {int(bad.sum())} pixels, first at ({i}, {j})")

    n = len(g)
    grads = AttributeGradients.zeros(n)
    if n == 0 or (not d_color.any() and not d_opacity.any()):
        return grads
    prep = _prepare(g, cam, cfg)
    proj = prep.proj

    acc = np.zeros((len(prep.tile_gid), 9))
    if len(prep.tile_gid):
        _set_threads(cfg.threads)
        cx, cy, r2, con, opac, col = _kernel_args(prep, g)
        _backward_kernel(prep.tile_start, prep.tile_gid, cx, cy, r2, con, opac, col,
                         W, H, cfg.tile_size, cfg.t_min, np.ascontiguousarray(d_color),
                         np.ascontiguousarray(d_opacity), acc)
    # fixed-order reduction over tile-list slots
    per = np.stack([np.bincount(prep.tile_gid, acc[:, c], n) for c in range(9)], 1)
    d_rgb, d_op, d_center, d_conic = per[:, :3], per[:, 3], per[:, 4:6], per[:, 6:9]

    v = proj.valid
    grads.d_opacity[:] = np.where(v, d_op, 0.0)
    grads.d_mean2d[:] = np.where(v[:, None], d_center, 0.0)

    # SH shading
    d_raw = d_rgb * ((prep.raw_colors > 0) & (prep.raw_colors < 1))
    basis = sh_basis(proj.dirs)
    grads.d_sh[:] = d_raw[:, :, None] * basis[:, None, :]
    sh = np.where(np.isfinite(g.sh), g.sh, 0.0)
    dbasis = np.einsum("nc,nck->nk", d_raw, sh)  # dL/dY_k
    d_dir = np.stack([-SH_C1 * dbasis[:, 3], -SH_C1 * dbasis[:, 1], SH_C1 * dbasis[:, 2]], 1)
    vvec = np.where(v[:, None], g.means, 0.0) - cam.center
    vn = np.linalg.norm(vvec, axis=1, keepdims=True)
    vn = np.where(vn > 0, vn, 1.0)
    dirs = vvec / vn
    d_mean_sh = (d_dir - dirs * (dirs * d_dir).sum(1, keepdims=True)) / vn

    # conic -> 2D covariance
    a, bb, cc = proj.conics.T
    Q = np.stack([np.stack([a, bb], -1), np.stack([bb, cc], -1)], -2)
    GQ = np.stack([np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1),
                   np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)], -2)
    Gcov = -Q @ GQ @ Q

    Rw = cam.rotation
    K = cam.intrinsics
    tc = proj.cam_means
    qn = normalize_quats(np.where(v[:, None], g.quats, np.array([1.0, 0, 0, 0])))
    scales = np.where(v[:, None], g.scales, 1.0)
    sigma = covariances(qn, scales)
    J = perspective_jacobian(tc, K)
    T = J @ Rw
    GT = 2.0 * Gcov @ T @ sigma
    Gsig = np.swapaxes(T, 1, 2) @ Gcov @ T
    GJ = GT @ Rw.T

    fx, sk, fy = K[0, 0], K[0, 1], K[1, 1]
    tx, ty, tz = tc.T
    d_tc = np.zeros((n, 3))
    d_tc[:, 0] = GJ[:, 0, 2] * (-fx / tz ** 2)
    d_tc[:, 1] = GJ[:, 0, 2] * (-sk / tz ** 2) + GJ[:, 1, 2] * (-fy / tz ** 2)
    d_tc[:, 2] = (GJ[:, 0, 0] * (-fx / tz ** 2) + GJ[:, 0, 1] * (-sk / tz ** 2)
                  + GJ[:, 0, 2] * (2 * (fx * tx + sk * ty) / tz ** 3)
                  + GJ[:, 1, 1] * (-fy / tz ** 2) + GJ[:, 1, 2] * (2 * fy * ty / tz ** 3))
    # projected center
    du, dv = d_center[:, 0], d_center[:, 1]
    d_tc[:, 0] += du * fx / tz
    d_tc[:, 1] += du * sk / tz + dv * fy / tz
    d_tc[:, 2] += -du * (fx * tx + sk * ty) / tz ** 2 - dv * fy * ty / tz ** 2

    d_mean = d_tc @ Rw + d_mean_sh
    grads.d_mean[:] = np.where(v[:, None], d_mean, 0.0)

    # Σ = R diag(s^2) R^T
    R = quat_to_rotmat(qn)
    RtGR = np.swapaxes(R, 1, 2) @ Gsig @ R
    d_scale = 2.0 * scales * np.diagonal(RtGR, axis1=1, axis2=2)
    GR = 2.0 * Gsig @ R * (scales ** 2)[:, None, :]
    d_qn = _rotation_vjp(qn, GR)
    qraw = np.where(v[:, None], g.quats, qn)
    qnorm = np.linalg.norm(qraw, axis=1, keepdims=True)
    d_q = (d_qn - qn * (qn * d_qn).sum(1, keepdims=True)) / qnorm
    grads.d_scale[:] = np.where(v[:, None], d_scale, 0.0)
    grads.d_quaternion[:] = np.where(v[:, None], d_q, 0.0)
    grads.d_sh[~v] = 0.0
    return grads


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def save_render(rt: RenderTarget, stem) -> dict:
    """Write ``<stem>.png`` (8-bit color), ``<stem>_opacity.png`` (16-bit) and
    ``<stem>_depth.png`` (16-bit millimeters)."""
    from .imageio import write_png8, write_png16

    stem = str(stem)
    paths = {"color": stem + ".png", "opacity": stem + "_opacity.png", "depth": stem + "_depth.png"}
    write_png8(paths["color"], np.round(np.clip(rt.color, 0, 1) * 255).astype(np.uint8))
    write_png16(paths["opacity"], np.round(np.clip(rt.opacity, 0, 1) * 65535).astype(np.uint16))
    write_png16(paths["depth"], np.clip(np.round(rt.depth * 1000), 0, 65535).astype(np.uint16))
    return paths
