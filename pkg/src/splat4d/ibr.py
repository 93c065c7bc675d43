"""Occlusion-aware image-based appearance for Gaussians.

Each Gaussian center is projected into K reference frames, a W x W color
window is sampled around every projection, the views are weighted by a
visibility score and a small MLP maps the stacked windows to SH colors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .gaussians import SH_C0, SH_DIM
from .geometry import project_points
from .weights import MLP, WeightError

log = logging.getLogger(__name__)

WINDOW = 3
TAU = 0.1
SIGMA_DEPTH = 0.5
N_REFS = 3
SH_OUT = 3 * SH_DIM


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W[, C]) at continuous pixel coordinates, where pixel
    (i, j) has its center at (j + 0.5, i + 0.5). Borders are clamped."""
    H, W = img.shape[:2]
    fx = np.clip(np.asarray(x, dtype=np.float64) - 0.5, 0.0, W - 1)
    fy = np.clip(np.asarray(y, dtype=np.float64) - 0.5, 0.0, H - 1)
    x0 = np.minimum(np.floor(fx).astype(np.int64), W - 1)
    y0 = np.minimum(np.floor(fy).astype(np.int64), H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    tx, ty = fx - x0, fy - y0
    if img.ndim == 3:
        tx, ty = tx[..., None], ty[..., None]
    top = img[y0, x0] * (1 - tx) + img[y0, x1] * tx
    bot = img[y1, x0] * (1 - tx) + img[y1, x1] * tx
    return top * (1 - ty) + bot * ty


@dataclass
class WindowSample:
    colors: np.ndarray  # (N, K, W, W, 3)
    visibilities: np.ndarray  # (N, K)
    valid: np.ndarray  # (N, K) bool
    depths: np.ndarray | None = None  # (N, K) projected camera depth
    uv: np.ndarray | None = None  # (N, K, 2)

    @property
    def window(self) -> int:
        return self.colors.shape[2]

    @property
    def appearance_ok(self) -> np.ndarray:
        return self.valid.any(axis=1)

    def with_visibility(self, vis: np.ndarray) -> "WindowSample":
        return WindowSample(self.colors, vis, self.valid, self.depths, self.uv)

    def take(self, view_idx: np.ndarray) -> "WindowSample":
        """Per-point view selection; ``view_idx`` is (N, K')."""
        rows = np.arange(len(view_idx))[:, None]
        pick = lambda a: None if a is None else a[rows, view_idx]
        return WindowSample(self.colors[rows, view_idx], self.visibilities[rows, view_idx],
                            self.valid[rows, view_idx], pick(self.depths), pick(self.uv))


def sample_views(points_per_view, refs, W: int = WINDOW) -> WindowSample:
    """Window-sample colors for points that may sit at a different world
    position in every reference (``points_per_view[k]`` is (N, 3))."""
    if W < 1 or W % 2 == 0:
        raise ValueError(f"window size must be odd, got {W}")
    K = len(refs)
    n = len(points_per_view[0]) if K else 0
    r = W // 2
    off = np.arange(-r, r + 1, dtype=np.float64)
    colors = np.zeros((n, K, W, W, 3))
    valid = np.zeros((n, K), bool)
    depths = np.zeros((n, K))
    uvs = np.full((n, K, 2), np.nan)
    for k, fr in enumerate(refs):
        cam = fr.camera
        uv, z, ok = project_points(points_per_view[k], cam)
        with np.errstate(invalid="ignore"):
            ok = ok & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        valid[:, k] = ok
        depths[:, k] = np.where(ok, z, 0.0)
        uvs[ok, k] = uv[ok]
        if ok.any():
            u = uv[ok]
            xs = u[:, 0, None, None] + off[None, None, :]
            ys = u[:, 1, None, None] + off[None, :, None]
            xs, ys = np.broadcast_arrays(xs, ys)
            colors[ok, k] = bilinear_sample(np.asarray(fr.image, dtype=np.float64), xs, ys)
    return WindowSample(colors, np.zeros((n, K)), valid, depths, uvs)


def sample_window_colors(mu, refs, W: int = WINDOW) -> WindowSample:
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    return sample_views([mu] * len(refs), refs, W)


def _lookup_nearest(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    H, W = img.shape[:2]
    j = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, W - 1)
    i = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, H - 1)
    return img[i, j]


def visibility_depth_guided(sample: WindowSample, refs, sigma_d: float = SIGMA_DEPTH) -> np.ndarray:
    """exp(-|projected depth - map depth| / sigma_d), normalized over valid views."""
    n, K = sample.valid.shape
    w = np.zeros((n, K))
    for k, fr in enumerate(refs):
        ok = sample.valid[:, k]
        if not ok.any():
            continue
        dmap = _lookup_nearest(np.asarray(fr.depth), sample.uv[ok, k])
        res = np.abs(sample.depths[ok, k] - dmap)
        w[ok, k] = np.where(dmap > 0, np.exp(-res / sigma_d), 0.0)
    tot = w.sum(1, keepdims=True)
    return np.divide(w, tot, out=np.zeros_like(w), where=tot > 0)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    den = na * nb
    return np.divide(np.sum(a * b, axis=-1), den, out=np.zeros_like(den), where=den > 0)


def masked_softmax(scores: np.ndarray, valid: np.ndarray) -> np.ndarray:
    s = np.where(valid, scores, -np.inf)
    m = np.max(s, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(valid, np.exp(s - m), 0.0)
    tot = e.sum(-1, keepdims=True)
    return np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)


def visibility_feature_guided(f3d: np.ndarray, f2d: np.ndarray, tau: float = TAU,
                              valid: np.ndarray | None = None) -> np.ndarray:
    """Temperature-scaled softmax of cosine similarity over the valid views.

    ``f3d`` is (..., C), ``f2d`` is (..., K, C).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    f3d = np.asarray(f3d, dtype=np.float64)
    f2d = np.asarray(f2d, dtype=np.float64)
    if valid is None:
        valid = np.ones(f2d.shape[:-1], bool)
    sim = cosine_similarity(f3d[..., None, :], f2d)
    zero = np.linalg.norm(f3d, axis=-1) == 0
    if np.any(zero):
        log.warning("%d zero 3D feature vectors; using uniform visibility", int(np.count_nonzero(zero)))
        sim = np.where(zero[..., None], 0.0, sim)
    return masked_softmax(sim / tau, valid)


def sample_features(points_per_view, refs, valid: np.ndarray) -> np.ndarray:
    """2D features (N, K, C) bilinearly sampled at each valid projection."""
    n, K = valid.shape
    C = np.shape(refs[0].features)[-1]
    out = np.zeros((n, K, C))
    for k, fr in enumerate(refs):
        ok = valid[:, k]
        if ok.any():
            uv, _, _ = project_points(points_per_view[k][ok], fr.camera)
            out[ok, k] = bilinear_sample(np.asarray(fr.features, dtype=np.float64), uv[:, 0], uv[:, 1])
    return out


@dataclass
class ColorDecoderWeights:
    mlp: MLP
    n_views: int = N_REFS
    window: int = WINDOW

    def __post_init__(self):
        want = self.n_views * (self.window * self.window * 3 + 1)
        if self.mlp.in_dim != want:
            raise WeightError(f"color decoder input {self.mlp.in_dim}, expected {want} "
                              f"for K={self.n_views}, W={self.window}")
        if self.mlp.out_dim != SH_OUT:
            raise WeightError(f"color decoder output {self.mlp.out_dim}, expected {SH_OUT}")
        if len(self.mlp.weights) != 3:
            raise WeightError("color decoder must have 3 layers")

    @classmethod
    def random(cls, seed: int, n_views: int = N_REFS, window: int = WINDOW, hidden: int = 64,
               scale: float = 1.0) -> "ColorDecoderWeights":
        rng = np.random.default_rng(seed)
        d = n_views * (window * window * 3 + 1)
        return cls(MLP.random([d, hidden, hidden, SH_OUT], rng, scale), n_views, window)

    @classmethod
    def mean_color(cls, n_views: int = N_REFS, window: int = WINDOW,
                   pixel_weights=None) -> "ColorDecoderWeights":
        """Hand-set decoder whose base color is a weighted mean of the sampled pixels."""
        return cls(mean_color_mlp(n_views, window, SH_OUT, 0, pixel_weights=pixel_weights),
                   n_views, window)

    def to_tensors(self, prefix: str = "color") -> dict:
        return self.mlp.to_tensors(prefix)

    @classmethod
    def from_tensors(cls, tensors: dict, n_views: int, window: int, prefix: str = "color"):
        return cls(MLP.from_tensors(tensors, prefix), n_views, window)


def center_weights(window: int, center: float) -> np.ndarray:
    """Window weights with ``center`` on the middle pixel, the rest spread evenly."""
    w = np.full((window, window), (1.0 - center) / max(window * window - 1, 1))
    w[window // 2, window // 2] = center if window > 1 else 1.0
    return w


def mean_color_mlp(n_views: int, window: int, out_dim: int, sh_offset: int,
                   n_knots: int = 33, extra_bias=None, pixel_weights=None) -> MLP:
    """3-layer ReLU MLP mapping a decoder input to SH whose DC term reproduces
    a weighted mean of the sampled colors (uniform over views, ``pixel_weights``
    over the window, uniform by default).

    Layer 1 forms ``relu(mean_c - k)`` at knots ``k``, layer 2 passes them
    through, layer 3 sums them into a piecewise-linear fit of the inverse of
    the DC squashing in :func:`raw_to_sh`. Invalid views count as black.
    """
    per_view = window * window * 3 + 1
    knots = np.linspace(0.01, 0.99, n_knots)
    target = np.arctanh(2 * knots - 1)
    slopes = np.diff(target) / np.diff(knots)
    a = np.concatenate([[slopes[0]], np.diff(slopes)])  # slope change at each knot
    hid = 3 * (n_knots - 1)
    W1 = np.zeros((n_views * per_view, hid))
    b1 = np.zeros(hid)
    W3 = np.zeros((hid, out_dim))
    b3 = np.zeros(out_dim) if extra_bias is None else np.asarray(extra_bias, dtype=np.float64).copy()
    pw = np.full(window * window, 1.0 / window ** 2) if pixel_weights is None \
        else np.asarray(pixel_weights, dtype=np.float64).ravel() / np.sum(pixel_weights)
    for c in range(3):
        units = slice(c * (n_knots - 1), (c + 1) * (n_knots - 1))
        for v in range(n_views):
            for p in range(window * window):
                W1[v * per_view + p * 3 + c, units] = pw[p] / n_views
        b1[units] = -knots[:-1]
        W3[units, sh_offset + c * SH_DIM] = a
        b3[sh_offset + c * SH_DIM] = target[0]
    return MLP([W1, np.eye(hid), W3], [b1, np.zeros(hid), b3])


def decoder_input(sample: WindowSample) -> np.ndarray:
    n, K = sample.valid.shape
    cols = np.where(sample.valid[:, :, None, None, None], sample.colors, 0.0).reshape(n, K, -1)
    vis = np.where(sample.valid, sample.visibilities, 0.0)
    return np.concatenate([cols, vis[..., None]], axis=2).reshape(n, -1)


def raw_to_sh(raw: np.ndarray) -> np.ndarray:
    """12 raw outputs -> (3, 4) SH; DC squashed so the base color stays in [0, 1]."""
    sh = np.asarray(raw, dtype=np.float64).reshape(raw.shape[:-1] + (3, SH_DIM)).copy()
    sh[..., 0] = np.tanh(sh[..., 0]) * (0.5 / SH_C0)
    return sh


def decode_color(sample: WindowSample, w: ColorDecoderWeights) -> np.ndarray:
    if sample.valid.shape[1] != w.n_views or sample.window != w.window:
        raise WeightError(f"sample has K={sample.valid.shape[1]}, W={sample.window}; "
                          f"decoder wants K={w.n_views}, W={w.window}")
    return raw_to_sh(w.mlp(decoder_input(sample)))


def nearest_views(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """(N, k) indices of the reference cameras closest to each point."""
    d = np.linalg.norm(points[:, None, :] - centers[None], axis=-1)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def appearance(points: np.ndarray, f3d: np.ndarray, frames, w: ColorDecoderWeights,
               tau: float = TAU, mode: str = "feature", sigma_d: float = SIGMA_DEPTH):
    """Decode SH colors for static points from the ``w.n_views`` nearest frames.

    Returns ``(sh (N, 3, 4), appearance_ok (N,))``.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(frames) < w.n_views:
        raise ValueError(f"need {w.n_views} reference frames, have {len(frames)}")
    full = sample_window_colors(points, frames, w.window)
    if mode == "feature":
        f2d = sample_features([points] * len(frames), frames, full.valid)
        vis_all = None
    elif mode == "depth":
        f2d = None
        vis_all = visibility_depth_guided(full, frames, sigma_d)
    else:
        raise ValueError(f"unknown visibility mode {mode!r}")
    centers = np.stack([fr.camera.center for fr in frames])
    idx = nearest_views(points, centers, w.n_views)
    sub = full.take(idx)
    if mode == "feature":
        rows = np.arange(len(points))[:, None]
        vis = visibility_feature_guided(f3d, f2d[rows, idx], tau, sub.valid)
    else:
        vis = vis_all[np.arange(len(points))[:, None], idx]
        tot = vis.sum(1, keepdims=True)
        vis = np.divide(vis, tot, out=np.zeros_like(vis), where=tot > 0)
    sub = sub.with_visibility(vis)
    return decode_color(sub, w), sub.appearance_ok
