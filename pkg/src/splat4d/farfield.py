"""Per-pixel far-field Gaussians predicted from posed reference views.

The network is a small 3-level convolutional encoder-decoder. At the two
coarsest levels every pixel attends across the K views at the same location.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import BranchTag, GaussianSet, quat_identity_bias, rgb_to_sh_dc
from .geometry import plucker_image
from .volume import sigmoid, softplus
from .weights import WeightError, subtree

IN_CH = 10
OUT_CH = 12  # color 3 | scale 3 | quaternion 4 | opacity 1 | distance 1
Z_NEAR = 80.0
Z_FAR = 10_000.0
MIN_SCALE_PX = 1e-3


def assemble_input(frames, dyn_masks=None) -> np.ndarray:
    """(K, H, W, 10) maps {rgb, dynamic mask, o x r, r}."""
    out = []
    for k, fr in enumerate(frames):
        cam = fr.camera
        img = np.asarray(fr.image, dtype=np.float64)
        if img.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"view {k}: image {img.shape[:2]} vs camera {(cam.height, cam.width)}")
        if dyn_masks is None:
            m = np.zeros(img.shape[:2])
        else:
            m = np.asarray(dyn_masks[k], dtype=np.float64)
            if m.shape != img.shape[:2]:
                raise ValueError(f"view {k}: mask {m.shape} vs image {img.shape[:2]}")
            m = (m > 0).astype(np.float64)
        mom, d = plucker_image(cam)
        out.append(np.concatenate([img[..., :3], m[..., None], mom, d], axis=-1))
    shapes = {o.shape for o in out}
    if len(shapes) > 1:
        raise ValueError(f"reference views differ in resolution: {sorted(shapes)}")
    return np.stack(out)


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """'Same' convolution of (K, H, W, Cin) with a (k, k, Cin, Cout) kernel."""
    kh = kernel.shape[0]
    p = kh // 2
    H, W = x.shape[1:3]
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros(x.shape[:3] + (kernel.shape[3],))
    for a in range(kh):
        for b in range(kh):
            out += xp[:, a:a + H, b:b + W] @ kernel[a, b]
    return out + bias


def cross_view_attention(x: np.ndarray, p: dict) -> np.ndarray:
    """Residual single-head attention across views at each pixel."""
    C = x.shape[-1]
    q, k, v = x @ p["wq"], x @ p["wk"], x @ p["wv"]
    s = np.einsum("ahwc,bhwc->hwab", q, k) / np.sqrt(C)
    s -= s.max(-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(-1, keepdims=True)
    ctx = np.einsum("hwab,bhwc->ahwc", a, v)
    return x + ctx @ p["wo"]


def _up2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


_CONVS = ("enc0", "enc1", "enc2", "dec1", "dec0")
_ATTN = ("att1", "att2")


@dataclass
class FarFieldWeights:
    params: dict  # flat name -> array

    def __post_init__(self):
        p = self.params
        try:
            c0 = p["enc0.kernel"].shape[3]
            c1 = p["enc1.kernel"].shape[3]
            c2 = p["enc2.kernel"].shape[3]
        except KeyError as exc:
            raise WeightError(f"far-field weights missing {exc}") from None
        want = {"enc0": (3, 3, IN_CH, c0), "enc1": (3, 3, c0, c1), "enc2": (3, 3, c1, c2),
                "dec1": (3, 3, c2, c1), "dec0": (3, 3, c1, c0)}
        for nm, shp in want.items():
            self._check(f"{nm}.kernel", shp)
            self._check(f"{nm}.bias", (shp[3],))
        for nm, c in (("att1", c1), ("att2", c2)):
            for m in ("wq", "wk", "wv", "wo"):
                self._check(f"{nm}.{m}", (c, c))
        self._check("head.kernel", (1, 1, c0, OUT_CH))
        self._check("head.bias", (OUT_CH,))
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in p.items()}

    def _check(self, name, shape):
        if name not in self.params:
            raise WeightError(f"far-field weights missing {name}")
        if tuple(self.params[name].shape) != tuple(shape):
            raise WeightError(f"far-field {name}: shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def random(cls, seed: int, widths=(16, 32, 64), scale: float = 1.0) -> "FarFieldWeights":
        rng = np.random.default_rng(seed)
        c0, c1, c2 = widths
        p = {}
        for nm, (ci, co) in {"enc0": (IN_CH, c0), "enc1": (c0, c1), "enc2": (c1, c2),
                             "dec1": (c2, c1), "dec0": (c1, c0)}.items():
            p[f"{nm}.kernel"] = rng.normal(0, scale / np.sqrt(9 * ci), (3, 3, ci, co))
            p[f"{nm}.bias"] = rng.normal(0, 0.05 * scale, co)
        for nm, c in (("att1", c1), ("att2", c2)):
            for m in ("wq", "wk", "wv", "wo"):
                p[f"{nm}.{m}"] = rng.normal(0, scale / np.sqrt(c), (c, c))
        p["head.kernel"] = rng.normal(0, scale / np.sqrt(c0), (1, 1, c0, OUT_CH))
        p["head.bias"] = rng.normal(0, 0.05 * scale, OUT_CH)
        return cls(p)

    @classmethod
    def zeros_like(cls, other: "FarFieldWeights") -> "FarFieldWeights":
        return cls({k: np.zeros_like(v) for k, v in other.params.items()})

    def to_tensors(self, prefix: str = "far") -> dict:
        return {f"{prefix}.{k}": v for k, v in self.params.items()}

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str = "far") -> "FarFieldWeights":
        return cls(subtree(tensors, prefix))


def farfield_forward(x: np.ndarray, w: FarFieldWeights) -> np.ndarray:
    """(K, H, W, 10) -> (K, H, W, 12) raw outputs."""
    if x.ndim != 4 or x.shape[-1] != IN_CH:
        raise ValueError(f"far-field input must be (K, H, W, {IN_CH}), got {x.shape}")
    p = w.params
    K, H, W, _ = x.shape
    Hp, Wp = -(-H // 4) * 4, -(-W // 4) * 4
    x = np.pad(x, ((0, 0), (0, Hp - H), (0, Wp - W), (0, 0)), mode="edge")

    def conv(nm, t):
        return conv2d(t, p[f"{nm}.kernel"], p[f"{nm}.bias"])

    def attn(nm, t):
        return cross_view_attention(t, {m: p[f"{nm}.{m}"] for m in ("wq", "wk", "wv", "wo")})

    e0 = np.maximum(conv("enc0", x), 0)
    e1 = np.maximum(conv("enc1", e0), 0)[:, ::2, ::2]
    e1 = attn("att1", e1)
    e2 = np.maximum(conv("enc2", e1), 0)[:, ::2, ::2]
    e2 = attn("att2", e2)
    d1 = np.maximum(conv("dec1", _up2(e2)), 0) + e1
    d0 = np.maximum(conv("dec0", _up2(d1)), 0) + e0
    out = d0 @ p["head.kernel"][0, 0] + p["head.bias"]
    return out[:, :H, :W]


def interpret_pixel_gaussians(raw: np.ndarray, cams, z_near: float = Z_NEAR,
                              z_far: float = Z_FAR) -> GaussianSet:
    """One Gaussian per pixel per view, centered on the pixel ray."""
    if not 0 < z_near < z_far:
        raise ValueError("need 0 < z_near < z_far")
    sets = []
    for k, cam in enumerate(cams):
        r = raw[k].reshape(-1, OUT_CH)
        _, d = plucker_image(cam)
        d = d.reshape(-1, 3)
        z = z_near + sigmoid(r[:, 11]) * (z_far - z_near)
        mu = cam.center + z[:, None] * d
        # scale unit = one pixel footprint at distance z
        px = z / np.sqrt(cam.fx * cam.fy)
        scales = (softplus(r[:, 3:6]) + MIN_SCALE_PX) * px[:, None]
        sets.append(GaussianSet(mu, sigmoid(r[:, 10]), quat_identity_bias(r[:, 6:10]), scales,
                                rgb_to_sh_dc(sigmoid(r[:, 0:3])), BranchTag.FAR_FIELD))
    return GaussianSet.concat(sets)


def predict_far_field(frames, w: FarFieldWeights, dyn_masks=None, z_near: float = Z_NEAR,
                      z_far: float = Z_FAR) -> GaussianSet:
    x = assemble_input(frames, dyn_masks)
    return interpret_pixel_gaussians(farfield_forward(x, w), [f.camera for f in frames], z_near, z_far)
