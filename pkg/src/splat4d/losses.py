"""Photometric / mask losses and image metrics, with analytic gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

LAMBDA_SSIM = 0.2
LAMBDA_MASK = 0.1
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_MAX = 99.0


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filt_axis(x, g, axis):
    n = x.shape[axis] - len(g) + 1
    out = 0.0
    for k, gk in enumerate(g):
        out = out + gk * np.take(x, np.arange(k, k + n), axis=axis)
    return out


def _filt_axis_t(y, g, axis, full):
    shape = list(y.shape)
    shape[axis] = full
    out = np.zeros(shape)
    n = y.shape[axis]
    for k, gk in enumerate(g):
        idx = [slice(None)] * y.ndim
        idx[axis] = slice(k, k + n)
        out[tuple(idx)] += gk * y
    return out


def _filt(x, g):
    return _filt_axis(_filt_axis(x, g, 0), g, 1)


def _filt_t(y, g, shape):
    return _filt_axis_t(_filt_axis_t(y, g, 1, shape[1]), g, 0, shape[0])


def _window_for(shape, size):
    m = min(shape[0], shape[1])
    if m < size:
        size = m if m % 2 else m - 1
        log.warning("image %s smaller than SSIM window; using %d-px window", shape[:2], size)
    return gaussian_window(size)


def ssim(a: np.ndarray, b: np.ndarray, return_grad: bool = False):
    """Mean SSIM over the valid window positions and channels.

    With ``return_grad`` also returns d SSIM / d a.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    g = _window_for(a.shape, SSIM_WINDOW)
    mu_a, mu_b = _filt(a, g), _filt(b, g)
    e_aa, e_bb, e_ab = _filt(a * a, g), _filt(b * b, g), _filt(a * b, g)
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * (e_ab - mu_a * mu_b) + SSIM_C2
    B1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    B2 = (e_aa - mu_a ** 2) + (e_bb - mu_b ** 2) + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    val = float(S.mean())
    if not return_grad:
        return val
    c = 1.0 / S.size
    BB = B1 * B2
    d_mu = c * ((2 * mu_b * A2 - 2 * mu_b * A1) / BB - S * (2 * mu_a / B1 - 2 * mu_a / B2))
    d_eab = c * 2 * A1 / BB
    d_eaa = c * -S / B2
    grad = _filt_t(d_mu, g, a.shape) + 2 * a * _filt_t(d_eaa, g, a.shape) + b * _filt_t(d_eab, g, a.shape)
    return val, grad


def ssim_reference(a: np.ndarray, b: np.ndarray) -> float:
    """Direct per-window evaluation; slow, for tests."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    g1 = _window_for(a.shape, SSIM_WINDOW)
    w = np.outer(g1, g1)
    s = len(g1)
    vals = []
    for ch in range(a.shape[2] if a.ndim == 3 else 1):
        A = a[..., ch] if a.ndim == 3 else a
        B = b[..., ch] if b.ndim == 3 else b
        for i in range(A.shape[0] - s + 1):
            for j in range(A.shape[1] - s + 1):
                pa, pb = A[i:i + s, j:j + s], B[i:i + s, j:j + s]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va = (w * (pa - ma) ** 2).sum()
                vb = (w * (pb - mb) ** 2).sum()
                cov = (w * (pa - ma) * (pb - mb)).sum()
                vals.append((2 * ma * mb + SSIM_C1) * (2 * cov + SSIM_C2)
                            / ((ma ** 2 + mb ** 2 + SSIM_C1) * (va + vb + SSIM_C2)))
    return float(np.mean(vals))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0:
        return PSNR_MAX
    return min(PSNR_MAX, 10.0 * np.log10(1.0 / mse))


def photometric_loss(render: np.ndarray, target: np.ndarray, lam_ssim: float = LAMBDA_SSIM):
    """``(1 - lam) L1 + lam (1 - SSIM)``; returns ``(value, d/d render, parts)``."""
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if render.shape != target.shape:
        raise ValueError(f"shape mismatch {render.shape} vs {target.shape}")
    diff = render - target
    l1 = float(np.abs(diff).mean())
    s, ds = ssim(render, target, return_grad=True)
    val = (1 - lam_ssim) * l1 + lam_ssim * (1 - s)
    grad = (1 - lam_ssim) * np.sign(diff) / diff.size - lam_ssim * ds
    return val, grad, {"l1": l1, "ssim": s}


def mask_loss(o_cr: np.ndarray, mask: np.ndarray):
    """mean |O - M| and its gradient w.r.t. O."""
    o_cr = np.asarray(o_cr, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if o_cr.shape != m.shape:
        raise ValueError(f"shape mismatch {o_cr.shape} vs {m.shape}")
    d = o_cr - m
    return float(np.abs(d).mean()), np.sign(d) / d.size


@dataclass
class LossReport:
    total: float
    rgb: float
    mask: float
    lam_mask: float = LAMBDA_MASK
    lam_ssim: float = LAMBDA_SSIM

    @classmethod
    def combine(cls, rgb: float, mask: float, lam_mask: float = LAMBDA_MASK,
                lam_ssim: float = LAMBDA_SSIM) -> "LossReport":
        return cls(rgb + lam_mask * mask, rgb, mask, lam_mask, lam_ssim)
