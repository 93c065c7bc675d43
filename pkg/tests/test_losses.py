import logging

import numpy as np
import pytest

from splat4d.losses import (LAMBDA_MASK, LAMBDA_SSIM, PSNR_MAX, SSIM_C1, LossReport, mask_loss,
                            photometric_loss, psnr, ssim, ssim_reference)


def test_ssim_self(rng):
    a = rng.uniform(size=(20, 24, 3))
    assert ssim(a, a) == 1.0


def test_ssim_constant_closed_form():
    a, b = np.zeros((16, 16, 3)), np.ones((16, 16, 3))
    ref = SSIM_C1 / (1 + SSIM_C1)  # means 0 and 1, zero variances
    assert ssim(a, b) == pytest.approx(ref, rel=1e-9)


def test_ssim_reference(rng):
    a, b = rng.uniform(size=(18, 20, 3)), rng.uniform(size=(18, 20, 3))
    assert abs(ssim(a, b) - ssim_reference(a, b)) < 1e-6


def test_ssim_small_image_warns(rng, caplog):
    with caplog.at_level(logging.WARNING):
        v = ssim(rng.uniform(size=(6, 8, 3)), rng.uniform(size=(6, 8, 3)))
    assert -1 <= v <= 1 and "window" in caplog.text


def test_ssim_gradient_fd(rng):
    a, b = rng.uniform(size=(14, 14, 3)), rng.uniform(size=(14, 14, 3))
    _, g = ssim(a, b, return_grad=True)
    h = 1e-6
    for idx in [(0, 0, 0), (7, 7, 1), (13, 2, 2), (5, 11, 0)]:
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        fd = (ssim(ap, b) - ssim(am, b)) / (2 * h)
        assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), 1e-8) + 1e-10


def test_photometric_identical(rng):
    a = rng.uniform(size=(12, 12, 3))
    val, _, parts = photometric_loss(a, a)
    assert val == 0.0 and parts["ssim"] == 1.0


def test_photometric_offset(rng):
    a = rng.uniform(0.2, 0.6, size=(12, 12, 3))
    _, _, parts = photometric_loss(a, a + 0.1)
    assert parts["l1"] * (1 - LAMBDA_SSIM) == pytest.approx(0.1 * (1 - LAMBDA_SSIM), abs=1e-12)


def test_photometric_gradient_fd(rng):
    a, b = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    _, g, _ = photometric_loss(a, b)
    h = 1e-7
    worst = 0.0
    for idx in np.ndindex(a.shape):
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        fd = (photometric_loss(ap, b)[0] - photometric_loss(am, b)[0]) / (2 * h)
        worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx])))
    assert worst < 1e-3


def test_photometric_shape_mismatch():
    with pytest.raises(ValueError):
        photometric_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_mask_loss(rng):
    m = rng.random((10, 12)) < 0.5
    assert mask_loss(m.astype(float), m)[0] == 0.0
    assert mask_loss(np.zeros((10, 12)), np.ones((10, 12)))[0] == 1.0
    o = rng.uniform(size=(10, 12))
    val, g = mask_loss(o, m)
    assert val == np.mean(np.abs(o - m))
    assert np.array_equal(g, np.sign(o - m) / o.size)


def test_psnr():
    a = np.zeros((10, 10, 3))
    assert psnr(a, a) == PSNR_MAX
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_direct(rng):
    a, b = rng.uniform(size=(9, 7, 3)), rng.uniform(size=(9, 7, 3))
    assert psnr(a, b) == 10 * np.log10(1 / np.mean((a - b) ** 2))


def test_loss_report_decomposition(rng):
    for _ in range(100):
        r, m = rng.uniform(0, 2, 2)
        rep = LossReport.combine(r, m)
        assert abs(rep.total - (rep.rgb + LAMBDA_MASK * rep.mask)) < 1e-9
        assert rep.lam_mask == 0.1 and rep.lam_ssim == 0.2
