import numpy as np
import pytest

from splat4d.gaussians import GaussianSet
from splat4d.geometry import CameraFrame, quat_normalize


def random_gaussians(rng, n, spread=1.5, smin=0.02, smax=0.3, sh_sigma=0.5):
    means = rng.uniform(-spread, spread, (n, 3))
    op = rng.uniform(0.05, 0.95, n)
    q = quat_normalize(rng.normal(size=(n, 4)))
    s = np.exp(rng.uniform(np.log(smin), np.log(smax), (n, 3)))
    sh = rng.normal(0, sh_sigma, (n, 3, 4))
    return GaussianSet(means, op, q, s, sh)


def front_camera(W=64, H=64, f=60.0, dist=5.0, t=0.0):
    return CameraFrame.look_at([0, 0, -dist], [0, 0, 0], f, f, W, H, timestamp=t)


def random_camera(rng, W=32, H=24):
    eye = rng.normal(size=3) * 3
    target = rng.normal(size=3) * 0.3
    return CameraFrame.look_at(eye, target, rng.uniform(30, 80), rng.uniform(30, 80), W, H)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic():
    from splat4d.synthetic import make_synthetic_scene
    return make_synthetic_scene()


@pytest.fixture(scope="session")
def recon(synthetic):
    from splat4d.pipeline import ModelWeights, reconstruct
    return reconstruct(synthetic.frames, synthetic.tracks, ModelWeights.random(0))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in mod.REPORT:
            terminalreporter.write_line(line)
