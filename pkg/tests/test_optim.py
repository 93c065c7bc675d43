import numpy as np
import pytest

from splat4d.compositor import SceneState, render_composite
from splat4d.gaussians import BranchTag, GaussianSet, load_ply, rgb_to_sh_dc, save_ply
from splat4d.geometry import CameraFrame, RigidPose, quat_from_axis_angle, quat_multiply
from splat4d.ingest import FEATURE_DIM, FrameBundle
from splat4d.optim import (DivergenceError, FinetuneConfig, _pose_grads, densify_and_prune,
                           finetune_scene, quat_left_matrix, scene_extent, window_means,
                           write_curve_csv)
from splat4d.rasterizer import RasterConfig, rasterize, rasterize_backward

from conftest import random_gaussians


def _frame(img, cam):
    H, W = img.shape[:2]
    return FrameBundle(img, np.zeros((H, W)), np.zeros((H, W, FEATURE_DIM)), cam)


CAM = CameraFrame.look_at([0, 0, -4], [0, 0, 0], 30, 30, 24, 20)


def _single(rgb=(0.2, 0.2, 0.2), opacity=0.5, scale=0.4):
    return GaussianSet([[0.0, 0, 0]], [opacity], [[1, 0, 0, 0]], [[scale] * 3], rgb_to_sh_dc(np.array(rgb))[None],
                       BranchTag.CLOSE_RANGE)


def test_steps_zero_unchanged():
    sc = SceneState(_single())
    res = finetune_scene(sc, [_frame(np.zeros((20, 24, 3)), CAM)], FinetuneConfig(steps=0))
    assert res.scene is sc and res.curve == []


def test_no_frames():
    with pytest.raises(ValueError):
        finetune_scene(SceneState(_single()), [], FinetuneConfig(steps=1))


def test_single_gaussian_loss_decreases():
    target = np.full((20, 24, 3), [0.7, 0.4, 0.3])
    res = finetune_scene(SceneState(_single()), [_frame(target, CAM)],
                         FinetuneConfig(steps=50, densify=False, lam_mask=0.0))
    tot = np.array([r["total"] for r in res.curve])
    assert len(tot) == 50 and np.all(np.diff(tot) < 0)


def test_quaternions_stay_unit(rng):
    g = random_gaussians(rng, 30, spread=1.0, smin=0.1, smax=0.4)
    g.tags[:] = BranchTag.CLOSE_RANGE
    res = finetune_scene(SceneState(g), [_frame(rng.uniform(size=(20, 24, 3)), CAM)],
                         FinetuneConfig(steps=5, densify=False))
    q = res.scene.close_range.quats
    assert np.allclose(np.linalg.norm(q, axis=1), 1, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    cam = CAM
    g = _single(rgb=(0.5, 0.5, 0.5), opacity=0.9, scale=0.6)
    target = rasterize(g, cam).color + 1e-3
    cfg = FinetuneConfig(steps=200, lr=50.0, densify=False, divergence_patience=5)
    with pytest.raises(DivergenceError) as exc:
        finetune_scene(SceneState(g), [_frame(target, cam)], cfg)
    assert exc.value.loss > 10 * exc.value.initial


def test_curve_csv(tmp_path):
    target = np.full((20, 24, 3), 0.6)
    res = finetune_scene(SceneState(_single()), [_frame(target, CAM)],
                         FinetuneConfig(steps=4, densify=False), csv_path=tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "step,total,rgb,mask,psnr" and len(lines) == 5
    assert len(window_means(res.curve, 2)) == 2


def test_scene_extent():
    cams = [CameraFrame.look_at([x, 0, 0], [x, 0, 1], 10, 10, 4, 4) for x in (0.0, 10.0)]
    assert scene_extent([_frame(np.zeros((4, 4, 3)), c) for c in cams]) == pytest.approx(5.5)


# --- densification ------------------------------------------------------------------

def test_densify_zero_grads_prune_only(rng):
    g = random_gaussians(rng, 20)
    g.opacities[:5] = 0.001
    out, parent, is_new, rep = densify_and_prune(g, np.zeros(20), 10.0)
    assert len(out) == 15 and rep.cloned == rep.split == 0 and rep.pruned == 5
    assert not is_new.any() and np.array_equal(parent, np.arange(5, 20))


def test_densify_split_arity(rng):
    g = random_gaussians(rng, 6, smin=0.01, smax=0.02)
    g.scales[2] = [1.0, 0.5, 0.5]
    grads = np.zeros(6)
    grads[2] = 1.0
    out, parent, is_new, rep = densify_and_prune(g, grads, 10.0, rng=rng)
    assert rep.split == 1 and rep.cloned == 0 and len(out) == 7
    kids = np.nonzero(parent == 2)[0]
    assert len(kids) == 2 and is_new[kids].all()
    assert np.allclose(out.scales[kids], g.scales[2] / 1.6)


def test_densify_clone(rng):
    g = random_gaussians(rng, 4, smin=0.01, smax=0.02)
    out, parent, is_new, rep = densify_and_prune(g, np.array([0, 1.0, 0, 0]), 10.0)
    assert rep.cloned == 1 and len(out) == 5 and parent[-1] == 1 and is_new[-1]
    assert np.array_equal(out.means[-1], g.means[1])


def test_densify_invariants(rng):
    g = random_gaussians(rng, 200, smin=0.01, smax=0.5)
    out, *_ = densify_and_prune(g, rng.uniform(0, 4e-4, 200), 5.0, rng=rng)
    out.validate()
    assert np.all(out.scales > 0) and np.all((out.opacities >= 0) & (out.opacities <= 1))


def test_densify_ply_closure(tmp_path, rng):
    g = random_gaussians(rng, 50, spread=1.0, smin=0.05, smax=0.4)
    out, *_ = densify_and_prune(g, rng.uniform(0, 4e-4, 50), 3.0, rng=rng)
    out.means = out.means.astype(np.float32).astype(np.float64)
    out.sh = out.sh.astype(np.float32).astype(np.float64)
    save_ply(out, tmp_path / "d.ply")
    back = load_ply(tmp_path / "d.ply")
    a, b = rasterize(out, CAM), rasterize(back, CAM)
    assert np.abs(a.color - b.color).max() < 1e-6


# --- pose gradients ------------------------------------------------------------------

def test_pose_gradient_fd(rng):
    g = random_gaussians(rng, 12, spread=0.6, smin=0.1, smax=0.3)
    pose = RigidPose(quat_from_axis_angle([0.1, 0.3, -0.2]), np.array([0.2, -0.1, 0.3]))
    from splat4d.actors import CanonicalActor, DynamicActor, ActorTrack
    from splat4d.ingest import FeatureCloud
    actor = DynamicActor(CanonicalActor(FeatureCloud(g.means, np.zeros((12, 16)), np.zeros(12)),
                                        ActorTrack("a", [1, 1, 1], {0.0: pose})), g)
    up = rng.normal(size=(20, 24, 3))

    def loss(p):
        return (rasterize(actor.placed(0.0, p), CAM).color * up).sum()

    world = actor.placed(0.0, pose)
    d = _pose_grads(world, rasterize_backward(world, CAM, RasterConfig(), up), pose)
    h = 1e-6
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        plus = RigidPose(quat_multiply(quat_from_axis_angle(e[3:]), pose.rotation), pose.translation + e[:3])
        minus = RigidPose(quat_multiply(quat_from_axis_angle(-e[3:]), pose.rotation), pose.translation - e[:3])
        fd = (loss(plus) - loss(minus)) / (2 * h)
        assert abs(fd - d[i]) <= 2e-3 * max(abs(fd), abs(d[i])) + 1e-6


def test_quat_left_matrix(rng):
    q, p = rng.normal(size=4), rng.normal(size=4)
    assert np.allclose(quat_left_matrix(q) @ p, quat_multiply(q, p))


def test_pose_refinement_small(rng):
    """Pose-only refinement pulls a shifted textured actor back."""
    from splat4d.actors import ActorTrack, CanonicalActor, DynamicActor
    from splat4d.ingest import FeatureCloud
    g = random_gaussians(rng, 60, spread=0.8, smin=0.08, smax=0.2, sh_sigma=1.0)
    g.opacities[:] = 0.9
    g.tags[:] = BranchTag.DYNAMIC
    true = RigidPose.identity()
    cams = [CameraFrame.look_at([x, -1, -4], [0, 0, 0], 30, 30, 24, 20) for x in (-1.0, 1.0)]
    frames = []
    for c in cams:
        frames.append(_frame(rasterize(g, c).color, CameraFrame(c.intrinsics, c.extrinsics, 24, 20, 0.0)))
    shifted = RigidPose.from_translation([0.1, -0.08, 0.05])
    actor = DynamicActor(CanonicalActor(FeatureCloud(g.means, np.zeros((60, 16)), np.zeros(60)),
                                        ActorTrack("a", [2, 2, 2], {0.0: shifted})), g)
    sc = SceneState(GaussianSet.empty(), [actor], GaussianSet.empty())
    res = finetune_scene(sc, frames, FinetuneConfig(steps=150, optimize_gaussians=False, lam_mask=0.0))
    err = np.linalg.norm(res.scene.actors[0].track.poses[0.0].translation - true.translation)
    assert err < 0.02
