import numpy as np
import pytest

from splat4d.compositor import (SceneState, check_depth_separation, composite, render_composite,
                                render_decomposed)
from splat4d.gaussians import BranchTag, GaussianSet
from splat4d.geometry import CameraFrame
from splat4d.rasterizer import rasterize

from conftest import random_gaussians


def _tagged(g, tag):
    return GaussianSet(g.means, g.opacities, g.quats, g.scales, g.sh, tag)


def _separated_scene(rng, n_near=60, n_far=60):
    near = random_gaussians(rng, n_near, spread=1.0, smin=0.05, smax=0.3)
    far = random_gaussians(rng, n_far, spread=4.0, smin=0.3, smax=1.2)
    far.means[:, 2] = rng.uniform(20, 30, n_far)
    return SceneState(_tagged(near, BranchTag.CLOSE_RANGE), [], _tagged(far, BranchTag.FAR_FIELD))


CAM = CameraFrame.look_at([0, 0, -5], [0, 0, 0], 40, 40, 40, 32)


def test_empty_near_is_far(rng):
    sc = _separated_scene(rng)
    sc = SceneState(GaussianSet.empty(), [], sc.far_field)
    out = render_composite(sc, CAM)
    far = rasterize(sc.far_field, CAM)
    assert np.array_equal(out.color, far.color) and np.array_equal(out.opacity, far.opacity)


def test_opaque_near_hides_far(rng):
    sc = _separated_scene(rng)
    walls = GaussianSet(np.c_[np.zeros((4, 2)), np.linspace(0, 0.3, 4)], np.ones(4), np.tile([1.0, 0, 0, 0], (4, 1)),
                        np.tile([100, 100, 0.01], (4, 1)), np.zeros((4, 3, 4)), BranchTag.CLOSE_RANGE)
    out = render_composite(SceneState(walls, [], sc.far_field), CAM)
    near, far = rasterize(walls, CAM), rasterize(sc.far_field, CAM)
    assert np.all(near.opacity > 1 - 1e-4)
    gap = np.abs(out.color - near.color).max(-1)
    assert np.all(gap <= (1 - near.opacity) * far.color.max(-1) + 1e-15)


def test_boundary_identities_exact(rng):
    from splat4d.rasterizer import RenderTarget
    H, W = 6, 5

    def target(op):
        return RenderTarget(rng.uniform(size=(H, W, 3)) * op[..., None], op, rng.uniform(1, 9, (H, W)),
                            np.ones((H, W), np.int64), 0)

    far = target(rng.uniform(size=(H, W)))
    near = target(np.ones((H, W)))
    assert np.array_equal(composite(near, far).color, near.color)
    assert np.array_equal(composite(near, far).opacity, near.opacity)
    empty = target(np.zeros((H, W)))
    assert np.array_equal(composite(empty, far).color, far.color)
    assert np.array_equal(composite(empty, far).opacity, far.opacity)


def test_composite_matches_union(rng):
    worst = 0.0
    for _ in range(20):
        sc = _separated_scene(rng)
        assert check_depth_separation(sc, [CAM]) > 0
        out = render_composite(sc, CAM)
        union = rasterize(GaussianSet.concat([sc.close_range, sc.far_field]), CAM)
        worst = max(worst, np.abs(out.color - union.color).max(), np.abs(out.opacity - union.opacity).max())
    assert worst < 1e-4


def test_composite_formula(rng):
    sc = _separated_scene(rng)
    n, f = rasterize(sc.close_range, CAM), rasterize(sc.far_field, CAM)
    c = composite(n, f)
    assert np.allclose(c.color, n.color + (1 - n.opacity)[..., None] * f.color, atol=0)


def test_separation_violation(rng):
    sc = _separated_scene(rng)
    sc.far_field.means[0, 2] = 0.0
    with pytest.raises(ValueError):
        check_depth_separation(sc, [CAM])


def test_decomposed_no_actors(rng):
    out = render_decomposed(_separated_scene(rng), CAM)
    assert not out["dynamic"].opacity.any() and not out["mask"].any()


def test_branch_opacity_monotone(recon, synthetic):
    sc = recon.scene
    for fr in synthetic.frames[:3]:
        comp = render_composite(sc, fr.camera, fr.timestamp)
        dec = render_decomposed(sc, fr.camera, fr.timestamp)
        for k in ("close_range", "dynamic", "far_field"):
            assert np.all(comp.opacity >= dec[k].opacity - 1e-6)


def test_time_independence(recon, synthetic):
    sc = recon.scene
    fr = synthetic.frames[2]
    a = render_composite(sc, fr.camera, fr.timestamp)
    # changing the pose at another timestamp leaves this render untouched
    actor = sc.actors[0]
    other = max(actor.track.poses)
    from splat4d.actors import CanonicalActor, DynamicActor
    from splat4d.geometry import RigidPose
    poses = dict(actor.track.poses)
    poses[other] = RigidPose.from_translation([50.0, 0, 0]) @ poses[other]
    moved = DynamicActor(CanonicalActor(actor.canonical.cloud, actor.track.with_poses(poses)), actor.gaussians)
    sc2 = SceneState(sc.close_range, [moved], sc.far_field)
    b = render_composite(sc2, fr.camera, fr.timestamp)
    assert np.array_equal(a.color, b.color)


def test_branch_tag_check(rng):
    g = random_gaussians(rng, 3)
    with pytest.raises(ValueError):
        SceneState(_tagged(g, BranchTag.FAR_FIELD), [], GaussianSet.empty())


def test_composite_depth_channel(rng):
    sc = _separated_scene(rng)
    out = render_composite(sc, CAM)
    n, f = rasterize(sc.close_range, CAM), rasterize(sc.far_field, CAM)
    assert np.array_equal(out.depth, np.where(n.opacity > 0.5, n.depth, f.depth))
