import numpy as np
import pytest

from splat4d.compositor import SceneState
from splat4d.dataset import (DataError, load_scene, load_scene_bundle, parse_calib, parse_poses,
                             save_scene, save_scene_bundle)
from splat4d.imageio import FileFormatError, read_pfm, write_pfm
from splat4d.synthetic import make_synthetic_scene

from conftest import random_gaussians


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    sc = make_synthetic_scene(n_frames=2, width=32, height=24, focal=24.0, supersample=1, held_out=())
    root = tmp_path_factory.mktemp("ds")
    save_scene_bundle(root, sc.frames, sc.tracks)
    return sc, root


def test_bundle_round_trip(tiny):
    sc, root = tiny
    frames, tracks = load_scene_bundle(root)
    assert len(frames) == 2 and len(tracks) == len(sc.tracks)
    for a, b in zip(frames, sc.frames):
        assert np.abs(a.image - np.round(b.image * 255) / 255).max() < 1e-9
        assert np.allclose(a.depth, b.depth.astype(np.float32))
        assert np.allclose(a.features, b.features.astype(np.float32))
        assert np.allclose(a.camera.extrinsics, b.camera.extrinsics, atol=1e-12)
        assert a.timestamp == b.timestamp


def test_pose_file_matches_hand_parse(tmp_path, rng):
    lines, mats = [], []
    for _ in range(4):
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        q *= np.sign(np.linalg.det(q))
        T = np.hstack([q, rng.normal(size=(3, 1))])
        mats.append(T)
        lines.append(" ".join(f"{v:.17g}" for v in T.ravel()))
    p = tmp_path / "poses.txt"
    p.write_text("\n".join(lines) + "\n")
    ref = [np.array(list(map(float, ln.split()))).reshape(3, 4) for ln in p.read_text().split("\n") if ln]
    got = parse_poses(p)
    for g, r in zip(got, ref):
        assert np.array_equal(g[:3], r) and np.array_equal(g[3], [0, 0, 0, 1])


def test_pose_file_errors(tmp_path):
    p = tmp_path / "poses.txt"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(DataError, match="12 values"):
        parse_poses(p)


def test_non_orthonormal_pose(tiny, tmp_path):
    _, root = tiny
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(root, bad)
    (bad / "poses.txt").write_text("1.01 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1 1\n")
    with pytest.raises(DataError, match="poses.txt:1"):
        load_scene_bundle(bad)


def test_corrupted_depth_header(tiny, tmp_path):
    _, root = tiny
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(root, bad)
    f = bad / "depth" / "000001.pfm"
    raw = bytearray(f.read_bytes())
    raw[0:2] = b"PX"
    f.write_bytes(bytes(raw))
    with pytest.raises(FileFormatError) as exc:
        load_scene_bundle(bad)
    assert exc.value.path == str(f) and exc.value.offset == 0
    assert "000001.pfm" in str(exc.value) and "byte offset 0" in str(exc.value)


def test_pfm_bad_dims_offset(tmp_path):
    p = tmp_path / "d.pfm"
    write_pfm(p, np.ones((3, 4), np.float32))
    raw = p.read_bytes()
    p.write_bytes(raw.replace(b"4 3", b"x 3", 1))
    with pytest.raises(FileFormatError) as exc:
        read_pfm(p)
    assert exc.value.offset == 3


def test_missing_file_named(tiny, tmp_path):
    _, root = tiny
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(root, bad)
    (bad / "image" / "000000.png").unlink()
    with pytest.raises(DataError, match="000000"):
        load_scene_bundle(bad)


def test_calib_parse(tmp_path):
    p = tmp_path / "calib.txt"
    p.write_text("K: 10 0 5 0 11 6 0 0 1\nsize: 10 12\n")
    K, W, H = parse_calib(p)
    assert K[1, 1] == 11 and (W, H) == (10, 12)
    p.write_text("K: 1 2 3\n")
    with pytest.raises(DataError):
        parse_calib(p)


def test_frames_sorted_by_time(tiny, tmp_path):
    _, root = tiny
    import shutil
    d = tmp_path / "t"
    shutil.copytree(root, d)
    (d / "times.txt").write_text("5.0\n2.0\n")
    frames, _ = load_scene_bundle(d)
    assert [f.timestamp for f in frames] == [2.0, 5.0]


def test_scene_round_trip(tmp_path, rng):
    from splat4d.gaussians import BranchTag
    cr = random_gaussians(rng, 10)
    cr.tags[:] = BranchTag.CLOSE_RANGE
    far = random_gaussians(rng, 5)
    far.tags[:] = BranchTag.FAR_FIELD
    for g in (cr, far):
        g.means = g.means.astype(np.float32).astype(np.float64)
    sc = SceneState(cr, [], far, 1.5)
    save_scene(sc, tmp_path)
    back = load_scene(tmp_path)
    assert back.timestamp == 1.5 and not back.actors
    assert np.array_equal(back.close_range.means, cr.means) and len(back.far_field) == 5


def test_scene_wrong_tag(tmp_path, rng):
    from splat4d.gaussians import BranchTag, save_ply
    g = random_gaussians(rng, 3)
    g.tags[:] = BranchTag.CLOSE_RANGE
    save_scene(SceneState(g, []), tmp_path)
    save_ply(g, tmp_path / "far_field.ply")
    with pytest.raises(DataError, match="tagged"):
        load_scene(tmp_path)
