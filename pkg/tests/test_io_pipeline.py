import time

import numpy as np
import pytest

from splat4d.imageio import (FileFormatError, read_depth, read_features, read_image, read_png,
                             write_depth, write_features, write_png8, write_png16)
from splat4d.pipeline import ModelWeights, ReconConfig, StageError, reconstruct
from splat4d.synthetic import make_synthetic_scene
from splat4d.weights import WeightError, load_weights, save_weights


# --- weight container ----------------------------------------------------------------

def test_weights_round_trip(tmp_path, rng):
    t = {"a.w": rng.normal(size=(3, 5)), "b": rng.normal(size=7).astype(np.float32),
         "c": np.arange(6, dtype=np.int64).reshape(2, 3)}
    save_weights(tmp_path / "w.bin", t, {"k": 1})
    back, meta = load_weights(tmp_path / "w.bin", with_meta=True)
    assert meta == {"k": 1}
    for k, v in t.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)


def test_weights_errors(tmp_path, rng):
    p = tmp_path / "w.bin"
    save_weights(p, {"x": rng.normal(size=100)})
    raw = p.read_bytes()
    p.write_bytes(raw[:-16])
    with pytest.raises(WeightError, match="truncated"):
        load_weights(p)
    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(WeightError, match="magic"):
        load_weights(p)
    p.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(WeightError, match="version"):
        load_weights(p)


def test_model_weights_round_trip(tmp_path):
    w = ModelWeights.random(3)
    w.save(tmp_path / "m.bin")
    v = ModelWeights.load(tmp_path / "m.bin")
    a, b = {}, {}
    for part in (w.unet, w.heads, w.color, w.dynamic, w.far):
        a.update(part.to_tensors())
    for part in (v.unet, v.heads, v.color, v.dynamic, v.far):
        b.update(part.to_tensors())
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# --- image files ---------------------------------------------------------------------

def test_png8_round_trip(tmp_path, rng):
    img = np.round(rng.uniform(size=(5, 7, 3)) * 255) / 255
    write_png8(tmp_path / "a.png", img)
    assert np.array_equal(read_image(tmp_path / "a.png"), img)


def test_depth_png16_and_pfm(tmp_path, rng):
    d = np.round(rng.uniform(0, 50, (6, 4)), 3)
    d[0, 0] = 0
    write_depth(tmp_path / "d.png", d)
    assert read_png(tmp_path / "d.png").dtype == np.uint16
    assert np.abs(read_depth(tmp_path / "d.png") - d).max() < 1e-9
    d[1, 1] = np.nan
    write_depth(tmp_path / "d.pfm", d)
    back = read_depth(tmp_path / "d.pfm")
    assert back[1, 1] == 0 and np.allclose(back[2:], d[2:].astype(np.float32))


def test_depth_png8_rejected(tmp_path):
    write_png8(tmp_path / "d.png", np.zeros((3, 3)))
    with pytest.raises(FileFormatError, match="16-bit"):
        read_depth(tmp_path / "d.png")


def test_features_round_trip_and_errors(tmp_path, rng):
    f = rng.normal(size=(3, 4, 5)).astype(np.float32)
    write_features(tmp_path / "f.feat", f)
    assert np.array_equal(read_features(tmp_path / "f.feat"), f)
    write_features(tmp_path / "h.feat", f, "float16")
    assert np.abs(read_features(tmp_path / "h.feat") - f).max() < 1e-2
    with pytest.raises(ValueError):
        write_features(tmp_path / "x.feat", f, "float64")
    raw = (tmp_path / "f.feat").read_bytes()
    (tmp_path / "g.feat").write_bytes(raw[:2] + b"??" + raw[4:])
    with pytest.raises(FileFormatError) as exc:
        read_features(tmp_path / "g.feat")
    assert exc.value.offset == 2
    (tmp_path / "g.feat").write_bytes(raw[:-8])
    with pytest.raises(FileFormatError) as exc:
        read_features(tmp_path / "g.feat")
    assert exc.value.offset == 16


def test_png_bad_signature(tmp_path):
    (tmp_path / "x.png").write_bytes(b"\x89PNX\r\n\x1a\n" + b"\0" * 20)
    with pytest.raises(FileFormatError) as exc:
        read_png(tmp_path / "x.png")
    assert exc.value.offset == 3


# --- reconstruction ------------------------------------------------------------------

def test_reconstruct_static_no_actors():
    sc = make_synthetic_scene(n_frames=3, width=48, height=32, focal=35.0, supersample=1, with_car=False)
    rec = reconstruct(sc.frames, sc.tracks, ModelWeights.random(0), ReconConfig(voxel_size=0.25))
    c = rec.scene.counts()
    assert c["dynamic"] == 0 and c["actors"] == 0 and c["close_range"] > 0 and c["far_field"] > 0
    assert set(rec.timings) == {"ingest", "volume", "appearance", "dynamic", "far_field", "masks"}
    rec.scene.close_range.validate()


def test_reconstruct_deterministic(synthetic):
    cfg = ReconConfig(voxel_size=0.25)
    a = reconstruct(synthetic.frames, synthetic.tracks, ModelWeights.random(1), cfg)
    b = reconstruct(synthetic.frames, synthetic.tracks, ModelWeights.random(1), cfg)
    for x, y in ((a.scene.close_range, b.scene.close_range), (a.scene.far_field, b.scene.far_field),
                 (a.scene.actors[0].gaussians, b.scene.actors[0].gaussians)):
        assert np.array_equal(x.means, y.means) and np.array_equal(x.sh, y.sh)


def test_stage_error_names_stage(synthetic):
    from splat4d.ingest import FrameBundle
    empty = [FrameBundle(f.image, np.zeros_like(f.depth), f.features, f.camera) for f in synthetic.frames]
    with pytest.raises(StageError) as exc:
        reconstruct(empty, [], ModelWeights.random(0))
    assert exc.value.stage == "ingest"


def test_toy_volume_timing():
    """16x32x32-voxel toy scene reconstructs in under a minute."""
    sc = make_synthetic_scene(n_frames=3, width=64, height=48, focal=45.0, supersample=1)
    lo = np.array([-3.2, -1.6, 0.5])
    cfg = ReconConfig(voxel_size=0.2, bounds=(tuple(lo), tuple(lo + 0.2 * np.array([32, 16, 32]))))
    t0 = time.perf_counter()
    rec = reconstruct(sc.frames, sc.tracks, ModelWeights.random(0), cfg)
    assert time.perf_counter() - t0 < 60
    assert rec.scene.counts()["close_range"] > 0
