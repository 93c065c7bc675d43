import json
import shutil

import numpy as np
import pytest
import yaml

from splat4d import cli
from splat4d.dataset import hash_tree, load_scene, save_scene_bundle
from splat4d.imageio import read_image, read_mask, write_png8
from splat4d.synthetic import make_synthetic_scene


def _dataset(root, with_car=True, n=3):
    sc = make_synthetic_scene(n_frames=n, width=48, height=32, focal=35.0, supersample=1,
                              held_out=(), with_car=with_car)
    save_scene_bundle(root, sc.frames, sc.tracks)
    return sc


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    _dataset(root / "data")
    cfg = {"data": "data", "recon": {"voxel_size": 0.25}, "finetune": {"steps": 3}}
    (root / "cfg.yaml").write_text(yaml.safe_dump(cfg))
    assert cli.run(["reconstruct", "--config", str(root / "cfg.yaml"), "--out", str(root / "rec")]) == 0
    return root


def test_reconstruct_outputs(ds):
    m = json.loads((ds / "rec" / "manifest.json").read_text())
    for d in cli.OUT_DIRS:
        assert (ds / "rec" / d).is_dir()
    assert m["counts"]["actors"] == 1 and m["counts"]["close_range"] > 0
    assert len(m["config_hash"]) == 64 and m["input_hash"] == hash_tree(ds / "data")
    assert (ds / "rec" / "logs" / "timings.json").exists()


def test_reconstruct_deterministic(ds):
    assert cli.run(["reconstruct", "--config", str(ds / "cfg.yaml"), "--out", str(ds / "rec2")]) == 0
    assert hash_tree(ds / "rec" / "gaussians") == hash_tree(ds / "rec2" / "gaussians")
    assert (ds / "rec" / "manifest.json").read_bytes() == (ds / "rec2" / "manifest.json").read_bytes()


def test_static_scene_no_actors(tmp_path):
    _dataset(tmp_path / "data", with_car=False)
    assert cli.run(["reconstruct", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "o")]) == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["counts"]["dynamic"] == 0 and m["counts"]["actors"] == 0


def test_render_decompose_mask(ds):
    out = ds / "ren"
    rc = cli.run(["render", "--config", str(ds / "cfg.yaml"), "--scene", str(ds / "rec" / "gaussians"),
                  "--out", str(out), "--frames", "0,2", "--decompose", "--mask"])
    assert rc == 0
    names = sorted(p.name for p in (out / "renders").iterdir())
    for stem in ("000000", "000002"):
        for suf in ("", "_cr", "_dyn", "_far"):
            assert f"{stem}{suf}.png" in names
        assert f"{stem}_mask.png" in names
    assert read_mask(out / "renders" / "000000_mask.png").any()


def test_edit_delete_all_then_render(ds, tmp_path):
    script = tmp_path / "e.json"
    script.write_text(json.dumps([{"actor": "*", "op": "delete"}]))
    assert cli.run(["edit", "--scene", str(ds / "rec" / "gaussians"), "--script", str(script),
                    "--out", str(tmp_path / "ed")]) == 0
    assert not load_scene(tmp_path / "ed" / "gaussians").actors
    assert cli.run(["render", "--config", str(ds / "cfg.yaml"), "--scene", str(tmp_path / "ed" / "gaussians"),
                    "--out", str(tmp_path / "r"), "--mask", "--frames", "0,1,2"]) == 0
    for i in range(3):
        assert not read_mask(tmp_path / "r" / "renders" / f"{i:06d}_mask.png").any()


def test_edit_bad_script(ds, tmp_path):
    script = tmp_path / "e.json"
    script.write_text(json.dumps([{"actor": "nope", "op": "delete"}]))
    assert cli.run(["edit", "--scene", str(ds / "rec" / "gaussians"), "--script", str(script),
                    "--out", str(tmp_path / "ed")]) == cli.EXIT_CONFIG
    script.write_text("{not json")
    assert cli.run(["edit", "--scene", str(ds / "rec" / "gaussians"), "--script", str(script),
                    "--out", str(tmp_path / "ed")]) == cli.EXIT_CONFIG


def test_render_empty_scene(ds, tmp_path):
    from splat4d.compositor import SceneState
    from splat4d.dataset import save_scene
    from splat4d.gaussians import GaussianSet
    g = tmp_path / "empty"
    save_scene(SceneState(GaussianSet.empty()), g)
    assert cli.run(["render", "--config", str(ds / "cfg.yaml"), "--scene", str(g),
                    "--out", str(tmp_path / "r"), "--frames", "1"]) == 0
    assert read_image(tmp_path / "r" / "renders" / "000001.png").max() == 0
    assert read_image(tmp_path / "r" / "renders" / "000001_opacity.png").max() == 0


def test_metrics_self(ds, tmp_path, capsys):
    d = ds / "data" / "image"
    assert cli.run(["metrics", "--renders", str(d), "--gt", str(d), "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "metrics" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "frame,psnr,ssim" and rows[-1].startswith("mean,")
    for r in rows[1:]:
        _, p, s = r.split(",")
        assert float(p) == 99.0 and float(s) == 1.0


def test_metrics_size_mismatch(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    write_png8(tmp_path / "a" / "x.png", np.zeros((4, 4, 3)))
    write_png8(tmp_path / "b" / "x.png", np.zeros((5, 4, 3)))
    assert cli.run(["metrics", "--renders", str(tmp_path / "a"), "--gt", str(tmp_path / "b"),
                    "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_finetune_writes_curve(ds):
    out = ds / "ft"
    assert cli.run(["finetune", "--config", str(ds / "cfg.yaml"), "--scene", str(ds / "rec" / "gaussians"),
                    "--out", str(out)]) == 0
    lines = (out / "metrics" / "loss_curve.csv").read_text().splitlines()
    assert lines[0] == "step,total,rgb,mask,psnr" and len(lines) == 4
    assert load_scene(out / "gaussians").counts()["actors"] == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finetune_divergence_exit(ds, tmp_path):
    cfg = yaml.safe_load((ds / "cfg.yaml").read_text())
    cfg["data"] = str(ds / "data")
    cfg["finetune"] = {"steps": 300, "lr": 1e4, "densify": False}
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    rc = cli.run(["finetune", "--config", str(tmp_path / "c.yaml"), "--scene", str(ds / "rec" / "gaussians"),
                  "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_DIVERGED


def test_config_errors(ds, tmp_path):
    out = str(tmp_path / "o")
    assert cli.run(["reconstruct", "--config", str(tmp_path / "missing.yaml"), "--out", out]) == cli.EXIT_CONFIG
    (tmp_path / "c.yaml").write_text("recon: {voxel_size: -1}\n")
    assert cli.run(["reconstruct", "--config", str(tmp_path / "c.yaml"), "--out", out]) == cli.EXIT_CONFIG
    (tmp_path / "c.yaml").write_text("recon: {voxel_sise: 1}\n")
    assert cli.run(["reconstruct", "--config", str(tmp_path / "c.yaml"), "--out", out]) == cli.EXIT_CONFIG
    assert cli.run(["reconstruct", "--out", out]) == cli.EXIT_CONFIG  # no data
    assert cli.run(["frobnicate"]) == cli.EXIT_CONFIG


def test_data_errors(ds, tmp_path):
    bad = tmp_path / "data"
    shutil.copytree(ds / "data", bad)
    (bad / "depth" / "000001.pfm").write_bytes(b"XX\n")
    assert cli.run(["reconstruct", "--data", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA
    # a dataset path that does not exist is a config error
    assert cli.run(["reconstruct", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    (tmp_path / "w.bin").write_bytes(b"junk")
    assert cli.run(["reconstruct", "--data", str(ds / "data"), "--weights", str(tmp_path / "w.bin"),
                    "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_env_mirror(ds, tmp_path, monkeypatch):
    monkeypatch.setenv("SPLAT4D_OUT", str(tmp_path / "envout"))
    monkeypatch.setenv("SPLAT4D_SEED", "3")
    assert cli.run(["init-weights"]) == 0
    assert (tmp_path / "envout").exists()
    args = cli.build_parser().parse_args(["reconstruct"])
    assert args.out == str(tmp_path / "envout") and int(args.seed) == 3


def test_weights_file_round_trip(ds, tmp_path):
    w = tmp_path / "w.bin"
    assert cli.run(["init-weights", "--out", str(w), "--seed", "0"]) == 0
    assert cli.run(["reconstruct", "--config", str(ds / "cfg.yaml"), "--weights", str(w),
                    "--out", str(tmp_path / "o")]) == 0
    # seeded random weights and their saved form decode identically
    assert hash_tree(tmp_path / "o" / "gaussians") == hash_tree(ds / "rec" / "gaussians")
