"""Command-line entry points.

Every flag can also be given as an environment variable ``SPLAT4D_<FLAG>``
(``--threads`` -> ``SPLAT4D_THREADS``); command-line values win. The config
file is YAML, see :data:`DEFAULT_CONFIG` for the schema.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .actors import edit_actor
from .compositor import SceneState, render_composite, render_decomposed
from .dataset import (DataError, hash_tree, load_scene, load_scene_bundle, save_scene,
                      save_scene_bundle)
from .imageio import FileFormatError, read_image, write_mask
from .ingest import FEATURE_DIM, EmptySceneError, FeatureCloud, project_close_range_mask
from .losses import psnr, ssim
from .optim import DivergenceError, FinetuneConfig, finetune_scene
from .pipeline import ModelWeights, ReconConfig, StageError, reconstruct
from .rasterizer import RasterConfig, save_render
from .weights import WeightError

log = logging.getLogger("splat4d")

ENV_PREFIX = "SPLAT4D_"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
OUT_DIRS = ("gaussians", "renders", "metrics", "logs")

DEFAULT_CONFIG = {
    "data": None,  # dataset folder
    "weights": None,  # weight container; null -> seeded random weights
    "seed": 0,
    "threads": 1,
    "held_out": [],  # frame indices kept out of fine-tuning
    "recon": {
        "voxel_size": 0.1,
        "bounds": None,  # [[x, y, z], [x, y, z]]; null -> box around the first camera
        "recursion_depth": 2,
        "tau": 0.1,
        "visibility": "feature",  # or "depth"
        "sigma_d": 0.5,
        "depth_sigma": 0.2,
        "relative_depth_check": False,
        "sor_k": 20,
        "sor_ratio": 2.0,
        "knn_k": 3,
        "z_near": 80.0,
        "z_far": 10000.0,
        "far_scale": 0.5,
        "box_dilation": 0.05,
        "n_views": 3,
        "window": 3,
    },
    "finetune": {
        "steps": 1000,
        "lr": 1e-3,
        "lam_ssim": 0.2,
        "lam_mask": 0.1,
        "optimize_poses": True,
        "densify": True,
        "densify_interval": 100,
        "grad_threshold": 2e-4,
        "prune_opacity": 0.005,
    },
    "raster": {"tile_size": 16, "t_min": 1e-5},
}

_RANGES = {
    ("seed",): (0, None), ("threads",): (1, None),
    ("recon", "voxel_size"): (1e-6, None), ("recon", "recursion_depth"): (0, 100),
    ("recon", "tau"): (1e-9, None), ("recon", "sigma_d"): (1e-9, None),
    ("recon", "depth_sigma"): (0, None), ("recon", "sor_k"): (1, None),
    ("recon", "sor_ratio"): (0, None), ("recon", "knn_k"): (1, None),
    ("recon", "z_near"): (1e-6, None), ("recon", "far_scale"): (1e-3, 1),
    ("recon", "box_dilation"): (0, None), ("recon", "n_views"): (1, None), ("recon", "window"): (1, 99),
    ("finetune", "steps"): (0, None), ("finetune", "lr"): (0, None),
    ("finetune", "lam_ssim"): (0, 1), ("finetune", "lam_mask"): (0, None),
    ("finetune", "densify_interval"): (1, None), ("finetune", "prune_opacity"): (0, 1),
    ("raster", "tile_size"): (1, 256), ("raster", "t_min"): (0, 1),
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {'.'.join(path + (k,))!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {'.'.join(path + (k,))!r} must be a mapping")
            out[k] = _merge(base[k], v, path + (k,))
        else:
            out[k] = v
    return out


def validate_config(cfg: dict) -> dict:
    for path, (lo, hi) in _RANGES.items():
        v = cfg
        for k in path:
            v = v[k]
        name = ".".join(path)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{name} must be a number, got {v!r}")
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise ConfigError(f"{name}={v} outside [{lo}, {hi}]")
    if cfg["recon"]["window"] % 2 == 0:
        raise ConfigError("recon.window must be odd")
    if cfg["recon"]["z_far"] <= cfg["recon"]["z_near"]:
        raise ConfigError("recon.z_far must exceed recon.z_near")
    if cfg["recon"]["visibility"] not in ("feature", "depth"):
        raise ConfigError("recon.visibility must be 'feature' or 'depth'")
    b = cfg["recon"]["bounds"]
    if b is not None and np.shape(b) != (2, 3):
        raise ConfigError("recon.bounds must be [[x, y, z], [x, y, z]]")
    for key in ("data", "weights"):
        if cfg[key] is not None and not Path(cfg[key]).exists():
            raise ConfigError(f"{key} path {cfg[key]} does not exist")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    over = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            over = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        if not isinstance(over, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        base = p.parent
        for key in ("data", "weights"):
            if over.get(key) is not None and not Path(over[key]).is_absolute():
                over[key] = str(base / over[key])
    cfg = _merge(DEFAULT_CONFIG, over)
    if overrides:
        cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    return validate_config(cfg)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def recon_config(cfg: dict) -> ReconConfig:
    r = cfg["recon"]
    keep = {k: v for k, v in r.items() if k not in ("n_views", "window", "bounds")}
    bounds = None if r["bounds"] is None else tuple(tuple(map(float, b)) for b in r["bounds"])
    return ReconConfig(bounds=bounds, raster=raster_config(cfg), **keep)


def raster_config(cfg: dict) -> RasterConfig:
    return RasterConfig(tile_size=int(cfg["raster"]["tile_size"]), t_min=float(cfg["raster"]["t_min"]),
                        threads=int(cfg["threads"]))


def finetune_config(cfg: dict) -> FinetuneConfig:
    return FinetuneConfig(seed=int(cfg["seed"]), raster=raster_config(cfg), **cfg["finetune"])


def model_weights(cfg: dict) -> ModelWeights:
    if cfg["weights"] is not None:
        return ModelWeights.load(cfg["weights"])
    return ModelWeights.random(int(cfg["seed"]), cfg["recon"]["n_views"], cfg["recon"]["window"])


def _out_dirs(out) -> dict:
    out = Path(out)
    dirs = {d: out / d for d in OUT_DIRS}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _file_hashes(folder) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(folder).iterdir()) if p.is_file()}


def _require_data(cfg):
    if cfg["data"] is None:
        raise ConfigError("config key 'data' (dataset folder) is required")
    return load_scene_bundle(cfg["data"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_reconstruct(cfg: dict, out) -> dict:
    dirs = _out_dirs(out)
    frames, tracks = _require_data(cfg)
    weights = model_weights(cfg)
    t0 = time.perf_counter()
    rec = reconstruct(frames, tracks, weights, recon_config(cfg))
    total = time.perf_counter() - t0
    save_scene(rec.scene, dirs["gaussians"])
    counts = rec.scene.counts()
    manifest = {"command": "reconstruct", "config": cfg, "config_hash": config_hash(cfg),
                "input_hash": hash_tree(cfg["data"]),
                "weights_hash": (hashlib.sha256(Path(cfg["weights"]).read_bytes()).hexdigest()
                                 if cfg["weights"] else f"seeded:{cfg['seed']}"),
                "counts": counts, "files": _file_hashes(dirs["gaussians"])}
    _write_json(Path(out) / "manifest.json", manifest)
    # wall-clock numbers stay out of the manifest so reruns are byte-identical
    _write_json(dirs["logs"] / "timings.json", {**rec.timings, "total": total})
    return manifest


def _cameras(cfg, frame_ids):
    frames, _ = _require_data(cfg)
    ids = range(len(frames)) if not frame_ids else frame_ids
    for i in ids:
        if not 0 <= i < len(frames):
            raise DataError(f"frame {i} out of range (dataset has {len(frames)})")
    return [(i, frames[i]) for i in ids]


def cmd_render(cfg: dict, scene_dir, out, frame_ids=None, t=None, decompose=False, mask=False) -> list:
    dirs = _out_dirs(out)
    scene = load_scene(scene_dir)
    rc = raster_config(cfg)
    written = []
    for i, fr in _cameras(cfg, frame_ids):
        ts = fr.timestamp if t is None else t
        stem = dirs["renders"] / f"{i:06d}"
        written.append(save_render(render_composite(scene, fr.camera, ts, rc), stem))
        if decompose or mask:
            parts = render_decomposed(scene, fr.camera, ts, rc)
            if decompose:
                for key, suffix in (("close_range", "_cr"), ("dynamic", "_dyn"), ("far_field", "_far")):
                    save_render(parts[key], f"{stem}{suffix}")
            if mask:
                write_mask(f"{stem}_mask.png", parts["mask"])
    return written


def cmd_finetune(cfg: dict, scene_dir, out, steps=None) -> dict:
    dirs = _out_dirs(out)
    scene = load_scene(scene_dir)
    frames, _ = _require_data(cfg)
    held = set(cfg["held_out"])
    train = [f for i, f in enumerate(frames) if i not in held]
    fc = finetune_config(cfg)
    if steps is not None:
        fc.steps = int(steps)
    masks = None
    if fc.lam_mask > 0:
        # supervision from the close-range point set, as at reconstruction time
        pts = FeatureCloud(scene.close_range.means, np.zeros((len(scene.close_range), FEATURE_DIM)),
                           np.zeros(len(scene.close_range)))
        masks = [project_close_range_mask(pts, f.camera) for f in train]
    t0 = time.perf_counter()
    res = finetune_scene(scene, train, fc, masks, csv_path=dirs["metrics"] / "loss_curve.csv")
    save_scene(res.scene, dirs["gaussians"])
    _write_json(dirs["logs"] / "finetune.json", {"seconds": time.perf_counter() - t0,
                                                "densify": res.densify})
    manifest = {"command": "finetune", "config": cfg, "config_hash": config_hash(cfg),
                "input_hash": hash_tree(scene_dir), "steps": fc.steps,
                "counts": res.scene.counts(), "files": _file_hashes(dirs["gaussians"])}
    _write_json(Path(out) / "manifest.json", manifest)
    return manifest


def load_edit_script(path) -> list:
    try:
        ops = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"edit script {path}: {exc}") from None
    if not isinstance(ops, list) or not all(isinstance(o, dict) and "actor" in o and "op" in o for o in ops):
        raise ConfigError(f"edit script {path}: expected a JSON array of {{actor, op, ...}} objects")
    return ops


def apply_edits(scene: SceneState, ops: list) -> SceneState:
    for op in ops:
        edit = {k: v for k, v in op.items() if k != "actor"}
        ids = [a.actor_id for a in scene.actors] if op["actor"] == "*" else [op["actor"]]
        for aid in ids:
            try:
                scene = edit_actor(scene, aid, edit)
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"edit {op}: {exc}") from None
    return scene


def cmd_edit(scene_dir, script, out) -> dict:
    dirs = _out_dirs(out)
    scene = apply_edits(load_scene(scene_dir), load_edit_script(script))
    return save_scene(scene, dirs["gaussians"])


def cmd_metrics(render_dir, gt_dir, out) -> list:
    dirs = _out_dirs(out)
    render_dir, gt_dir = Path(render_dir), Path(gt_dir)
    rows = []
    for p in sorted(render_dir.glob("*.png")):
        if p.stem.endswith(("_opacity", "_depth", "_mask", "_cr", "_dyn", "_far")):
            continue
        g = gt_dir / p.name
        if not g.exists():
            raise DataError(f"missing ground truth {g}")
        a, b = read_image(p), read_image(g)
        if a.shape != b.shape:
            raise DataError(f"{p.name}: size {a.shape[:2]} vs ground truth {b.shape[:2]}")
        rows.append({"frame": p.stem, "psnr": psnr(a, b), "ssim": ssim(a, b)})
    if not rows:
        raise DataError(f"no renders found in {render_dir}")
    rows.append({"frame": "mean", "psnr": float(np.mean([r["psnr"] for r in rows])),
                 "ssim": float(np.mean([r["ssim"] for r in rows]))})
    with open(dirs["metrics"] / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["frame", "psnr", "ssim"])
        w.writeheader()
        for r in rows:
            w.writerow({"frame": r["frame"], "psnr": f"{r['psnr']:.6f}", "ssim": f"{r['ssim']:.6f}"})
    return rows


def cmd_synthetic(out, n_frames=8, seed=0, with_car=True) -> None:
    from .synthetic import make_synthetic_scene
    sc = make_synthetic_scene(n_frames=n_frames, seed=seed, with_car=with_car)
    save_scene_bundle(out, sc.frames, sc.tracks)


def cmd_init_weights(out, seed=0, n_views=3, window=3) -> None:
    ModelWeights.random(seed, n_views, window).save(out)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _env_default(flag: str, default=None):
    return os.environ.get(ENV_PREFIX + flag.upper().replace("-", "_"), default)


def _int_list(s):
    if s is None or s == "":
        return None
    return [int(x) for x in str(s).split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splat4d", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default=_env_default("log-level", "INFO"))
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", default=_env_default("config"))
        sp.add_argument("--out", default=_env_default("out"), required=_env_default("out") is None)
        sp.add_argument("--threads", type=int, default=_env_default("threads"))
        sp.add_argument("--seed", type=int, default=_env_default("seed"))
        if data:
            sp.add_argument("--data", default=_env_default("data"))
            sp.add_argument("--weights", default=_env_default("weights"))

    common(sub.add_parser("reconstruct", help="feed-forward reconstruction of a dataset folder"))
    sp = sub.add_parser("render", help="render a scene at dataset cameras")
    common(sp)
    sp.add_argument("--scene", default=_env_default("scene"), required=_env_default("scene") is None)
    sp.add_argument("--frames", default=_env_default("frames"), help="comma-separated frame indices")
    sp.add_argument("--time", type=float, default=_env_default("time"))
    sp.add_argument("--decompose", action="store_true", default=bool(_env_default("decompose")))
    sp.add_argument("--mask", action="store_true", default=bool(_env_default("mask")))
    sp = sub.add_parser("finetune", help="per-scene optimization")
    common(sp)
    sp.add_argument("--scene", default=_env_default("scene"), required=_env_default("scene") is None)
    sp.add_argument("--steps", type=int, default=_env_default("steps"))
    sp = sub.add_parser("edit", help="apply a JSON edit script")
    common(sp, data=False)
    sp.add_argument("--scene", default=_env_default("scene"), required=_env_default("scene") is None)
    sp.add_argument("--script", default=_env_default("script"), required=_env_default("script") is None)
    sp = sub.add_parser("metrics", help="PSNR/SSIM of renders against ground truth")
    common(sp, data=False)
    sp.add_argument("--renders", default=_env_default("renders"), required=_env_default("renders") is None)
    sp.add_argument("--gt", default=_env_default("gt"), required=_env_default("gt") is None)
    sp = sub.add_parser("synthetic", help="write the procedural street scene as a dataset folder")
    sp.add_argument("--out", default=_env_default("out"), required=_env_default("out") is None)
    sp.add_argument("--frames", type=int, default=int(_env_default("frames", 8)))
    sp.add_argument("--seed", type=int, default=int(_env_default("seed", 0)))
    sp.add_argument("--static", action="store_true", help="no moving car")
    sp = sub.add_parser("init-weights", help="write seeded random weights")
    sp.add_argument("--out", default=_env_default("out"), required=_env_default("out") is None)
    sp.add_argument("--seed", type=int, default=int(_env_default("seed", 0)))
    sp.add_argument("--views", type=int, default=3)
    sp.add_argument("--window", type=int, default=3)
    return p


def _overrides(args) -> dict:
    o = {}
    for key in ("data", "weights", "threads", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            o[key] = int(v) if key in ("threads", "seed") else v
    return o


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=str(args.log_level).upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synthetic":
            cmd_synthetic(args.out, args.frames, args.seed, not args.static)
        elif args.command == "init-weights":
            cmd_init_weights(args.out, args.seed, args.views, args.window)
        else:
            cfg = load_config(args.config, _overrides(args))
            if args.command == "reconstruct":
                m = cmd_reconstruct(cfg, args.out)
                log.info("reconstructed %s", m["counts"])
            elif args.command == "render":
                cmd_render(cfg, args.scene, args.out, _int_list(args.frames), args.time,
                           args.decompose, args.mask)
            elif args.command == "finetune":
                cmd_finetune(cfg, args.scene, args.out, args.steps)
            elif args.command == "edit":
                cmd_edit(args.scene, args.script, args.out)
            elif args.command == "metrics":
                for r in cmd_metrics(args.renders, args.gt, args.out):
                    print(f"{r['frame']},{r['psnr']:.4f},{r['ssim']:.6f}")
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except (DataError, FileFormatError, WeightError, EmptySceneError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
