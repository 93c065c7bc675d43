"""Per-scene fine-tuning of Gaussian attributes and actor box poses."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .actors import CanonicalActor, DynamicActor
from .compositor import SceneState, composite
from .gaussians import GaussianSet, normalize_quats
from .geometry import RigidPose, quat_from_axis_angle, quat_multiply, quat_to_rotmat
from .losses import LAMBDA_MASK, LAMBDA_SSIM, LossReport, mask_loss, photometric_loss, psnr
from .rasterizer import RasterConfig, rasterize, rasterize_backward
from .volume import sigmoid

log = logging.getLogger(__name__)

# per-attribute multipliers on the base learning rate (vanilla splatting ratios)
LR_MULT = {"means": 0.16, "sh": 2.5, "logit": 50.0, "logscale": 5.0, "quats": 1.0,
           "pose_t": 5.0, "pose_r": 1.0}
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float, initial: float):
        self.step, self.loss, self.initial = step, loss, initial
        super().__init__(f"loss diverged at step {step}: {loss:.4g} vs initial {initial:.4g}")


@dataclass
class FinetuneConfig:
    steps: int = 1000
    lr: float = 1e-3
    lam_ssim: float = LAMBDA_SSIM
    lam_mask: float = LAMBDA_MASK
    lr_mult: dict = field(default_factory=lambda: dict(LR_MULT))
    optimize_poses: bool = True
    optimize_gaussians: bool = True
    densify: bool = True
    densify_from: int = 100
    densify_until: float = 0.5  # fraction of steps
    densify_interval: int = 100
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    seed: int = 0
    raster: RasterConfig = field(default_factory=RasterConfig)


def _logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p) - np.log1p(-p)


def quat_left_matrix(q: np.ndarray) -> np.ndarray:
    """L(q) with ``q ⊗ p = L(q) p``."""
    w, x, y, z = q
    return np.array([[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]])


class _Block:
    """Optimizable copy of one GaussianSet with Adam moments."""

    KEYS = ("means", "logit", "logscale", "quats", "sh")

    def __init__(self, g: GaussianSet):
        self.tags = g.tags.copy()
        self.p = {"means": g.means.copy(), "logit": _logit(g.opacities), "logscale": np.log(g.scales),
                  "quats": normalize_quats(g.quats), "sh": g.sh.copy()}
        self.m = {k: np.zeros_like(v) for k, v in self.p.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.p.items()}
        self.reset_stats()

    def __len__(self):
        return len(self.p["means"])

    def finite(self) -> bool:
        # exp(logscale) must not overflow either
        return (all(np.isfinite(v).all() for v in self.p.values())
                and bool(np.all(self.p["logscale"] < 700)))

    def reset_stats(self):
        self.grad_accum = np.zeros(len(self))
        self.denom = np.zeros(len(self))

    def gaussians(self) -> GaussianSet:
        return GaussianSet(self.p["means"], sigmoid(self.p["logit"]), self.p["quats"],
                           np.exp(self.p["logscale"]), self.p["sh"], self.tags)

    def grads_from(self, gr, g: GaussianSet) -> dict:
        return {"means": gr.d_mean, "logit": gr.d_opacity * g.opacities * (1 - g.opacities),
                "logscale": gr.d_scale * g.scales, "quats": gr.d_quaternion, "sh": gr.d_sh}

    def remap(self, g: GaussianSet, parent: np.ndarray, is_new: np.ndarray):
        self.tags = g.tags.copy()
        self.p = {"means": g.means.copy(), "logit": _logit(g.opacities), "logscale": np.log(g.scales),
                  "quats": normalize_quats(g.quats), "sh": g.sh.copy()}
        for store in (self.m, self.v):
            for k in self.KEYS:
                a = store[k][parent]
                a[is_new] = 0.0
                store[k] = a
        self.reset_stats()


class Adam:
    def __init__(self, betas=ADAM_BETAS, eps=ADAM_EPS):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0

    def tick(self):
        self.t += 1

    def delta(self, m, v, g, lr):
        """Update moments in place and return the parameter increment."""
        m *= self.b1
        m += (1 - self.b1) * g
        v *= self.b2
        v += (1 - self.b2) * g * g
        mh = m / (1 - self.b1 ** self.t)
        vh = v / (1 - self.b2 ** self.t)
        return -lr * mh / (np.sqrt(vh) + self.eps)


def scene_extent(frames) -> float:
    c = np.stack([f.camera.center for f in frames])
    return max(1.1 * float(np.linalg.norm(c - c.mean(0), axis=1).max()), 1.0)


# ---------------------------------------------------------------------------
# densification
# ---------------------------------------------------------------------------

@dataclass
class DensifyReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0


def densify_and_prune(g: GaussianSet, grad_avg: np.ndarray, extent: float,
                      grad_threshold: float = 2e-4, percent_dense: float = 0.01,
                      prune_opacity: float = 0.005, rng: np.random.Generator | None = None):
    """Clone small / split large high-gradient Gaussians, then prune faint ones.

    Returns ``(new set, parent index per output, is_new flag per output, report)``.
    """
    rng = rng or np.random.default_rng(0)
    n = len(g)
    rep = DensifyReport()
    hot = np.asarray(grad_avg) >= grad_threshold
    big = g.scales.max(1) > percent_dense * extent
    clone = np.nonzero(hot & ~big)[0]
    split = np.nonzero(hot & big)[0]
    rep.cloned, rep.split = len(clone), len(split)

    keep = np.ones(n, bool)
    keep[split] = False
    parts = [g.subset(np.arange(n)), g.subset(clone)]
    parents = [np.arange(n), clone]
    fresh = [np.zeros(n, bool), np.ones(len(clone), bool)]
    if len(split):
        src = np.repeat(split, 2)
        R = quat_to_rotmat(normalize_quats(g.quats[src]))
        local = rng.normal(size=(len(src), 3)) * g.scales[src]
        child = g.subset(src)
        child.means = child.means + np.einsum("nij,nj->ni", R, local)
        child.scales = child.scales / 1.6
        parts.append(child)
        parents.append(src)
        fresh.append(np.ones(len(src), bool))
    out = GaussianSet.concat(parts)
    parent = np.concatenate(parents)
    is_new = np.concatenate(fresh)
    alive = np.concatenate([keep, np.ones(len(out) - n, bool)]) & (out.opacities >= prune_opacity)
    rep.pruned = int(np.count_nonzero(~alive[:n] & keep)) + int(np.count_nonzero(~alive[n:]))
    out = out.subset(alive)
    return out, parent[alive], is_new[alive], rep


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    scene: SceneState
    curve: list  # dicts: step, frame, total, rgb, mask, psnr
    densify: list


class _PoseState:
    def __init__(self, pose: RigidPose):
        self.pose = pose
        self.m = np.zeros(6)
        self.v = np.zeros(6)


def _pose_grads(world: GaussianSet, gr, pose: RigidPose):
    """Gradient w.r.t. a world-axis twist (translation, rotation about the box
    center) applied on the left of ``pose``."""
    gx = gr.d_mean
    dv = gx.sum(0)
    dw = np.cross(world.means - pose.translation, gx).sum(0)
    q = world.quats
    for i in range(3):
        e = np.zeros(4)
        e[i + 1] = 1.0
        dq = 0.5 * quat_multiply(np.broadcast_to(e, q.shape), q)
        dw[i] += (gr.d_quaternion * dq).sum()
    return np.concatenate([dv, dw])


def finetune_scene(scene: SceneState, frames, cfg: FinetuneConfig = FinetuneConfig(),
                   close_masks=None, csv_path=None) -> FinetuneResult:
    if not frames:
        raise ValueError("fine-tuning needs at least one frame")
    if cfg.steps == 0:
        return FinetuneResult(scene, [], [])
    rng = np.random.default_rng(cfg.seed)
    extent = scene_extent(frames)
    lr = {k: cfg.lr * m for k, m in cfg.lr_mult.items()}
    lr["means"] *= extent
    cr, far = _Block(scene.close_range), _Block(scene.far_field)
    dyn = [_Block(a.gaussians) for a in scene.actors]
    poses = [{t: _PoseState(p) for t, p in a.track.poses.items()} for a in scene.actors]
    blocks = [cr, far] + dyn
    adam = Adam()
    rc = cfg.raster
    curve, dens_reports = [], []
    initial, bad = None, 0
    perm = []
    until = int(cfg.densify_until * cfg.steps)

    for step in range(1, cfg.steps + 1):
        if not perm:
            perm = list(rng.permutation(len(frames)))
        fi = int(perm.pop())
        fr = frames[fi]
        cam, t = fr.camera, fr.timestamp
        g_cr, g_far = cr.gaussians(), far.gaussians()
        placed, active = [], []
        for ai, a in enumerate(scene.actors):
            if not a.track.covers(t):
                continue
            pose = poses[ai][t].pose if t in poses[ai] else a.track.pose_at(t)
            g_can = dyn[ai].gaussians()
            world = DynamicActor(a.canonical, g_can).placed(t, pose)
            placed.append(world)
            active.append((ai, pose, g_can, world))
        near = GaussianSet.concat([g_cr] + placed)
        rn = rasterize(near, cam, rc)
        rf = rasterize(g_far, cam, rc)
        out = composite(rn, rf)
        rgb, g_c, _ = photometric_loss(out.color, fr.image, cfg.lam_ssim)
        m_val, g_o = 0.0, None
        if close_masks is not None and cfg.lam_mask > 0:
            ro = rasterize(g_cr, cam, rc)
            m_val, g_o = mask_loss(ro.opacity, close_masks[fi])
        rep = LossReport.combine(rgb, m_val, cfg.lam_mask, cfg.lam_ssim)
        curve.append({"step": step, "frame": fi, "total": rep.total, "rgb": rep.rgb, "mask": rep.mask,
                      "psnr": psnr(out.color, fr.image)})
        if initial is None:
            initial = rep.total
        bad = bad + 1 if rep.total > cfg.divergence_factor * initial else 0
        if bad >= cfg.divergence_patience:
            raise DivergenceError(step, rep.total, initial)

        d_near_o = -(g_c * rf.color).sum(-1)
        gr_near = rasterize_backward(near, cam, rc, g_c, d_near_o)
        gr_far = rasterize_backward(g_far, cam, rc, (1 - rn.opacity)[..., None] * g_c)
        n_cr = len(g_cr)
        gr_cr = _slice_grads(gr_near, 0, n_cr)
        if g_o is not None:
            gr_cr += rasterize_backward(g_cr, cam, rc, np.zeros_like(g_c), cfg.lam_mask * g_o)

        adam.tick()
        updates = [(cr, g_cr, gr_cr), (far, g_far, gr_far)]
        off = n_cr
        for ai, pose, g_can, world in active:
            k = len(world)
            gw = _slice_grads(gr_near, off, off + k)
            off += k
            if cfg.optimize_poses and t in poses[ai]:
                ps = poses[ai][t]
                d = _pose_grads(world, gw, pose)
                inc = np.concatenate([adam.delta(ps.m[:3], ps.v[:3], d[:3], lr["pose_t"]),
                                      adam.delta(ps.m[3:], ps.v[3:], d[3:], lr["pose_r"])])
                ps.pose = RigidPose(quat_multiply(quat_from_axis_angle(inc[3:]), pose.rotation),
                                    pose.translation + inc[:3])
            # world -> canonical frame
            R = pose.rotmat
            gw.d_mean = gw.d_mean @ R
            gw.d_quaternion = gw.d_quaternion @ quat_left_matrix(pose.rotation)
            updates.append((dyn[ai], g_can, gw))

        W, H = cam.width, cam.height
        for blk, g, gr in updates:
            if not cfg.optimize_gaussians:
                continue
            grads = blk.grads_from(gr, g)
            for key in _Block.KEYS:
                blk.p[key] += adam.delta(blk.m[key], blk.v[key], grads[key], lr[_LR_KEY[key]])
            blk.p["quats"] = normalize_quats(blk.p["quats"])
            ndc = np.linalg.norm(gr.d_mean2d * np.array([W / 2, H / 2]), axis=1)
            vis = np.any(gr.d_mean2d != 0, axis=1)
            blk.grad_accum += np.where(vis, ndc, 0.0)
            blk.denom += vis
            if not blk.finite():
                raise DivergenceError(step, np.inf, initial)

        if (cfg.densify and cfg.optimize_gaussians and cfg.densify_from <= step < until
                and step % cfg.densify_interval == 0):
            for blk in blocks:
                avg = np.divide(blk.grad_accum, blk.denom, out=np.zeros(len(blk)), where=blk.denom > 0)
                g_new, parent, is_new, drep = densify_and_prune(
                    blk.gaussians(), avg, extent, cfg.grad_threshold, cfg.percent_dense, cfg.prune_opacity, rng)
                blk.remap(g_new, parent, is_new)
                dens_reports.append({"step": step, "cloned": drep.cloned, "split": drep.split,
                                     "pruned": drep.pruned, "count": len(g_new)})

    actors = []
    for ai, a in enumerate(scene.actors):
        track = a.track.with_poses({t: ps.pose for t, ps in poses[ai].items()})
        actors.append(DynamicActor(CanonicalActor(a.canonical.cloud, track), dyn[ai].gaussians()))
    new_scene = replace(scene, close_range=cr.gaussians(), far_field=far.gaussians(), actors=actors)
    if csv_path is not None:
        write_curve_csv(csv_path, curve)
    return FinetuneResult(new_scene, curve, dens_reports)


_LR_KEY = {"means": "means", "logit": "logit", "logscale": "logscale", "quats": "quats", "sh": "sh"}


def _slice_grads(gr, a: int, b: int):
    from .rasterizer import AttributeGradients
    return AttributeGradients(gr.d_mean[a:b].copy(), gr.d_opacity[a:b].copy(), gr.d_quaternion[a:b].copy(),
                              gr.d_scale[a:b].copy(), gr.d_sh[a:b].copy(), gr.d_mean2d[a:b].copy())


def write_curve_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "total", "rgb", "mask", "psnr"], extrasaction="ignore")
        w.writeheader()
        for row in curve:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})


def window_means(curve, window: int = 50, key: str = "total") -> np.ndarray:
    vals = np.array([r[key] for r in curve])
    n = len(vals) // window
    return vals[:n * window].reshape(n, window).mean(1)
