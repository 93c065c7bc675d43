"""Exhaustive reference renderer used to check the tile rasterizer.

Every Gaussian is visited for every pixel in depth order; there is no tiling
and no early termination. Only the screen-space footprint (projection,
3-sigma circle) and the SH shading are shared with the fast path.
"""

from __future__ import annotations

import numpy as np

from .gaussians import GaussianSet, eval_sh, project_gaussians
from .geometry import CameraFrame, pixel_centers
from .rasterizer import RasterConfig, RenderTarget


def rasterize_oracle(g: GaussianSet, cam: CameraFrame, cfg: RasterConfig = RasterConfig()) -> RenderTarget:
    H, W = cam.height, cam.width
    out = RenderTarget.blank(H, W)
    if len(g) == 0:
        return out
    proj = project_gaussians(g, cam, cfg.dilation, cfg.near)
    colors = eval_sh(np.nan_to_num(g.sh), proj.dirs)
    pix = pixel_centers(W, H)
    trans = np.ones((H, W))
    color = np.zeros((H, W, 3))
    acc = np.zeros((H, W))
    depth = np.zeros((H, W))
    count = np.zeros((H, W), dtype=np.int64)
    visible = [i for i in range(len(g)) if proj.valid[i]]
    visible.sort(key=lambda i: (proj.depths[i], i))
    for i in visible:
        d = pix - proj.centers[i]
        a, b, c = proj.conics[i]
        quad = a * d[..., 0] ** 2 + 2 * b * d[..., 0] * d[..., 1] + c * d[..., 1] ** 2
        inside = (d ** 2).sum(-1) <= proj.radii[i] ** 2
        alpha = np.where(inside, g.opacities[i] * np.exp(-0.5 * quad), 0.0)
        wgt = alpha * trans
        color += wgt[..., None] * colors[i]
        acc += wgt
        depth += wgt * proj.depths[i]
        count += inside
        trans = trans * (1.0 - alpha)
    out.color, out.opacity, out.count = color, acc, count
    out.depth = np.where(acc > 0, depth / np.where(acc > 0, acc, 1.0), 0.0)
    return out
