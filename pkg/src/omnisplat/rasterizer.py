"""Tile-binned forward rasterization of projected Gaussians into ERP images.

Pixels are composited front to back. A splat contributes to a pixel only
inside its 3-sigma ellipse; ``alpha`` is clamped to 0.99 and a pixel stops
once its transmittance drops below 1e-4. Splats whose 3-sigma box crosses
the azimuth seam are duplicated with their mean shifted by multiples of W.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from omnisplat.core import CameraPose, ErpImage, GaussianCloud, Splat2D
from omnisplat.projection import EXTENT_SIGMAS, ProjectedCloud, cull, project_cloud

# TBB builds shipped with some distros are too old for numba; prefer OpenMP
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

ALPHA_MAX = 0.99
T_MIN = 1e-4
CUTOFF_D2 = EXTENT_SIGMAS**2
MAX_WRAPS = 4
TILE_SIZE = 16
NEAR = 0.01
FAR = 1000.0

__all__ = [
    "RenderResult",
    "TileBins",
    "bin_splats",
    "composite_pixel",
    "cull",
    "eval_splat",
    "render",
    "render_reference",
    "seam_copies",
]


def eval_splat(splat: Splat2D, x) -> float:
    """Unnormalized Gaussian footprint, 1 at the splat center."""
    d = np.asarray(x, dtype=float) - splat.pixel_mean
    return float(np.exp(-0.5 * d @ splat.cov2d_inv @ d))


def composite_pixel(splats, x):
    """Front-to-back blend of depth-sorted splats at pixel position ``x``.

    Returns (rgb, final transmittance). Applies the same cutoff, alpha clamp
    and early exit as the tiled renderer.
    """
    rgb = np.zeros(3)
    T = 1.0
    for s in splats:
        d = np.asarray(x, dtype=float) - s.pixel_mean
        if d @ s.cov2d_inv @ d > CUTOFF_D2:
            continue
        alpha = min(ALPHA_MAX, s.opacity * eval_splat(s, x))
        rgb += np.asarray(s.color) * alpha * T
        T *= 1.0 - alpha
        if T < T_MIN:
            break
    return rgb, T


def seam_copies(mean_x, radius, width, max_wraps=MAX_WRAPS):
    """Horizontal copies of each splat needed to cover the wrap-around.

    Returns (source row, x offset) for every copy whose 3-sigma box meets
    [0, W]; offsets are multiples of W, at most ``max_wraps`` away.
    """
    ok = np.isfinite(radius) & np.isfinite(mean_x)
    lo = np.where(ok, np.ceil((-mean_x - radius) / width), 0)
    hi = np.where(ok, np.floor((width - mean_x + radius) / width), -1)
    lo = np.clip(lo, -max_wraps, max_wraps + 1).astype(np.int64)
    hi = np.clip(hi, -max_wraps - 1, max_wraps).astype(np.int64)
    count = np.maximum(hi - lo + 1, 0)
    src = np.repeat(np.arange(len(mean_x)), count)
    first = np.repeat(np.cumsum(count) - count, count)
    k = np.repeat(lo, count) + (np.arange(len(src)) - first)
    return src, k * width


@dataclass
class TileBins:
    """Per-tile splat lists, sorted by depth with index tie-break.

    Tile ``i`` owns entries ``ranges[i]:ranges[i + 1]`` of ``entry_copy``.
    """

    tile_size: int
    tiles_x: int
    tiles_y: int
    ranges: np.ndarray
    entry_copy: np.ndarray


def bin_splats(mean, radius, depth, order_key, height, width, tile_size=TILE_SIZE) -> TileBins:
    """Assign splat copies to every tile their padded 3-sigma box touches."""
    ntx = -(-width // tile_size)
    nty = -(-height // tile_size)
    pad = radius + 1.0
    x0 = np.clip(np.floor((mean[:, 0] - pad) / tile_size), 0, ntx - 1).astype(np.int64)
    x1 = np.clip(np.floor((mean[:, 0] + pad) / tile_size), -1, ntx - 1).astype(np.int64)
    y0 = np.clip(np.floor((mean[:, 1] - pad) / tile_size), 0, nty - 1).astype(np.int64)
    y1 = np.clip(np.floor((mean[:, 1] + pad) / tile_size), -1, nty - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    count = nx * ny
    copy = np.repeat(np.arange(len(mean)), count)
    local = np.arange(len(copy)) - np.repeat(np.cumsum(count) - count, count)
    nxr = np.repeat(nx, count)
    tile = (np.repeat(y0, count) + local // np.maximum(nxr, 1)) * ntx + np.repeat(x0, count) + local % np.maximum(nxr, 1)
    order = np.lexsort((order_key[copy], depth[copy], tile))
    tile = tile[order]
    ranges = np.searchsorted(tile, np.arange(ntx * nty + 1)).astype(np.int64)
    return TileBins(tile_size, ntx, nty, ranges, copy[order].astype(np.int64))


@numba.njit(parallel=True, cache=True)
def _forward_tiles(ranges, entry, mean, conic, opac, color, height, width, ts, ntx, image, t_final, n_contrib, n_hit):
    ntiles = len(ranges) - 1
    for tile in numba.prange(ntiles):
        ty = tile // ntx
        tx = tile % ntx
        start = ranges[tile]
        end = ranges[tile + 1]
        for py in range(ty * ts, min((ty + 1) * ts, height)):
            for px in range(tx * ts, min((tx + 1) * ts, width)):
                x = px + 0.5
                y = py + 0.5
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                last = start
                hits = 0
                for e in range(start, end):
                    s = entry[e]
                    last = e + 1
                    dx = x - mean[s, 0]
                    dy = y - mean[s, 1]
                    d2 = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
                    if d2 > 9.0:
                        continue
                    alpha = min(0.99, opac[s] * np.exp(-0.5 * d2))
                    hits += 1
                    w = alpha * T
                    cr += color[s, 0] * w
                    cg += color[s, 1] * w
                    cb += color[s, 2] * w
                    T *= 1.0 - alpha
                    if T < 1e-4:
                        break
                image[py, px, 0] = cr
                image[py, px, 1] = cg
                image[py, px, 2] = cb
                t_final[py, px] = T
                n_contrib[py, px] = last
                n_hit[py, px] = hits


@dataclass
class RenderResult:
    """Rendered image plus everything the backward pass re-traverses."""

    image: np.ndarray
    transmittance: np.ndarray
    n_contrib: np.ndarray
    n_hit: np.ndarray
    projected: ProjectedCloud
    copy_src: np.ndarray
    copy_mean: np.ndarray
    bins: TileBins

    @property
    def erp(self) -> ErpImage:
        return ErpImage(self.image, self.transmittance)


def packed_conic(projected: ProjectedCloud) -> np.ndarray:
    c = projected.conic
    return np.stack([c[:, 0, 0], c[:, 0, 1], c[:, 1, 1]], axis=1)


def render(
    cloud: GaussianCloud, camera: CameraPose, near=NEAR, far=FAR, tile_size=TILE_SIZE, background=None
) -> RenderResult:
    """Render ``cloud`` into an ERP image for ``camera``.

    The image dtype follows the cloud's dtype. Background is black.
    """
    if background is not None and np.any(background):
        raise NotImplementedError("only a black background is supported")
    cloud.check_finite()
    dtype = cloud.dtype
    H, W = camera.height, camera.width
    proj = project_cloud(cloud, camera, near, far)

    src, offset = seam_copies(proj.mean2d[:, 0], proj.radius, W)
    copy_mean = proj.mean2d[src].copy()
    copy_mean[:, 0] += offset.astype(dtype)
    # tie-break by cloud index, then by copy
    order_key = proj.index[src] * (2 * MAX_WRAPS + 1) + (offset // W + MAX_WRAPS)
    bins = bin_splats(copy_mean, proj.radius[src], proj.depth[src], order_key, H, W, tile_size)

    image = np.zeros((H, W, 3), dtype)
    t_final = np.ones((H, W), dtype)
    n_contrib = np.zeros((H, W), np.int64)
    n_hit = np.zeros((H, W), np.int64)
    if len(bins.entry_copy):
        conic = packed_conic(proj)[src]
        _forward_tiles(
            bins.ranges,
            bins.entry_copy,
            copy_mean,
            np.ascontiguousarray(conic),
            np.ascontiguousarray(proj.opacity[src]),
            np.ascontiguousarray(proj.color[src]),
            H,
            W,
            tile_size,
            bins.tiles_x,
            image,
            t_final,
            n_contrib,
            n_hit,
        )
    return RenderResult(image, t_final, n_contrib, n_hit, proj, src, copy_mean, bins)


def render_reference(cloud: GaussianCloud, camera: CameraPose, near=NEAR, far=FAR):
    """Brute-force renderer: every pixel against every splat, no tiling.

    Uses the same per-pixel cutoff, clamps, early exit and wrap-around copies
    as ``render`` but none of its binning or kernels. Returns (image, T).
    """
    cloud.check_finite()
    H, W = camera.height, camera.width
    proj = project_cloud(cloud, camera, near, far)
    ys, xs = np.mgrid[0:H, 0:W]
    xs = xs + 0.5
    ys = ys + 0.5
    image = np.zeros((H, W, 3), np.float64)
    T = np.ones((H, W), np.float64)
    live = np.ones((H, W), bool)
    order = np.lexsort((proj.index, proj.depth))
    for k in order:
        inv = proj.conic[k].astype(np.float64)
        mx, my = proj.mean2d[k].astype(np.float64)
        for wrap in range(-MAX_WRAPS, MAX_WRAPS + 1):
            dx = xs - (mx + wrap * W)
            dy = ys - my
            d2 = inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
            hit = live & (d2 <= CUTOFF_D2)
            if not hit.any():
                continue
            alpha = np.minimum(ALPHA_MAX, float(proj.opacity[k]) * np.exp(-0.5 * d2))
            alpha = np.where(hit, alpha, 0.0)
            image += (alpha * T)[..., None] * proj.color[k].astype(np.float64)
            T = T * (1.0 - alpha)
            live &= ~(hit & (T < T_MIN))
    return image, T
