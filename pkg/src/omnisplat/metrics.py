"""PSNR and SSIM for images with values in [0, 1].

SSIM uses an 11x11 Gaussian window (sigma 1.5) over full windows only, and
is averaged over pixels and channels. ``ssim_with_grad`` also returns the
gradient with respect to the first image, for use in the training loss.
"""

import numba
import numpy as np

PSNR_CAP = 99.0
WINDOW = 11
SIGMA = 1.5
K1 = 0.01
K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB; identical images give PSNR_CAP."""
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10 * np.log10(1.0 / mse)))


def gaussian_window(size=WINDOW, sigma=SIGMA):
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


@numba.njit(cache=True)
def _filter(img, w):
    # separable correlation of (C, H, W) maps, full windows only
    n_ch, H, W = img.shape
    k = len(w)
    h = H - k + 1
    wd = W - k + 1
    tmp = np.zeros((h, W))
    out = np.zeros((n_ch, h, wd))
    for c in range(n_ch):
        tmp[:] = 0.0
        for i in range(h):
            for j in range(k):
                wj = w[j]
                for x in range(W):
                    tmp[i, x] += wj * img[c, i + j, x]
        for i in range(h):
            for x in range(wd):
                acc = 0.0
                for j in range(k):
                    acc += w[j] * tmp[i, x + j]
                out[c, i, x] = acc
    return out


@numba.njit(cache=True)
def _filter_adjoint(grad, w, H, W):
    n_ch, h, wd = grad.shape
    k = len(w)
    tmp = np.zeros((h, W))
    out = np.zeros((n_ch, H, W))
    for c in range(n_ch):
        tmp[:] = 0.0
        for i in range(h):
            for x in range(wd):
                g = grad[c, i, x]
                for j in range(k):
                    tmp[i, x + j] += w[j] * g
        for i in range(h):
            for j in range(k):
                wj = w[j]
                for x in range(W):
                    out[c, i + j, x] += wj * tmp[i, x]
    return out


@numba.njit(cache=True)
def _moment_stack(a, b):
    # (H, W, C) pair -> (5C, H, W): x, y, x^2, y^2, xy per channel
    H, W, n_ch = a.shape
    out = np.empty((5 * n_ch, H, W))
    for i in range(H):
        for j in range(W):
            for c in range(n_ch):
                x = a[i, j, c]
                y = b[i, j, c]
                out[c, i, j] = x
                out[n_ch + c, i, j] = y
                out[2 * n_ch + c, i, j] = x * x
                out[3 * n_ch + c, i, j] = y * y
                out[4 * n_ch + c, i, j] = x * y
    return out


@numba.njit(cache=True)
def _ssim_map(m, n_ch, c1, c2, need_grad):
    # filtered moments -> (sum of the SSIM map, its gradient w.r.t. the
    # filtered x, x^2 and xy maps, scaled by 1 / map size)
    _, h, w = m.shape
    size = n_ch * h * w
    grad = np.zeros((3 * n_ch, h, w)) if need_grad else np.zeros((0, h, w))
    total = 0.0
    for c in range(n_ch):
        for i in range(h):
            for j in range(w):
                mx = m[c, i, j]
                my = m[n_ch + c, i, j]
                sxx = m[2 * n_ch + c, i, j] - mx * mx
                syy = m[3 * n_ch + c, i, j] - my * my
                sxy = m[4 * n_ch + c, i, j] - mx * my
                A1 = 2 * mx * my + c1
                A2 = 2 * sxy + c2
                B1 = mx * mx + my * my + c1
                B2 = sxx + syy + c2
                S = (A1 * A2) / (B1 * B2)
                total += S
                if need_grad:
                    dS = S / size
                    # paired so identical inputs cancel to an exact zero
                    grad[c, i, j] = dS * ((2 * my / A1 - 2 * mx / B1) + (2 * mx / B2 - 2 * my / A2))
                    grad[n_ch + c, i, j] = -dS / B2
                    grad[2 * n_ch + c, i, j] = 2 * dS / A2
    return total, grad


@numba.njit(cache=True)
def _combine(back, a, b):
    H, W, n_ch = a.shape
    out = np.empty((H, W, n_ch))
    for i in range(H):
        for j in range(W):
            for c in range(n_ch):
                out[i, j, c] = back[c, i, j] + 2 * a[i, j, c] * back[n_ch + c, i, j] + b[i, j, c] * back[2 * n_ch + c, i, j]
    return out


def ssim_with_grad(a, b, need_grad=True):
    """Mean SSIM of ``a`` against ``b`` and its gradient w.r.t. ``a``."""
    a, b = _check_pair(a, b)
    shape = a.shape
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    H, W, n_ch = a.shape
    if H < WINDOW or W < WINDOW:
        raise ValueError(f"images must be at least {WINDOW}x{WINDOW} for SSIM")
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    w = gaussian_window()
    moments = _filter(_moment_stack(a, b), w)
    total, g = _ssim_map(moments, n_ch, K1**2, K2**2, need_grad)
    value = total / (n_ch * moments.shape[1] * moments.shape[2])
    if not need_grad:
        return value, None
    back = _filter_adjoint(g, w, H, W)
    return value, _combine(back, a, b).reshape(shape)


def ssim(a, b):
    """Structural similarity, in [-1, 1]."""
    return float(ssim_with_grad(a, b, need_grad=False)[0])
