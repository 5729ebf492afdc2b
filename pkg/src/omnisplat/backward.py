"""Analytic gradients of an image loss with respect to every Gaussian parameter.

Chain, per view: image gradient -> per-splat (pixel mean, inverse 2D
covariance, opacity, color), by back-to-front re-traversal of each pixel's
tile list; inverse covariance -> 2D covariance; 2D covariance -> T = J W and
the world covariance; T -> Jacobian -> camera-space position; position and
covariance -> world parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from omnisplat.core import CameraPose, GaussianCloud, InvalidParameterError, quaternion_to_rotation
from omnisplat.projection import POLE_CLAMP, jacobian_direct, to_spherical
from omnisplat.rasterizer import FAR, NEAR, RenderResult, packed_conic, render


@dataclass
class SplatGrads:
    """Gradients w.r.t. projected quantities, one row per visible Gaussian.

    ``conic`` holds (d/da, d/db, d/dc) for the inverse covariance
    [[a, b], [b, c]], with b treated as a single shared parameter.
    """

    mean2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    color: np.ndarray

    def cov2d(self, conic_matrix: np.ndarray) -> np.ndarray:
        """Symmetric matrix gradient w.r.t. the (dilated) 2D covariance."""
        G = np.empty(conic_matrix.shape)
        G[:, 0, 0] = self.conic[:, 0]
        G[:, 0, 1] = G[:, 1, 0] = 0.5 * self.conic[:, 1]
        G[:, 1, 1] = self.conic[:, 2]
        out = -conic_matrix @ G @ conic_matrix
        return 0.5 * (out + np.swapaxes(out, -1, -2))


@dataclass
class GradBuffers:
    """Per-Gaussian parameter gradients for one or more views.

    ``screen_grad`` is the norm of the pixel-mean gradient in normalized
    image units (pixels scaled by W/2 and H/2); ``visible`` marks Gaussians
    that touched at least one tile and ``elevation`` their camera-relative
    elevation (NaN elsewhere).
    """

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    raw_opacities: np.ndarray
    colors: np.ndarray
    screen_grad: np.ndarray
    visible: np.ndarray
    elevation: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> GradBuffers:
        return cls(
            means=np.zeros((n, 3)),
            rotations=np.zeros((n, 4)),
            log_scales=np.zeros((n, 3)),
            raw_opacities=np.zeros(n),
            colors=np.zeros((n, 3)),
            screen_grad=np.zeros(n),
            visible=np.zeros(n, bool),
            elevation=np.full(n, np.nan),
        )

    def param(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def __add__(self, other: GradBuffers) -> GradBuffers:
        return GradBuffers(
            means=self.means + other.means,
            rotations=self.rotations + other.rotations,
            log_scales=self.log_scales + other.log_scales,
            raw_opacities=self.raw_opacities + other.raw_opacities,
            colors=self.colors + other.colors,
            screen_grad=self.screen_grad + other.screen_grad,
            visible=self.visible | other.visible,
            elevation=np.full(len(self.visible), np.nan),
        )


@numba.njit(parallel=True, cache=True)
def _backward_tiles(ranges, entry, mean, conic, opac, color, height, width, ts, ntx, t_final, n_contrib, dimg, egrad):
    ntiles = len(ranges) - 1
    for tile in numba.prange(ntiles):
        ty = tile // ntx
        tx = tile % ntx
        start = ranges[tile]
        for py in range(ty * ts, min((ty + 1) * ts, height)):
            for px in range(tx * ts, min((tx + 1) * ts, width)):
                x = px + 0.5
                y = py + 0.5
                T = t_final[py, px] * 1.0
                gr = dimg[py, px, 0] * 1.0
                gg = dimg[py, px, 1] * 1.0
                gb = dimg[py, px, 2] * 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                last_alpha = 0.0
                last_r = 0.0
                last_g = 0.0
                last_b = 0.0
                for e in range(n_contrib[py, px] - 1, start - 1, -1):
                    s = entry[e]
                    dx = x - mean[s, 0]
                    dy = y - mean[s, 1]
                    ca = conic[s, 0]
                    cb = conic[s, 1]
                    cc = conic[s, 2]
                    d2 = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if d2 > 9.0:
                        continue
                    g = np.exp(-0.5 * d2)
                    raw_alpha = opac[s] * g
                    alpha = min(0.99, raw_alpha)
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    egrad[e, 6] += w * gr
                    egrad[e, 7] += w * gg
                    egrad[e, 8] += w * gb
                    acc_r = last_alpha * last_r + (1.0 - last_alpha) * acc_r
                    acc_g = last_alpha * last_g + (1.0 - last_alpha) * acc_g
                    acc_b = last_alpha * last_b + (1.0 - last_alpha) * acc_b
                    last_alpha = alpha
                    last_r = color[s, 0]
                    last_g = color[s, 1]
                    last_b = color[s, 2]
                    dl_dalpha = T * ((last_r - acc_r) * gr + (last_g - acc_g) * gg + (last_b - acc_b) * gb)
                    if raw_alpha < 0.99:
                        egrad[e, 5] += g * dl_dalpha
                        dl_dg = opac[s] * dl_dalpha * g
                        egrad[e, 0] += dl_dg * (ca * dx + cb * dy)
                        egrad[e, 1] += dl_dg * (cb * dx + cc * dy)
                        egrad[e, 2] += -0.5 * dl_dg * dx * dx
                        egrad[e, 3] += -dl_dg * dx * dy
                        egrad[e, 4] += -0.5 * dl_dg * dy * dy


def grad_pixels_to_splats(image_grad: np.ndarray, result: RenderResult) -> SplatGrads:
    """Reverse of the compositing and footprint evaluation for one view."""
    proj = result.projected
    m = len(proj)
    bins = result.bins
    H, W = result.image.shape[:2]
    n_entries = len(bins.entry_copy)
    egrad = np.zeros((n_entries, 9))
    if n_entries and np.any(image_grad):
        src = result.copy_src
        _backward_tiles(
            bins.ranges,
            bins.entry_copy,
            result.copy_mean,
            np.ascontiguousarray(packed_conic(proj)[src]),
            np.ascontiguousarray(proj.opacity[src]),
            np.ascontiguousarray(proj.color[src]),
            H,
            W,
            bins.tile_size,
            bins.tiles_x,
            result.transmittance,
            result.n_contrib,
            np.ascontiguousarray(image_grad, dtype=np.float64),
            egrad,
        )
    row = result.copy_src[bins.entry_copy]
    per = np.stack([np.bincount(row, weights=egrad[:, j], minlength=m) for j in range(9)], axis=1)
    if m == 0:
        per = np.zeros((0, 9))
    return SplatGrads(mean2d=per[:, 0:2], conic=per[:, 2:5], opacity=per[:, 5], color=per[:, 6:9])


def grad_T(T, V, dL_dcov, signs=None):
    """Gradient w.r.t. T = J W of the 2D covariance T V T^T.

    ``dL_dcov`` is the symmetric 2x2 matrix gradient; it enters as its
    diagonal and the gradient of the shared off-diagonal parameter
    (the sum of its two off-diagonal entries). ``signs`` optionally scales
    each of the 12 terms, shape (2, 3, 2); it exists for mutation testing.
    """
    T = np.asarray(T, dtype=float)
    V = np.asarray(V, dtype=float)
    G = np.asarray(dL_dcov, dtype=float)
    s = np.ones((2, 3, 2)) if signs is None else np.asarray(signs, dtype=float)
    g11 = G[..., 0, 0]
    g12 = G[..., 0, 1] + G[..., 1, 0]
    g22 = G[..., 1, 1]

    def t(i, j):
        return T[..., i - 1, j - 1]

    def v(i, j):
        return V[..., i - 1, j - 1]

    out = np.empty(T.shape)
    out[..., 0, 0] = (s[0, 0, 0] * 2 * (t(1, 1) * v(1, 1) + t(1, 2) * v(1, 2) + t(1, 3) * v(1, 3)) * g11
                      + s[0, 0, 1] * (t(2, 1) * v(1, 1) + t(2, 2) * v(1, 2) + t(2, 3) * v(1, 3)) * g12)
    out[..., 0, 1] = (s[0, 1, 0] * 2 * (t(1, 1) * v(2, 1) + t(1, 2) * v(2, 2) + t(1, 3) * v(2, 3)) * g11
                      + s[0, 1, 1] * (t(2, 1) * v(2, 1) + t(2, 2) * v(2, 2) + t(2, 3) * v(2, 3)) * g12)
    out[..., 0, 2] = (s[0, 2, 0] * 2 * (t(1, 1) * v(3, 1) + t(1, 2) * v(3, 2) + t(1, 3) * v(3, 3)) * g11
                      + s[0, 2, 1] * (t(2, 1) * v(3, 1) + t(2, 2) * v(3, 2) + t(2, 3) * v(3, 3)) * g12)
    out[..., 1, 0] = (s[1, 0, 0] * 2 * (t(2, 1) * v(1, 1) + t(2, 2) * v(1, 2) + t(2, 3) * v(1, 3)) * g22
                      + s[1, 0, 1] * (t(1, 1) * v(1, 1) + t(1, 2) * v(1, 2) + t(1, 3) * v(1, 3)) * g12)
    out[..., 1, 1] = (s[1, 1, 0] * 2 * (t(2, 1) * v(2, 1) + t(2, 2) * v(2, 2) + t(2, 3) * v(2, 3)) * g22
                      + s[1, 1, 1] * (t(1, 1) * v(2, 1) + t(1, 2) * v(2, 2) + t(1, 3) * v(2, 3)) * g12)
    out[..., 1, 2] = (s[1, 2, 0] * 2 * (t(2, 1) * v(3, 1) + t(2, 2) * v(3, 2) + t(2, 3) * v(3, 3)) * g22
                      + s[1, 2, 1] * (t(1, 1) * v(3, 1) + t(1, 2) * v(3, 2) + t(1, 3) * v(3, 3)) * g12)
    return out


def grad_position(t, dL_dJ, width, height, theta_max=POLE_CLAMP):
    """Gradient w.r.t. camera-space position of <dL_dJ, J_omni(t)>.

    The closed forms below are written for a second Jacobian row of the
    opposite sign (y up), so that row's gradient enters negated. Positions
    beyond the pole clamp differentiate the clamped first row instead.
    """
    t = np.asarray(t, dtype=float)
    G = np.asarray(dL_dJ, dtype=float)
    W, H, pi = width, height, np.pi
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    xz = np.maximum(tx * tx + tz * tz, 1e-300)
    r2 = xz + ty * ty
    r4 = r2 * r2
    sxz = np.sqrt(xz)
    j11, j13 = G[..., 0, 0], G[..., 0, 2]
    j21, j22, j23 = -G[..., 1, 0], -G[..., 1, 1], -G[..., 1, 2]

    row1 = np.stack(
        [
            -W / pi * tx * tz / xz**2 * j11 + W / (2 * pi) * (tx * tx - tz * tz) / xz**2 * j13,
            np.zeros_like(tx),
            W / (2 * pi) * (tx * tx - tz * tz) / xz**2 * j11 + W / pi * tx * tz / xz**2 * j13,
        ],
        axis=-1,
    )
    row2 = np.stack(
        [
            H / pi * ty * (tz * tz * r2 - 2 * tx * tx * xz) / (r4 * xz**1.5) * j21
            + H / pi * tx * (r2 - 2 * ty * ty) / (r4 * sxz) * j22
            - H / pi * tx * ty * tz * (2 * xz + r2) / (r4 * xz**1.5) * j23,
            H / pi * tx * (r2 - 2 * ty * ty) / (r4 * sxz) * j21
            + 2 * H / pi * ty * sxz / r4 * j22
            + H / pi * tz * (r2 - 2 * ty * ty) / (r4 * sxz) * j23,
            -H / pi * tx * ty * tz * (2 * xz + r2) / (r4 * xz**1.5) * j21
            + H / pi * tz * (r2 - 2 * ty * ty) / (r4 * sxz) * j22
            + H / pi * ty * (tx * tx * r2 - 2 * tz * tz * xz) / (r4 * xz**1.5) * j23,
        ],
        axis=-1,
    )

    clamped = np.abs(to_spherical(t).elevation) > theta_max
    if np.any(clamped):
        # first row is (W / 2pi) sec(theta_max) (tz, 0, -tx) / (r rho)
        c = W / (2 * pi) / np.cos(theta_max)
        r = np.sqrt(r2)
        q = 1.0 / (r * sxz)
        k = (xz + r2) / (r**3 * sxz**3)
        dq = np.stack([-tx * k, -ty / (r**3 * sxz), -tz * k], axis=-1)
        d11 = c * tz[..., None] * dq
        d11[..., 2] += c * q
        d13 = -c * tx[..., None] * dq
        d13[..., 0] -= c * q
        clamped_row1 = j11[..., None] * d11 + j13[..., None] * d13
        row1 = np.where(clamped[..., None], clamped_row1, row1)
    return row1 + row2


def _rotation_grad_to_quaternion(dL_dR, q):
    """Gradient w.r.t. the raw (unnormalized) quaternion (w, x, y, z)."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = dL_dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1] - w * g[..., 1, 2]
              + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0] + z * g[..., 1, 2]
              - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0] - 2 * z * g[..., 1, 1]
              + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # project out the radial part: normalization makes the loss scale-invariant in q
    return (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm


def grad_cov3d_params(dL_dcov3d, rotation, log_scales):
    """Gradients w.r.t. (quaternion, log_scales) of Sigma = R S S^T R^T."""
    G = np.asarray(dL_dcov3d, dtype=float)
    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    q = np.asarray(rotation, dtype=float)
    s = np.exp(np.asarray(log_scales, dtype=float))
    R = quaternion_to_rotation(q)
    M = R * s[..., None, :]
    dM = 2 * G @ M
    dR = dM * s[..., None, :]
    d_scale = np.sum(dM * R, axis=-2)
    return _rotation_grad_to_quaternion(dR, q), d_scale * s


def backward(
    cloud: GaussianCloud,
    camera: CameraPose,
    image_grad: np.ndarray,
    result: RenderResult | None = None,
    near=NEAR,
    far=FAR,
    eq_signs=None,
) -> GradBuffers:
    """Gradients of a loss, given its image gradient, for one view.

    ``result`` must be the forward render of (cloud, camera); it is
    recomputed when omitted. ``eq_signs`` is passed through to ``grad_T``.
    """
    if result is None:
        result = render(cloud, camera, near, far)
    n = len(cloud)
    out = GradBuffers.zeros(n)
    proj = result.projected
    if len(proj) == 0:
        return out
    W, H = camera.width, camera.height
    sg = grad_pixels_to_splats(image_grad, result)
    idx = proj.index

    R = camera.rotation
    J = proj.jacobian.astype(np.float64)
    t = proj.mu_cam.astype(np.float64)
    cov3d = proj.cov3d.astype(np.float64)
    T = J @ R
    dcov2d = sg.cov2d(proj.conic.astype(np.float64))
    dcov3d = np.swapaxes(T, -1, -2) @ dcov2d @ T
    dT = grad_T(T, cov3d, dcov2d, signs=eq_signs)
    dJ = dT @ R.T
    dt = grad_position(t, dJ, W, H)
    dt += np.einsum("nij,ni->nj", jacobian_direct(t, W, H), sg.mean2d)
    out.means[idx] = dt @ R
    dq, dls = grad_cov3d_params(dcov3d, cloud.rotations[idx], cloud.log_scales[idx])
    out.rotations[idx] = dq
    out.log_scales[idx] = dls
    alpha = proj.opacity.astype(np.float64)
    out.raw_opacities[idx] = sg.opacity * alpha * (1 - alpha)
    out.colors[idx] = sg.color

    touched = np.bincount(result.copy_src[result.bins.entry_copy], minlength=len(proj)) > 0
    out.visible[idx] = touched
    ndc = sg.mean2d * np.array([W / 2.0, H / 2.0])
    out.screen_grad[idx] = np.where(touched, np.linalg.norm(ndc, axis=1), 0.0)
    out.elevation[idx] = np.where(touched, proj.elevation, np.nan)

    for name in GaussianCloud.PARAMS:
        arr = getattr(out, name).reshape(n, -1) if n else np.zeros((0, 1))
        bad = ~np.all(np.isfinite(arr), axis=1)
        if bad.any():
            raise InvalidParameterError(f"non-finite {name} gradient for Gaussian {int(np.argmax(bad))}")
    return out
