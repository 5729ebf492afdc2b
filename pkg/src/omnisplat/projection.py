"""Per-Gaussian projection onto the equirectangular image.

A Gaussian's center maps to pixels through azimuth/elevation. Its covariance
is pushed forward by a local affine approximation: rotate the camera so the
Gaussian sits on the optical axis, project onto the tangent plane of the unit
sphere with a unit-focal perspective camera, stretch horizontally by sec of
the elevation, then scale angles to pixels.

All functions broadcast over leading axes of their array arguments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from omnisplat.core import CameraPose, DegenerateDirectionError, GaussianCloud, Splat2D, build_covariance, sigmoid

POLE_CLAMP = np.deg2rad(85.0)
LOW_PASS = 0.3
EXTENT_SIGMAS = 3.0


class SphericalAngles(NamedTuple):
    azimuth: np.ndarray
    elevation: np.ndarray


def _check_direction(mu):
    mu = np.asarray(mu)
    if np.any(np.linalg.norm(mu, axis=-1) == 0):
        raise DegenerateDirectionError("zero-length direction has no spherical angles")
    return mu


def to_spherical(mu) -> SphericalAngles:
    """Azimuth from +z towards +x in [-pi, pi], elevation up from the z-x plane.

    y points down, so elevation is positive for negative y. At the poles the
    azimuth is 0.
    """
    mu = _check_direction(mu)
    x, y, z = mu[..., 0], mu[..., 1], mu[..., 2]
    phi = np.arctan2(x, z)
    theta = np.arctan2(-y, np.hypot(x, z))
    return SphericalAngles(phi, theta)


def project_center(mu, width, height):
    """Pixel coordinates of camera-space points; x in [0, W], y in [0, H]."""
    phi, theta = to_spherical(mu)
    u = width / (2 * np.pi) * phi + width / 2
    v = -height / np.pi * theta + height / 2
    return np.stack([u, v], axis=-1)


def tangent_rotation(azimuth, elevation):
    """Rotation taking the camera z-axis onto the ray at (azimuth, elevation).

    Built as the elevation rotation times the azimuth rotation, so that
    ``T @ mu == (0, 0, |mu|)`` for the point the angles came from.
    """
    phi = np.asarray(azimuth, dtype=float)
    theta = np.asarray(elevation, dtype=phi.dtype)
    shape = np.broadcast(phi, theta).shape
    cp, sp = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    one = np.ones(shape)
    zero = np.zeros(shape)
    T_theta = np.stack(
        [
            np.stack([one, zero, zero], -1),
            np.stack([zero, ct * one, st * one], -1),
            np.stack([zero, -st * one, ct * one], -1),
        ],
        -2,
    )
    T_phi = np.stack(
        [
            np.stack([cp * one, zero, -sp * one], -1),
            np.stack([zero, one, zero], -1),
            np.stack([sp * one, zero, cp * one], -1),
        ],
        -2,
    )
    return T_theta @ T_phi


def perspective_jacobian(mu, fx=1.0, fy=1.0):
    """Jacobian of the pinhole projection (fx x/z, fy y/z) at ``mu``."""
    mu = np.asarray(mu, dtype=float)
    x, y, z = mu[..., 0], mu[..., 1], mu[..., 2]
    if np.any(z <= 0):
        raise ValueError("point is behind the camera (z <= 0)")
    zero = np.zeros_like(z)
    return np.stack(
        [
            np.stack([fx / z, zero, -fx * x / z**2], -1),
            np.stack([zero, fy / z, -fy * y / z**2], -1),
        ],
        -2,
    )


def jacobian_omni(mu, width, height, theta_max=POLE_CLAMP, return_clamped=False):
    """Local affine Jacobian of the ERP projection, in factored form.

    Computes S_o Q_o J_o T_mu: tangent rotation, unit-focal perspective
    Jacobian on the optical axis, sec(elevation) horizontal stretch and
    angle-to-pixel scaling. The sec factor uses the elevation clamped to
    ``theta_max``; with ``return_clamped`` a boolean mask of clamped entries
    is returned as well.
    """
    mu = _check_direction(mu)
    phi, theta = to_spherical(mu)
    r = np.linalg.norm(mu, axis=-1)
    clamped = np.abs(theta) > theta_max
    sec = 1.0 / np.cos(np.minimum(np.abs(theta), theta_max))

    T_mu = tangent_rotation(phi, theta)
    zero = np.zeros_like(r)
    J_o = np.stack(
        [
            np.stack([1 / r, zero, zero], -1),
            np.stack([zero, 1 / r, zero], -1),
        ],
        -2,
    )
    Q_o = np.zeros(r.shape + (2, 2))
    Q_o[..., 0, 0] = sec
    Q_o[..., 1, 1] = 1.0
    S_o = np.diag([width / (2 * np.pi), height / np.pi])
    J = S_o @ Q_o @ J_o @ T_mu
    if return_clamped:
        return J, clamped
    return J


def jacobian_omni_closed(mu, width, height):
    """The same Jacobian written in closed form in terms of the angles."""
    mu = _check_direction(mu)
    phi, theta = to_spherical(mu)
    r = np.linalg.norm(mu, axis=-1)
    a = width / (2 * np.pi * r)
    b = height / (np.pi * r)
    sec = 1.0 / np.cos(theta)
    return np.stack(
        [
            np.stack([a * sec * np.cos(phi), np.zeros_like(r), -a * sec * np.sin(phi)], -1),
            np.stack([b * np.sin(theta) * np.sin(phi), b * np.cos(theta), b * np.sin(theta) * np.cos(phi)], -1),
        ],
        -2,
    )


def jacobian_direct(mu, width, height):
    """Derivative of ``project_center`` by direct differentiation in x, y, z.

    Undefined on the vertical axis (x = z = 0).
    """
    mu = _check_direction(mu)
    x, y, z = mu[..., 0], mu[..., 1], mu[..., 2]
    rho2 = x * x + z * z
    rho = np.sqrt(rho2)
    r2 = rho2 + y * y
    a = width / (2 * np.pi)
    b = height / (np.pi * r2)
    return np.stack(
        [
            np.stack([a * z / rho2, np.zeros_like(x), -a * x / rho2], -1),
            np.stack([-b * x * y / rho, b * rho, -b * y * z / rho], -1),
        ],
        -2,
    )


def project_covariance(cov_world, world_rot, J, low_pass=LOW_PASS):
    """2D pixel covariance J W Sigma W^T J^T, dilated by ``low_pass`` px^2."""
    T = J @ world_rot
    cov = T @ cov_world @ np.swapaxes(T, -1, -2)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return cov + low_pass * np.eye(2, dtype=cov.dtype)


def _sym2_inverse(cov):
    a, b, c = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    det = a * c - b * b
    inv = np.empty_like(cov)
    inv[..., 0, 0] = c / det
    inv[..., 0, 1] = inv[..., 1, 0] = -b / det
    inv[..., 1, 1] = a / det
    return inv


def _sym2_max_eig(cov):
    a, b, c = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    mid = 0.5 * (a + c)
    return mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))


@dataclass
class ProjectedCloud:
    """Visible Gaussians of one view after projection (struct of arrays).

    ``index`` maps each row back into the source cloud.
    """

    index: np.ndarray
    mu_cam: np.ndarray
    mean2d: np.ndarray
    jacobian: np.ndarray
    cov3d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    radius: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    elevation: np.ndarray
    clamped: np.ndarray

    def __len__(self):
        return len(self.index)

    def splat(self, k: int) -> Splat2D:
        return Splat2D(
            pixel_mean=self.mean2d[k],
            cov2d=self.cov2d[k],
            cov2d_inv=self.conic[k],
            depth=float(self.depth[k]),
            opacity=float(self.opacity[k]),
            color=self.color[k],
            radius=float(self.radius[k]),
            pole_clamped=bool(self.clamped[k]),
        )


def cull(cloud: GaussianCloud, camera: CameraPose, near=0.01, far=1000.0) -> np.ndarray:
    """Indices of Gaussians whose distance to the camera lies in [near, far].

    Culling is a spherical shell only: an omnidirectional camera sees every
    direction.
    """
    if not 0 < near < far:
        raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.int64)
    d = np.linalg.norm(camera.world_to_camera(cloud.means), axis=1)
    return np.flatnonzero((d >= near) & (d <= far))


def project_cloud(cloud: GaussianCloud, camera: CameraPose, near=0.01, far=1000.0) -> ProjectedCloud:
    dtype = cloud.dtype
    idx = cull(cloud, camera, near, far)
    W, H = camera.width, camera.height
    mu = camera.world_to_camera(cloud.means[idx])
    R = camera.rotation.astype(dtype)
    if len(idx):
        J, clamped = jacobian_omni(mu, W, H, return_clamped=True)
        J = J.astype(dtype)
        mean2d = project_center(mu, W, H).astype(dtype)
        elevation = to_spherical(mu).elevation.astype(dtype)
    else:
        J = np.zeros((0, 2, 3), dtype)
        clamped = np.zeros(0, bool)
        mean2d = np.zeros((0, 2), dtype)
        elevation = np.zeros(0, dtype)
    cov3d = build_covariance(cloud.rotations[idx], cloud.log_scales[idx]).astype(dtype)
    cov2d = project_covariance(cov3d, R, J).astype(dtype)
    return ProjectedCloud(
        index=idx,
        mu_cam=mu,
        mean2d=mean2d,
        jacobian=J,
        cov3d=cov3d,
        cov2d=cov2d,
        conic=_sym2_inverse(cov2d),
        depth=np.linalg.norm(mu, axis=1),
        radius=EXTENT_SIGMAS * np.sqrt(_sym2_max_eig(cov2d)),
        opacity=sigmoid(cloud.raw_opacities[idx]),
        color=cloud.colors[idx],
        elevation=elevation,
        clamped=clamped,
    )


def project_gaussian(index: int, cloud: GaussianCloud, camera: CameraPose, near=0.01, far=1000.0) -> Splat2D | None:
    """Project one Gaussian; None if it falls outside the culling shell."""
    proj = project_cloud(cloud.subset([index]), camera, near, far)
    if len(proj) == 0:
        return None
    return proj.splat(0)
