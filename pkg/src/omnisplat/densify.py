"""Elevation-aware densification and pruning.

ERP images stretch Gaussians near the poles, which inflates their screen
gradients. The densification threshold therefore rises with the elevation
of the Gaussian as seen from the camera, from ``grad_threshold_min`` at the
horizon to ``grad_threshold_max`` at the poles. Over-threshold Gaussians
are cloned when small and split when large; transparent ones are pruned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from omnisplat.backward import GradBuffers
from omnisplat.core import GaussianCloud, TrainState, logit, quaternion_to_rotation


@dataclass
class DensifyConfig:
    grad_threshold_min: float = 2e-5
    grad_threshold_max: float = 1e-4
    percent_dense: float = 1e-3
    densify_from_iter: int = 500
    densify_interval: int = 100
    densify_until_iter: int = 100_000
    opacity_reset_interval: int = 3000
    opacity_prune_floor: float = 0.005
    split_children: int = 2
    split_scale_divisor: float = 1.6

    def __post_init__(self):
        if not 0 < self.grad_threshold_min <= self.grad_threshold_max:
            raise ValueError("need 0 < grad_threshold_min <= grad_threshold_max")
        if not 0 < self.percent_dense < 1:
            raise ValueError("percent_dense must lie in (0, 1)")


def dynamic_threshold(elevation, cfg: DensifyConfig):
    """Gradient threshold for a Gaussian at the given camera-relative elevation."""
    return threshold_from_offset(1.0 - _cos(elevation), cfg)


def _cos(theta):
    # cos of the double nearest pi/2 is ~6e-17; read it as an exact pole
    c = np.cos(theta)
    return np.where(np.abs(c) < 1e-15, 0.0, c)


def threshold_from_offset(one_minus_cos, cfg: DensifyConfig):
    # tau_min + w (tau_max - tau_min), written as a blend so both ends are exact
    w = np.asarray(one_minus_cos, dtype=float)
    return (1.0 - w) * cfg.grad_threshold_min + w * cfg.grad_threshold_max


def accumulate_stats(state: TrainState, grads: GradBuffers):
    """Add one view's screen gradients and elevations for visible Gaussians."""
    vis = grads.visible
    state.grad_accum[vis] += grads.screen_grad[vis]
    state.elevation_accum[vis] += 1.0 - _cos(grads.elevation[vis])
    state.grad_count[vis] += 1


def densify_and_prune(cloud: GaussianCloud, state: TrainState, cfg: DensifyConfig, scene_extent: float, rng=None):
    """Clone or split over-threshold Gaussians, then prune transparent ones.

    A Gaussian's mean screen gradient over the views that saw it is compared
    against the threshold at its mean (1 - cos elevation) over those views.
    Returns the new (cloud, state); new Gaussians get zeroed moments and all
    statistics are reset.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(cloud)
    seen = state.grad_count > 0
    count = np.maximum(state.grad_count, 1)
    mean_grad = np.where(seen, state.grad_accum / count, 0.0)
    tau = threshold_from_offset(state.elevation_accum / count, cfg)
    selected = seen & (mean_grad >= tau)
    big = cloud.scales.max(axis=1) >= cfg.percent_dense * scene_extent
    clone = selected & ~big
    split = selected & big

    clones = cloud.subset(np.flatnonzero(clone))
    parents = cloud.subset(np.flatnonzero(split))
    k = cfg.split_children
    children = parents.subset(np.repeat(np.arange(len(parents)), k))
    if len(children):
        z = rng.standard_normal((len(children), 3))
        # keep samples inside the parent's 1-sigma ellipsoid
        z /= np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1.0)
        R = quaternion_to_rotation(children.rotations.astype(np.float64))
        offset = np.einsum("nij,nj->ni", R, z * children.scales.astype(np.float64))
        children.means = (children.means + offset).astype(cloud.dtype)
        children.log_scales = (children.log_scales - np.log(cfg.split_scale_divisor)).astype(cloud.dtype)

    keep = np.flatnonzero(~split)
    new_cloud = cloud.subset(keep).concat(clones).concat(children)
    new_state = state.subset(keep).extend(len(clones) + len(children))

    alive = np.flatnonzero(new_cloud.opacities >= cfg.opacity_prune_floor)
    if len(alive) < len(new_cloud):
        new_cloud = new_cloud.subset(alive)
        new_state = new_state.subset(alive)
    new_state.reset_stats()
    return new_cloud, new_state


def reset_opacity(cloud: GaussianCloud, state: TrainState, ceiling=0.01):
    """Clamp opacities to ``ceiling`` and zero their optimizer moments."""
    cloud.raw_opacities = np.minimum(cloud.raw_opacities, logit(ceiling)).astype(cloud.dtype)
    state.exp_avg["raw_opacities"][:] = 0.0
    state.exp_avg_sq["raw_opacities"][:] = 0.0
    return cloud, state


__all__ = [
    "DensifyConfig",
    "accumulate_stats",
    "densify_and_prune",
    "dynamic_threshold",
    "reset_opacity",
    "threshold_from_offset",
]
