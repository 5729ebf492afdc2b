"""Training loop: photometric loss, per-group Adam, densification schedule."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from omnisplat.backward import backward
from omnisplat.core import CameraPose, GaussianCloud, TrainState
from omnisplat.densify import DensifyConfig, accumulate_stats, densify_and_prune, reset_opacity
from omnisplat.metrics import ssim_with_grad
from omnisplat.rasterizer import FAR, NEAR, TILE_SIZE, render

log = logging.getLogger(__name__)

# config-file key -> (section, attribute)
CONFIG_KEYS = {
    "iterations": ("train", "iterations"),
    "densify_until_iter": ("densify", "densify_until_iter"),
    "densify_from_iter": ("densify", "densify_from_iter"),
    "densification_interval": ("densify", "densify_interval"),
    "opacity_reset_interval": ("densify", "opacity_reset_interval"),
    "percent_dense": ("densify", "percent_dense"),
    "densify_grad_threshold_min": ("densify", "grad_threshold_min"),
    "densify_grad_threshold_max": ("densify", "grad_threshold_max"),
    "min_opacity": ("densify", "opacity_prune_floor"),
    "position_lr_init": ("train", "position_lr_init"),
    "position_lr_final": ("train", "position_lr_final"),
    "rotation_lr": ("train", "rotation_lr"),
    "scaling_lr": ("train", "scaling_lr"),
    "opacity_lr": ("train", "opacity_lr"),
    "color_lr": ("train", "color_lr"),
    "lambda_dssim": ("train", "lambda_ssim"),
    "checkpoint_every": ("train", "checkpoint_every"),
    "near": ("train", "near"),
    "far": ("train", "far"),
    "seed": ("train", "seed"),
    "max_minutes": ("train", "max_minutes"),
    "tile_size": ("train", "tile_size"),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 200_000
    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    rotation_lr: float = 1e-3
    scaling_lr: float = 5e-3
    opacity_lr: float = 0.05
    color_lr: float = 2.5e-3
    lambda_ssim: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    checkpoint_every: int = 0
    near: float = NEAR
    far: float = FAR
    tile_size: int = TILE_SIZE
    seed: int = 0
    max_minutes: float | None = None
    densify: DensifyConfig = field(default_factory=DensifyConfig)

    def __post_init__(self):
        for name in ("position_lr_init", "position_lr_final", "rotation_lr", "scaling_lr", "opacity_lr", "color_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.lambda_ssim < 1:
            raise ValueError("lambda_ssim must lie in [0, 1)")

    @classmethod
    def from_dict(cls, values: dict) -> TrainConfig:
        """Build from flat config-file keys (see CONFIG_KEYS)."""
        train, dens = {}, {}
        for key, value in values.items():
            if key not in CONFIG_KEYS:
                raise ValueError(f"unknown config key {key!r}")
            section, attr = CONFIG_KEYS[key]
            (train if section == "train" else dens)[attr] = value
        return cls(densify=DensifyConfig(**dens), **train)

    def to_dict(self) -> dict:
        out = {}
        for key, (section, attr) in CONFIG_KEYS.items():
            src = self if section == "train" else self.densify
            out[key] = getattr(src, attr)
        return out

    def lr(self, group: str, step: int, scene_extent: float) -> float:
        if group == "means":
            t = min(step / max(self.iterations, 1), 1.0)
            lr = np.exp((1 - t) * np.log(self.position_lr_init) + t * np.log(self.position_lr_final))
            return float(lr * scene_extent)
        return {
            "rotations": self.rotation_lr,
            "log_scales": self.scaling_lr,
            "raw_opacities": self.opacity_lr,
            "colors": self.color_lr,
        }[group]


def photometric_loss(rendered, target, lambda_ssim=0.2):
    """(1 - l) * L1 + l * (1 - SSIM), and its gradient w.r.t. ``rendered``."""
    rendered = np.asarray(rendered, np.float64)
    target = np.asarray(target, np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"rendered {rendered.shape} and target {target.shape} differ in shape")
    diff = rendered - target
    l1 = np.mean(np.abs(diff))
    grad = (1 - lambda_ssim) * np.sign(diff) / diff.size
    loss = (1 - lambda_ssim) * l1
    if lambda_ssim > 0:
        s, ds = ssim_with_grad(rendered, target)
        loss += lambda_ssim * (1 - s)
        grad -= lambda_ssim * ds
    return float(loss), grad


def scene_extent(points) -> float:
    """Radius of a bounding sphere of the points about their centroid."""
    points = np.asarray(points, np.float64)
    if len(points) == 0:
        return 1.0
    r = np.linalg.norm(points - points.mean(axis=0), axis=1).max()
    return float(r) if r > 0 else 1.0


def adam_step(cloud: GaussianCloud, state: TrainState, grads, cfg: TrainConfig, extent: float):
    """One Adam update of every parameter group in place."""
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    for name in GaussianCloud.PARAMS:
        g = getattr(grads, name)
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = cfg.lr(name, state.step, extent) * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        param = getattr(cloud, name)
        setattr(cloud, name, (param - update).astype(cloud.dtype))
    # only rows the step moved: renormalizing an untouched float32 row can
    # flip its last bit and perturb an otherwise exact fit
    moved = np.any(grads.rotations != 0, axis=1)
    q = cloud.rotations[moved].astype(np.float64)
    cloud.rotations[moved] = (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(cloud.dtype)
    cloud.colors = np.clip(cloud.colors, 0.0, 1.0)


def train_step(
    cloud: GaussianCloud,
    state: TrainState,
    camera: CameraPose,
    target: np.ndarray,
    cfg: TrainConfig,
    extent: float,
    rng=None,
):
    """Forward, backward and one optimizer update on one view.

    Densification and opacity resets run on their schedule. Returns
    (cloud, state, loss); the cloud may be a new object after densification.
    """
    result = render(cloud, camera, cfg.near, cfg.far, cfg.tile_size)
    loss, dimg = photometric_loss(result.image, target, cfg.lambda_ssim)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss at iteration {state.iteration}")
    grads = backward(cloud, camera, dimg, result, cfg.near, cfg.far)
    adam_step(cloud, state, grads, cfg, extent)
    state.iteration += 1
    it = state.iteration
    d = cfg.densify
    if it < d.densify_until_iter:
        accumulate_stats(state, grads)
        if it > d.densify_from_iter and it % d.densify_interval == 0:
            cloud, state = densify_and_prune(cloud, state, d, extent, rng)
        if d.opacity_reset_interval and it % d.opacity_reset_interval == 0:
            cloud, state = reset_opacity(cloud, state)
    return cloud, state, loss


@dataclass
class LogRow:
    iteration: int
    wall_seconds: float
    loss: float
    n_gaussians: int


class Trainer:
    """Cycles through training views in shuffled epochs.

    ``views`` is a list of (camera, target image) pairs.
    """

    def __init__(self, cloud: GaussianCloud, views, cfg: TrainConfig, extent: float | None = None):
        self.cloud = cloud
        self.views = list(views)
        self.cfg = cfg
        self.extent = scene_extent(cloud.means) if extent is None else extent
        self.state = TrainState.for_cloud(cloud)
        self.rng = np.random.default_rng(cfg.seed)
        self._order = []
        self.history: list[LogRow] = []

    def next_view(self):
        if not self._order:
            self._order = list(self.rng.permutation(len(self.views)))
        return self.views[self._order.pop(0)]

    def run(self, on_checkpoint=None, on_diverge=None, log_every=100):
        """Train until ``cfg.iterations`` or the wall-clock budget runs out."""
        cfg = self.cfg
        budget = None if cfg.max_minutes is None else 60.0 * cfg.max_minutes
        start = time.perf_counter()
        loss = float("nan")
        while self.state.iteration < cfg.iterations:
            elapsed = time.perf_counter() - start
            if budget is not None and elapsed >= budget:
                log.info("wall-clock budget of %.2f min reached at iteration %d", cfg.max_minutes, self.state.iteration)
                break
            camera, target = self.next_view()
            try:
                self.cloud, self.state, loss = train_step(
                    self.cloud, self.state, camera, target, cfg, self.extent, self.rng
                )
            except TrainingDiverged:
                if on_diverge is not None:
                    on_diverge(self.cloud, self.state.iteration)
                raise
            it = self.state.iteration
            if it % log_every == 0 or it == 1 or it == cfg.iterations:
                row = LogRow(it, time.perf_counter() - start, loss, len(self.cloud))
                self.history.append(row)
                log.info("iter %d loss %.5f N %d (%.1fs)", it, loss, len(self.cloud), row.wall_seconds)
            if on_checkpoint is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                on_checkpoint(self.cloud, it)
        it = self.state.iteration
        if it and (not self.history or self.history[-1].iteration != it):
            self.history.append(LogRow(it, time.perf_counter() - start, loss, len(self.cloud)))
        return self.cloud


__all__ = [
    "CONFIG_KEYS",
    "LogRow",
    "TrainConfig",
    "Trainer",
    "TrainingDiverged",
    "adam_step",
    "photometric_loss",
    "scene_extent",
    "train_step",
]
