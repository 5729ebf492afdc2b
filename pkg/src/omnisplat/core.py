"""Shared domain types: the Gaussian scene, ERP cameras, projected splats."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class InvalidParameterError(ValueError):
    """A scene or camera parameter is non-finite or violates an invariant."""


class DegenerateDirectionError(ValueError):
    """A direction vector has zero length and no spherical angles."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p)
    return np.log(p / (1.0 - p))


def quaternion_to_rotation(q):
    """Rotation matrices for (..., 4) quaternions stored as (w, x, y, z).

    Quaternions are normalized first, so any nonzero scaling is accepted.
    """
    q = np.asarray(q)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def build_covariance(rotation, log_scales):
    """World-space covariance R S S^T R^T with S = diag(exp(log_scales)).

    Works on a single Gaussian ((4,), (3,)) or batches ((N, 4), (N, 3)).
    """
    rotation = np.asarray(rotation)
    log_scales = np.asarray(log_scales)
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(log_scales))):
        raise InvalidParameterError("non-finite rotation or scale")
    if np.any(np.linalg.norm(rotation, axis=-1) == 0):
        raise InvalidParameterError("zero quaternion")
    R = quaternion_to_rotation(rotation)
    M = R * np.exp(log_scales)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class GaussianCloud:
    """Optimizable scene, stored in the pre-activation domain.

    ``log_scales`` are logs of per-axis standard deviations and
    ``raw_opacities`` are logits; ``colors`` are plain RGB in [0, 1].
    """

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    raw_opacities: np.ndarray
    colors: np.ndarray

    PARAMS = ("means", "rotations", "log_scales", "raw_opacities", "colors")

    _SHAPES = {"means": (3,), "rotations": (4,), "log_scales": (3,), "raw_opacities": (), "colors": (3,)}

    def __post_init__(self):
        means = np.asarray(self.means)
        dtype = means.dtype if means.dtype.kind == "f" else np.float64
        n = len(means)
        for name in self.PARAMS:
            arr = np.asarray(getattr(self, name), dtype=dtype)
            if arr.shape != (n,) + self._SHAPES[name]:
                raise InvalidParameterError(f"field {name} has shape {arr.shape}, expected {(n,) + self._SHAPES[name]}")
            setattr(self, name, arr)

    @classmethod
    def empty(cls, dtype=np.float32) -> GaussianCloud:
        return cls(
            means=np.zeros((0, 3), dtype),
            rotations=np.zeros((0, 4), dtype),
            log_scales=np.zeros((0, 3), dtype),
            raw_opacities=np.zeros((0,), dtype),
            colors=np.zeros((0, 3), dtype),
        )

    def __len__(self) -> int:
        return len(self.means)

    @property
    def dtype(self):
        return self.means.dtype

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.raw_opacities)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.rotations, self.log_scales)

    def astype(self, dtype) -> GaussianCloud:
        return GaussianCloud(**{k: np.array(getattr(self, k), dtype=dtype) for k in self.PARAMS})

    def copy(self) -> GaussianCloud:
        return self.astype(self.dtype)

    def subset(self, idx) -> GaussianCloud:
        return GaussianCloud(**{k: getattr(self, k)[idx] for k in self.PARAMS})

    def concat(self, other: GaussianCloud) -> GaussianCloud:
        return GaussianCloud(
            **{k: np.concatenate([getattr(self, k), getattr(other, k).astype(self.dtype)]) for k in self.PARAMS}
        )

    def check_finite(self):
        """Raise naming the first Gaussian that has a non-finite parameter."""
        for name in self.PARAMS:
            arr = getattr(self, name).reshape(len(self), -1) if len(self) else np.zeros((0, 1))
            bad = ~np.all(np.isfinite(arr), axis=1)
            if bad.any():
                i = int(np.argmax(bad))
                raise InvalidParameterError(f"Gaussian {i} has non-finite {name}: {arr[i]}")


@dataclass
class CameraPose:
    """World-to-camera rigid transform, x_cam = R x_world + t, and ERP size.

    Camera axes follow the OpenCV convention: z forward, x right, y down.
    """

    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError(f"image size must be positive, got {self.width}x{self.height}")
        if self.width != 2 * self.height:
            raise InvalidParameterError(f"ERP images need width == 2*height, got {self.width}x{self.height}")
        if not (np.all(np.isfinite(self.rotation)) and np.all(np.isfinite(self.translation))):
            raise InvalidParameterError("non-finite camera pose")
        err = np.linalg.norm(self.rotation.T @ self.rotation - np.eye(3))
        if err >= 1e-6:
            raise InvalidParameterError(f"camera rotation is not orthonormal (|R^T R - I| = {err:.3g})")

    @classmethod
    def identity(cls, width: int, height: int) -> CameraPose:
        return cls(np.eye(3), np.zeros(3), width, height)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        R = self.rotation.astype(points.dtype)
        t = self.translation.astype(points.dtype)
        return points @ R.T + t

    def yawed(self, angle: float) -> CameraPose:
        """Same camera rotated by ``angle`` about its own vertical (y) axis."""
        c, s = np.cos(angle), np.sin(angle)
        Ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        return replace(self, rotation=Ry @ self.rotation, translation=Ry @ self.translation)


@dataclass
class Splat2D:
    """One Gaussian after projection into ERP pixel space."""

    pixel_mean: np.ndarray
    cov2d: np.ndarray
    cov2d_inv: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    radius: float
    pole_clamped: bool = False


@dataclass
class ErpImage:
    """H x W x 3 equirectangular raster, plus optional final transmittance."""

    pixels: np.ndarray
    transmittance: np.ndarray | None = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InvalidParameterError(f"expected H x W x 3 pixels, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class TrainState:
    """Adam moments and densification statistics that track a GaussianCloud."""

    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    grad_accum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    elevation_accum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grad_count: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    iteration: int = 0
    step: int = 0

    @classmethod
    def for_cloud(cls, cloud: GaussianCloud) -> TrainState:
        state = cls()
        n = len(cloud)
        for name in GaussianCloud.PARAMS:
            arr = getattr(cloud, name)
            state.exp_avg[name] = np.zeros(arr.shape, np.float64)
            state.exp_avg_sq[name] = np.zeros(arr.shape, np.float64)
        state.grad_accum = np.zeros(n)
        state.elevation_accum = np.zeros(n)
        state.grad_count = np.zeros(n, dtype=np.int64)
        return state

    def __len__(self) -> int:
        return len(self.grad_accum)

    def reset_stats(self):
        self.grad_accum[:] = 0.0
        self.elevation_accum[:] = 0.0
        self.grad_count[:] = 0

    def subset(self, idx) -> TrainState:
        return TrainState(
            exp_avg={k: v[idx] for k, v in self.exp_avg.items()},
            exp_avg_sq={k: v[idx] for k, v in self.exp_avg_sq.items()},
            grad_accum=self.grad_accum[idx],
            elevation_accum=self.elevation_accum[idx],
            grad_count=self.grad_count[idx],
            iteration=self.iteration,
            step=self.step,
        )

    def extend(self, n_new: int) -> TrainState:
        """Append zeroed moments and statistics for ``n_new`` Gaussians."""

        def grow(a):
            return np.concatenate([a, np.zeros((n_new,) + a.shape[1:], a.dtype)])

        return TrainState(
            exp_avg={k: grow(v) for k, v in self.exp_avg.items()},
            exp_avg_sq={k: grow(v) for k, v in self.exp_avg_sq.items()},
            grad_accum=grow(self.grad_accum),
            elevation_accum=grow(self.elevation_accum),
            grad_count=grow(self.grad_count),
            iteration=self.iteration,
            step=self.step,
        )


__all__ = [
    "CameraPose",
    "DegenerateDirectionError",
    "ErpImage",
    "GaussianCloud",
    "InvalidParameterError",
    "Splat2D",
    "TrainState",
    "build_covariance",
    "logit",
    "quaternion_to_rotation",
    "sigmoid",
]
