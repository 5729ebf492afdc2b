"""Deterministic synthetic scenes: random Gaussians seen by a few ERP cameras."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from omnisplat.core import CameraPose, GaussianCloud, logit
from omnisplat.io import ManifestEntry, SceneManifest, save_checkpoint, save_image, save_pointcloud, write_manifest
from omnisplat.rasterizer import render


@dataclass(frozen=True)
class Preset:
    n_gaussians: int
    n_views: int
    width: int
    n_init_points: int
    radius: tuple = (2.0, 3.5)
    scale: tuple = (0.08, 0.3)
    max_elevation_deg: float = 70.0
    camera_jitter: float = 0.3


PRESETS = {
    "overfit": Preset(n_gaussians=50, n_views=4, width=256, n_init_points=200),
    "small": Preset(n_gaussians=10, n_views=2, width=64, n_init_points=20),
}


@dataclass
class SynthScene:
    gt: GaussianCloud
    cameras: list
    images: list
    init_points: np.ndarray
    init_colors: np.ndarray


def random_directions(rng, n, max_elevation):
    phi = rng.uniform(-np.pi, np.pi, n)
    # area-uniform in elevation within the band
    s = rng.uniform(-np.sin(max_elevation), np.sin(max_elevation), n)
    theta = np.arcsin(s)
    return np.stack([np.cos(theta) * np.sin(phi), -np.sin(theta), np.cos(theta) * np.cos(phi)], axis=1)


def random_cloud(rng, n, preset: Preset = PRESETS["overfit"], dtype=np.float32) -> GaussianCloud:
    dirs = random_directions(rng, n, np.deg2rad(preset.max_elevation_deg))
    means = dirs * rng.uniform(*preset.radius, (n, 1))
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(
        means=means,
        rotations=q,
        log_scales=np.log(rng.uniform(*preset.scale, (n, 3))),
        raw_opacities=logit(rng.uniform(0.5, 0.95, n)),
        colors=rng.uniform(0.1, 0.9, (n, 3)),
    ).astype(dtype)


def random_camera(rng, width, jitter):
    yaw = rng.uniform(-np.pi, np.pi)
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    center = rng.uniform(-jitter, jitter, 3)
    return CameraPose(R, -R @ center, width, width // 2)


def make_scene(preset="overfit", seed=0) -> SynthScene:
    p = PRESETS[preset] if isinstance(preset, str) else preset
    rng = np.random.default_rng(seed)
    gt = random_cloud(rng, p.n_gaussians, p)
    cameras = [random_camera(rng, p.width, p.camera_jitter) for _ in range(p.n_views)]
    images = [render(gt, cam).image for cam in cameras]
    init_dirs = random_directions(rng, p.n_init_points, np.deg2rad(p.max_elevation_deg))
    init_points = init_dirs * rng.uniform(*p.radius, (p.n_init_points, 1))
    init_colors = rng.uniform(0.0, 1.0, (p.n_init_points, 3))
    return SynthScene(gt, cameras, images, init_points, init_colors)


def write_scene(scene: SynthScene, out_dir) -> Path:
    """Write images, init points, ground-truth checkpoint and a manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (cam, img) in enumerate(zip(scene.cameras, scene.images)):
        path = out / "images" / f"view_{i:03d}.png"
        save_image(path, img)
        entries.append(ManifestEntry(path, cam, "train"))
    save_pointcloud(out / "points.ply", scene.init_points, scene.init_colors)
    save_checkpoint(scene.gt, out / "ground_truth.ply")
    manifest = out / "manifest.txt"
    write_manifest(manifest, SceneManifest(entries, out / "points.ply"))
    return manifest
