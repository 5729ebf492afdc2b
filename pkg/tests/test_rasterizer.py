import numpy as np
import pytest

from omnisplat.core import CameraPose, GaussianCloud, InvalidParameterError, Splat2D, logit
from omnisplat.rasterizer import (
    ALPHA_MAX,
    MAX_WRAPS,
    T_MIN,
    bin_splats,
    composite_pixel,
    cull,
    eval_splat,
    render,
    render_reference,
    seam_copies,
)

from conftest import random_scene


def make_splat(mean=(10.0, 10.0), cov=np.eye(2), opacity=0.5, color=(1.0, 0.0, 0.0), depth=1.0):
    cov = np.asarray(cov, float)
    return Splat2D(
        pixel_mean=np.asarray(mean, float),
        cov2d=cov,
        cov2d_inv=np.linalg.inv(cov),
        depth=depth,
        opacity=opacity,
        color=np.asarray(color, float),
        radius=3 * np.sqrt(np.linalg.eigvalsh(cov).max()),
    )


def test_eval_splat_examples():
    s = make_splat()
    assert eval_splat(s, s.pixel_mean) == 1.0
    assert eval_splat(s, s.pixel_mean + [1, 0]) == pytest.approx(np.exp(-0.5), rel=1e-12)
    # 3 sigma along the major axis of an anisotropic covariance
    a = make_splat(cov=[[4.0, 0], [0, 1.0]])
    assert eval_splat(a, a.pixel_mean + [6, 0]) == pytest.approx(np.exp(-4.5), rel=1e-12)
    assert np.exp(-4.5) == pytest.approx(0.0111, abs=1e-4)


def test_composite_examples():
    s = make_splat()
    rgb, T = composite_pixel([s], s.pixel_mean)
    np.testing.assert_allclose(rgb, [0.5, 0, 0])
    assert T == 0.5
    rgb, T = composite_pixel([s, s], s.pixel_mean)
    np.testing.assert_allclose(rgb, [0.75, 0, 0])
    assert T == 0.25
    rgb, T = composite_pixel([], (3.0, 4.0))
    np.testing.assert_array_equal(rgb, 0)
    assert T == 1.0


def test_composite_clamp_and_exit():
    s = make_splat(opacity=1.0)
    rgb, T = composite_pixel([s], s.pixel_mean)
    assert T == pytest.approx(1 - ALPHA_MAX)
    # two clamped hits leave T = 1e-4, a third brings it below the exit level
    rgb, T = composite_pixel([s] * 5, s.pixel_mean)
    assert T == pytest.approx((1 - ALPHA_MAX) ** 3)
    assert T < T_MIN


def test_composite_cutoff():
    s = make_splat()
    rgb, T = composite_pixel([s], s.pixel_mean + [3.01, 0])
    assert T == 1.0 and not rgb.any()


def cloud_at(depths):
    n = len(depths)
    return GaussianCloud(
        means=np.stack([np.zeros(n), np.zeros(n), np.asarray(depths, float)], 1),
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
        log_scales=np.full((n, 3), -2.0),
        raw_opacities=np.zeros(n),
        colors=np.full((n, 3), 0.5),
    )


def test_cull_examples():
    cam = CameraPose.identity(64, 32)
    assert list(cull(cloud_at([0.05, 1.0, 500]), cam, 0.1, 100)) == [1]
    assert len(cull(GaussianCloud.empty(), cam)) == 0
    assert list(cull(cloud_at([1, 2, 3, 4]), cam)) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        cull(cloud_at([1]), cam, 2.0, 1.0)
    with pytest.raises(ValueError):
        cull(cloud_at([1]), cam, 0.0, 1.0)


def test_cull_keeps_every_direction(rng):
    d = rng.standard_normal((100, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    cloud = GaussianCloud(d * 2, np.tile([1.0, 0, 0, 0], (100, 1)), np.zeros((100, 3)), np.zeros(100), np.zeros((100, 3)))
    assert len(cull(cloud, CameraPose.identity(64, 32))) == 100


def test_seam_copies():
    src, off = seam_copies(np.array([1.0, 50.0, 99.0]), np.array([3.0, 3.0, 3.0]), 100)
    pairs = sorted(zip(src.tolist(), off.tolist()))
    assert pairs == [(0, 0), (0, 100), (1, 0), (2, -100), (2, 0)]
    # a splat wider than the image touches several periods, capped at MAX_WRAPS
    src, off = seam_copies(np.array([50.0]), np.array([1e6]), 100)
    assert off.min() == -MAX_WRAPS * 100 and off.max() == MAX_WRAPS * 100


def test_bin_splats_sorted_by_depth_then_key():
    mean = np.array([[8.0, 8.0], [8.0, 8.0], [8.0, 8.0]])
    bins = bin_splats(mean, np.full(3, 2.0), np.array([2.0, 1.0, 2.0]), np.array([5, 9, 1]), 16, 32, 16)
    first = bins.entry_copy[bins.ranges[0] : bins.ranges[1]]
    assert list(first) == [1, 2, 0]
    assert bins.ranges[2] - bins.ranges[1] == 0


def test_empty_render():
    res = render(GaussianCloud.empty(), CameraPose.identity(64, 32))
    assert res.image.shape == (32, 64, 3)
    assert not res.image.any()
    np.testing.assert_array_equal(res.transmittance, 1.0)


def test_opaque_gaussian_on_axis_matches_oracle():
    cloud = GaussianCloud(
        means=np.array([[0.0, 0, 1.0]]),
        rotations=np.array([[1.0, 0, 0, 0]]),
        log_scales=np.full((1, 3), np.log(0.05)),
        raw_opacities=np.array([logit(0.999)]),
        colors=np.array([[0.2, 0.7, 0.9]]),
    )
    cam = CameraPose.identity(256, 128)
    res = render(cloud.astype(np.float32), cam)
    ref, T = render_reference(cloud, cam)
    assert np.abs(res.image - ref).max() <= 1e-5
    np.testing.assert_allclose(res.image[63, 127], ref[63, 127], atol=1e-5)
    assert res.n_hit.max() == 1


@pytest.mark.parametrize("seed", range(3))
def test_tiled_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    cloud, cam = random_scene(rng, 100, width=256, dtype=np.float32)
    res = render(cloud, cam)
    ref, T = render_reference(cloud, cam)
    assert np.abs(res.image - ref).max() <= 1e-5
    assert np.abs(res.transmittance - T).max() <= 1e-5


def test_single_precision_output_dtype(rng):
    cloud, cam = random_scene(rng, 5, dtype=np.float32)
    assert render(cloud, cam).image.dtype == np.float32
    assert render(cloud.astype(np.float64), cam).image.dtype == np.float64


def test_permutation_invariance(rng):
    cloud, cam = random_scene(rng, 60, width=128)
    perm = rng.permutation(60)
    a = render(cloud, cam).image
    b = render(cloud.subset(perm), cam).image
    np.testing.assert_array_equal(a, b)


def test_ties_broken_by_index():
    # two Gaussians at the same depth and place: the lower index is in front
    cloud = cloud_at([1.0, 1.0])
    cloud.raw_opacities[:] = logit(0.9)
    cloud.colors = np.array([[1.0, 0, 0], [0, 0, 1.0]])
    img = render(cloud, CameraPose.identity(64, 32)).image
    assert img[15, 31, 0] > img[15, 31, 2]
    cloud.colors = cloud.colors[::-1].copy()
    img2 = render(cloud, CameraPose.identity(64, 32)).image
    assert img2[15, 31, 2] > img2[15, 31, 0]


@pytest.mark.parametrize("k", [1, 7, 40, 128, -13])
def test_yaw_shift_is_circular_shift(rng, k):
    W = 128
    cloud, cam = random_scene(rng, 40, width=W, scale=(0.1, 0.5))
    base = render(cloud, cam).image
    delta = 2 * np.pi / W * k
    shifted = render(cloud, cam.yawed(delta)).image
    assert np.abs(shifted - np.roll(base, k, axis=1)).max() <= 1e-4


def test_large_splat_across_seam_wraps():
    cloud = GaussianCloud(
        means=np.array([[0.0, 0, -1.0]]),
        rotations=np.array([[1.0, 0, 0, 0]]),
        log_scales=np.full((1, 3), np.log(0.1)),
        raw_opacities=np.array([logit(0.8)]),
        colors=np.ones((1, 3)),
    )
    img = render(cloud, CameraPose.identity(64, 32)).image
    # directly behind the camera: the splat is split between both image edges
    assert img[15, 0, 0] > 0.5 and img[15, 63, 0] > 0.5
    np.testing.assert_allclose(img[:, :3], img[:, -1:-4:-1], atol=1e-6)


def test_opacity_monotone_at_center():
    base = cloud_at([1.0, 2.0])
    base.colors = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    cam = CameraPose.identity(64, 32)
    prev = -1.0
    for op in np.linspace(0.05, 0.99, 12):
        c = base.copy()
        c.raw_opacities[1] = logit(op)
        # contribution of the back Gaussian's color at its center pixel
        green = render(c, cam).image[15, 31, 1]
        assert green >= prev
        prev = green


def test_non_finite_parameter_is_reported(rng):
    cloud, cam = random_scene(rng, 5)
    cloud.log_scales[3, 1] = np.nan
    with pytest.raises(InvalidParameterError, match="Gaussian 3"):
        render(cloud, cam)


def test_rejects_background():
    with pytest.raises(NotImplementedError):
        render(GaussianCloud.empty(), CameraPose.identity(64, 32), background=(1, 1, 1))
