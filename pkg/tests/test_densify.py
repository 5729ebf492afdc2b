import numpy as np
import pytest

from omnisplat.backward import GradBuffers
from omnisplat.core import GaussianCloud, TrainState, logit, quaternion_to_rotation
from omnisplat.densify import DensifyConfig, accumulate_stats, densify_and_prune, dynamic_threshold, reset_opacity


def make_cloud(rng, n, log_scale=-9.0, opacity=0.5):
    return GaussianCloud(
        means=rng.uniform(-2, 2, (n, 3)),
        rotations=rng.standard_normal((n, 4)),
        log_scales=np.full((n, 3), float(log_scale)),
        raw_opacities=np.full(n, logit(opacity)),
        colors=rng.uniform(0, 1, (n, 3)),
    )


def with_stats(cloud, grad, elevation):
    state = TrainState.for_cloud(cloud)
    state.grad_accum[:] = grad
    state.elevation_accum[:] = 1.0 - np.cos(elevation)
    state.grad_count[:] = 1
    return state


def test_threshold_endpoints():
    cfg = DensifyConfig()
    assert dynamic_threshold(0.0, cfg) == 2e-5
    assert dynamic_threshold(np.pi / 2, cfg) == 1e-4
    assert dynamic_threshold(-np.pi / 2, cfg) == 1e-4
    assert dynamic_threshold(np.pi / 3, cfg) == pytest.approx(6e-5, rel=1e-12)


def test_threshold_even_and_monotone():
    cfg = DensifyConfig()
    theta = np.linspace(0, np.pi / 2, 1000)
    tau = dynamic_threshold(theta, cfg)
    assert np.all(np.diff(tau) >= 0)
    np.testing.assert_array_equal(dynamic_threshold(-theta, cfg), tau)


def test_config_validation():
    with pytest.raises(ValueError):
        DensifyConfig(grad_threshold_min=2e-4, grad_threshold_max=1e-4)
    with pytest.raises(ValueError):
        DensifyConfig(grad_threshold_min=0.0)
    with pytest.raises(ValueError):
        DensifyConfig(percent_dense=1.0)


def test_equatorial_gaussian_is_cloned(rng):
    cloud = make_cloud(rng, 1)
    state = with_stats(cloud, 5e-5, 0.0)
    new, new_state = densify_and_prune(cloud, state, DensifyConfig(), scene_extent=1.0)
    assert len(new) == 2
    np.testing.assert_array_equal(new.means[1], cloud.means[0])
    assert len(new_state) == 2


def test_polar_gaussian_is_not_densified(rng):
    cloud = make_cloud(rng, 1)
    state = with_stats(cloud, 5e-5, np.deg2rad(88))
    new, _ = densify_and_prune(cloud, state, DensifyConfig(), scene_extent=1.0)
    assert len(new) == 1


def test_unseen_gaussians_untouched(rng):
    cloud = make_cloud(rng, 3)
    state = TrainState.for_cloud(cloud)
    new, _ = densify_and_prune(cloud, state, DensifyConfig(), scene_extent=1.0)
    for name in GaussianCloud.PARAMS:
        np.testing.assert_array_equal(getattr(new, name), getattr(cloud, name))


def test_zero_gradients_only_prune(rng):
    cloud = make_cloud(rng, 6)
    cloud.raw_opacities[[1, 4]] = logit(0.001)
    state = with_stats(cloud, 0.0, 0.0)
    new, new_state = densify_and_prune(cloud, state, DensifyConfig(), scene_extent=1.0)
    keep = [0, 2, 3, 5]
    for name in GaussianCloud.PARAMS:
        np.testing.assert_array_equal(getattr(new, name), getattr(cloud, name)[keep])
    assert len(new_state) == 4


def cloned_indices(cloud, new):
    extra = new.means[len(cloud) :]
    return {int(np.flatnonzero(np.all(cloud.means == m, axis=1))[0]) for m in extra}


def test_monotone_in_thresholds(rng):
    cloud = make_cloud(rng, 200)
    elevation = rng.uniform(-np.pi / 2, np.pi / 2, 200)
    state = with_stats(cloud, 4e-5, elevation)
    strict = DensifyConfig(grad_threshold_min=2e-5, grad_threshold_max=1e-4)
    loose = DensifyConfig(grad_threshold_min=1e-5, grad_threshold_max=5e-5)
    a, _ = densify_and_prune(cloud, state, strict, 1.0)
    b, _ = densify_and_prune(cloud, state, loose, 1.0)
    ca, cb = cloned_indices(cloud, a), cloned_indices(cloud, b)
    assert ca and ca <= cb and len(cb) > len(ca)


def test_split_properties(rng):
    cloud = make_cloud(rng, 4, log_scale=-1.0, opacity=0.7)
    state = with_stats(cloud, np.array([1.0, 0.0, 1.0, 0.0]), 0.0)
    state.exp_avg["means"][:] = 3.0
    new, new_state = densify_and_prune(cloud, state, DensifyConfig(), 1.0, np.random.default_rng(5))
    # parents 0 and 2 replaced by two children each
    assert len(new) == 6
    np.testing.assert_array_equal(new.means[:2], cloud.means[[1, 3]])
    children = new.subset(np.arange(2, 6))
    parents = cloud.subset([0, 0, 2, 2])
    np.testing.assert_allclose(children.opacities, parents.opacities)
    np.testing.assert_allclose(children.log_scales, parents.log_scales - np.log(1.6))
    R = quaternion_to_rotation(parents.rotations)
    local = np.einsum("nji,nj->ni", R, children.means - parents.means) / parents.scales
    assert np.all(np.linalg.norm(local, axis=1) <= 1 + 1e-9)
    # surviving Gaussians keep their moments, new ones start from zero
    np.testing.assert_array_equal(new_state.exp_avg["means"][:2], 3.0)
    np.testing.assert_array_equal(new_state.exp_avg["means"][2:], 0.0)
    assert not new_state.grad_count.any()


def test_clone_or_split_boundary(rng):
    cloud = make_cloud(rng, 2)
    extent = 10.0
    cloud.log_scales[0] = np.log(0.5 * 1e-3 * extent)
    cloud.log_scales[1] = np.log(2.0 * 1e-3 * extent)
    state = with_stats(cloud, 1.0, 0.0)
    new, _ = densify_and_prune(cloud, state, DensifyConfig(), extent)
    # Gaussian 0 is kept and cloned, Gaussian 1 becomes two children
    assert len(new) == 4
    np.testing.assert_array_equal(new.means[0], cloud.means[0])
    np.testing.assert_array_equal(new.means[1], cloud.means[0])


def test_accumulate_stats(rng):
    state = TrainState.for_cloud(make_cloud(rng, 3))
    g = GradBuffers.zeros(3)
    g.visible[:] = [True, False, True]
    g.screen_grad[:] = [1.0, 5.0, 2.0]
    g.elevation[:] = [0.0, np.nan, np.pi / 3]
    accumulate_stats(state, g)
    accumulate_stats(state, g)
    np.testing.assert_allclose(state.grad_accum, [2.0, 0.0, 4.0])
    np.testing.assert_allclose(state.elevation_accum, [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(state.grad_count, [2, 0, 2])


def test_reset_opacity(rng):
    cloud = make_cloud(rng, 3)
    cloud.raw_opacities[:] = logit(np.array([0.9, 0.005, 0.5]))
    state = TrainState.for_cloud(cloud)
    state.exp_avg["raw_opacities"][:] = 1.0
    cloud, state = reset_opacity(cloud, state)
    np.testing.assert_allclose(cloud.opacities, [0.01, 0.005, 0.01], rtol=1e-9)
    assert not state.exp_avg["raw_opacities"].any()
