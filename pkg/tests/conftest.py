import numpy as np
import pytest

from omnisplat.core import CameraPose, GaussianCloud, logit


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_scene(rng, n, width=64, scale=(0.1, 0.4), radius=(1.0, 3.0), opacity=(0.2, 0.8), dtype=np.float64):
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    cloud = GaussianCloud(
        means=d * rng.uniform(*radius, (n, 1)),
        rotations=rng.standard_normal((n, 4)),
        log_scales=np.log(rng.uniform(*scale, (n, 3))),
        raw_opacities=logit(rng.uniform(*opacity, n)),
        colors=rng.uniform(0.05, 0.95, (n, 3)),
    ).astype(dtype)
    cam = CameraPose(random_rotation(rng), rng.uniform(-0.2, 0.2, 3), width, width // 2)
    return cloud, cam


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
