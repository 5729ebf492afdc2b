"""Finite-difference verification of the analytic backward pass.

Everything runs in double precision. Each parameter entry is perturbed by a
relative central difference; a perturbation that changes which pixels a
splat covers (or where compositing stops) is retried with a smaller step,
since the 3-sigma cutoff makes the loss discontinuous there. The same
holds for a step that flips the sign of a pixel's L1 residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from omnisplat.backward import backward
from omnisplat.core import CameraPose, GaussianCloud, logit
from omnisplat.optimizer import photometric_loss
from omnisplat.rasterizer import render

DEFAULT_STEP = 1e-4
MIN_STEP = 1e-9
TOLERANCE = 1e-3
N_TERMS = 12


@dataclass
class GroupError:
    name: str
    rel_error: float
    n_entries: int
    max_abs: float


@dataclass
class GradcheckReport:
    groups: list = field(default_factory=list)
    tolerance: float = TOLERANCE
    n_shrunk: int = 0

    @property
    def worst(self) -> float:
        return max((g.rel_error for g in self.groups), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def rel_error(analytic, numeric, floor=1e-12) -> float:
    """Norm of the difference relative to the larger of the two norms."""
    a = np.ravel(analytic)
    b = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def random_scene(rng, n_gaussians, width=64, max_elevation_deg=70.0):
    """Double-precision scene sized so splats cover a few pixels at ``width``."""
    n = n_gaussians
    phi = rng.uniform(-np.pi, np.pi, n)
    theta = rng.uniform(-1, 1, n) * np.deg2rad(max_elevation_deg)
    dirs = np.stack([np.cos(theta) * np.sin(phi), -np.sin(theta), np.cos(theta) * np.cos(phi)], axis=1)
    # one pixel is ~2 pi / width radians, so scales track the pixel footprint
    dist = rng.uniform(2.0, 4.0, (n, 1))
    pix = 2 * np.pi / width * dist
    cloud = GaussianCloud(
        means=dirs * dist,
        rotations=rng.standard_normal((n, 4)),
        log_scales=np.log(pix * rng.uniform(1.0, 3.0, (n, 3))),
        raw_opacities=logit(rng.uniform(0.3, 0.9, n)),
        colors=rng.uniform(0.1, 0.9, (n, 3)),
    ).astype(np.float64)
    # a generic rotation; with the identity every (1, 2) entry of dL/dT is
    # multiplied by a Jacobian entry that is identically zero
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    camera = CameraPose(q, np.zeros(3), width, width // 2)
    cloud.means = cloud.means @ q
    target = rng.uniform(0.0, 1.0, (width // 2, width, 3))
    return cloud, camera, target


def _loss(cloud, camera, target, lambda_ssim):
    """Loss plus a signature of its piecewise structure.

    The signature covers the per-pixel hit counts, where compositing
    stopped, and the sign pattern inside the L1 term.
    """
    result = render(cloud, camera)
    loss, _ = photometric_loss(result.image, target, lambda_ssim)
    return loss, (result.n_hit, result.n_contrib, np.sign(result.image - target))


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_difference(cloud, camera, target, lambda_ssim=0.2, step=DEFAULT_STEP):
    """Central differences of the loss for every parameter entry.

    Returns (dict of gradients, number of entries that needed a smaller step).
    """
    _, base = _loss(cloud, camera, target, lambda_ssim)
    grads = {}
    shrunk = 0
    for name in GaussianCloud.PARAMS:
        param = getattr(cloud, name)
        g = np.zeros(param.shape)
        for idx in np.ndindex(param.shape):
            x0 = param[idx]
            h = step * max(1.0, abs(x0))
            while True:
                vals = []
                same = True
                for sgn in (1.0, -1.0):
                    probe = cloud.copy()
                    getattr(probe, name)[idx] = x0 + sgn * h
                    loss, sig = _loss(probe, camera, target, lambda_ssim)
                    vals.append(loss)
                    same &= _same(sig, base)
                if same or h < MIN_STEP:
                    break
                h *= 0.1
                shrunk += 1
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        grads[name] = g
    return grads, shrunk


def analytic(cloud, camera, target, lambda_ssim=0.2, eq_signs=None):
    result = render(cloud, camera)
    _, dimg = photometric_loss(result.image, target, lambda_ssim)
    g = backward(cloud, camera, dimg, result, eq_signs=eq_signs)
    return {name: g.param(name) for name in GaussianCloud.PARAMS}


def compare(grads_a, grads_fd, tolerance=TOLERANCE, n_shrunk=0) -> GradcheckReport:
    report = GradcheckReport(tolerance=tolerance, n_shrunk=n_shrunk)
    for name in GaussianCloud.PARAMS:
        a, b = grads_a[name], grads_fd[name]
        report.groups.append(GroupError(name, rel_error(a, b), a.size, float(np.abs(b).max(initial=0.0))))
    return report


def sign_mutations():
    """Every single-term sign flip of the 2D covariance to T gradient."""
    for k in range(N_TERMS):
        s = np.ones(N_TERMS)
        s[k] = -1.0
        yield k, s.reshape(2, 3, 2)


@dataclass
class SuiteResult:
    reports: list
    caught: dict

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    def worst_by_group(self) -> dict:
        out = {}
        for r in self.reports:
            for g in r.groups:
                out[g.name] = max(out.get(g.name, 0.0), g.rel_error)
        return out


def run_suite(seed=0, n_scenes=20, n_gaussians=10, width=64, lambda_ssim=0.2, tolerance=TOLERANCE,
              eq_signs=None, mutations=False):
    """Gradcheck over ``n_scenes`` random scenes.

    ``eq_signs`` injects a fixed mutation into the analytic gradient.
    With ``mutations`` every single sign flip is also tried against the
    same finite differences; ``caught[k]`` tells whether flip ``k`` made
    some scene fail.
    """
    rng = np.random.default_rng(seed)
    reports = []
    caught = {k: False for k in range(N_TERMS)} if mutations else {}
    for _ in range(n_scenes):
        cloud, camera, target = random_scene(rng, n_gaussians, width)
        fd, shrunk = finite_difference(cloud, camera, target, lambda_ssim)
        reports.append(compare(analytic(cloud, camera, target, lambda_ssim, eq_signs), fd, tolerance, shrunk))
        for k, signs in sign_mutations() if mutations else ():
            if not caught[k]:
                mutated = compare(analytic(cloud, camera, target, lambda_ssim, signs), fd, tolerance)
                caught[k] = not mutated.passed
    return SuiteResult(reports, caught)
