import math

import numpy as np
import pytest

from helixlpd.errors import NumericalError
from helixlpd.geometry import DetectorSpec, VolumeSpec, build_geometry
from helixlpd.projector import Sinogram, forward_project
from helixlpd.recon.config import HuberConfig
from helixlpd.recon.fbp import check_window, fbp_reconstruct, hann_ramp
from helixlpd.recon.huber import (
    huber, huber_penalty, huber_penalty_gradient, huber_reconstruct, huber_solve, spatial_gradient,
    spatial_gradient_adjoint,
)
from helixlpd.simulation import DoseModel, hu_to_mu, random_phantom, simulate_data

MU0 = 0.0192


def cylinder_case():
    from helixlpd.experiment import DeskConfig, desk_scan_geometry, desk_volume
    from helixlpd.simulation import Ellipsoid, PhantomSpec, make_phantom, voxel_centers

    cfg = DeskConfig()
    vol = desk_volume(cfg, 30)
    geom, _ = desk_scan_geometry(cfg, vol)
    cyl = Ellipsoid((0.0, 0.0, 15.0), (40.0, 40.0, 1000.0), 0.0, 1000.0)
    mu = hu_to_mu(make_phantom(PhantomSpec(0, vol, (cyl,), -1000.0)))
    z, y, x = voxel_centers(vol)
    central = np.broadcast_to((x**2 + y**2 <= 20.0**2) & (np.abs(z - 14.5) <= 5.0), vol.shape)
    return geom, vol, mu, central


def test_fbp_cylinder_central_mean():
    geom, vol, mu, central = cylinder_case()
    rec = fbp_reconstruct(forward_project(mu, geom), geom, vol)
    assert abs(rec.data[central].mean() / MU0 - 1) <= 0.10


def test_fbp_zero_data():
    geom, vol, _, _ = cylinder_case()
    rec = fbp_reconstruct(Sinogram("", np.zeros(geom.sinogram_shape)), geom, vol)
    assert not rec.data.any()


def test_fbp_window_rejects_large_pitch():
    det = DetectorSpec(32, 4, 2.0, 1.0)
    geom = build_geometry(2 * math.pi / 32, 40.0, 2.0, 100.0, 200.0, det)
    with pytest.raises(ValueError):
        check_window(geom)
    vol = VolumeSpec(8, 8, 8, (1.0, 1.0, 1.0), 0.0)
    with pytest.raises(ValueError):
        fbp_reconstruct(Sinogram("", np.zeros(geom.sinogram_shape)), geom, vol)


def test_hann_ramp_response():
    # spectrum ~ |f| cos^2(pi f / (2 * 0.45)) below the cut, zero above; the
    # spatial Ram-Lak construction leaves a small positive DC term
    spacing = 0.5
    r = hann_ramp(64, spacing, 0.45)
    f = np.abs(np.fft.fftfreq(r.size))
    rel = 2 * f  # fraction of Nyquist
    ideal = f / spacing * np.where(rel <= 0.45, np.cos(np.pi * rel / 0.9) ** 2, 0.0)
    assert np.all(r[rel > 0.45] == 0)
    low = (rel > 0) & (rel < 0.4)
    assert np.all(np.abs(r[low] - ideal[low]) <= 0.03 * ideal[low])
    assert 0 < r[0] < ideal[1]
    with pytest.raises(ValueError):
        hann_ramp(64, spacing, 0.0)


def test_huber_branches():
    theta = 0.3
    assert huber(theta, theta) == theta / 2
    assert theta**2 / (2 * theta) == theta - theta / 2
    assert huber(0.0, theta) == 0.0
    assert huber(2.0, theta) == 2.0 - theta / 2
    t = np.linspace(0, 1, 101)
    assert np.all(np.diff(huber(t, theta)) >= 0)


def test_gradient_adjoint():
    rng = np.random.default_rng(0)
    spacing = (2.0, 1.5, 0.7)
    f = rng.standard_normal((5, 6, 7))
    p = rng.standard_normal((3, 5, 6, 7))
    lhs = np.vdot(spatial_gradient(f, spacing), p)
    rhs = np.vdot(f, spatial_gradient_adjoint(p, spacing))
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)


def test_gradient_forward_difference():
    f = np.zeros((3, 3, 3))
    f[1, 1, 1] = 2.0
    g = spatial_gradient(f, (1.0, 1.0, 0.5))
    assert g[0, 0, 1, 1] == 2.0 / 0.5 and g[0, 1, 1, 1] == -2.0 / 0.5
    assert g[2, 1, 1, 0] == 2.0 and not g[:, 2, :, :][0].any()


@pytest.mark.parametrize("seed", range(3))
def test_huber_penalty_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    spacing = (2.0, 2.0, 1.0)
    theta = 0.05
    f = rng.standard_normal((4, 5, 6)) * 0.1
    g = huber_penalty_gradient(f, spacing, theta)
    h = 1e-6
    fd = np.zeros_like(f)
    for idx in np.ndindex(f.shape):
        e = np.zeros_like(f)
        e[idx] = h
        fd[idx] = (huber_penalty(f + e, spacing, theta) - huber_penalty(f - e, spacing, theta)) / (2 * h)
    assert np.linalg.norm(fd - g) <= 1e-6 * np.linalg.norm(g)


def _small_scan(seed, tiny):
    geom, vol, _ = tiny
    mu = hu_to_mu(random_phantom(seed, vol))
    return geom, vol, mu, simulate_data(mu, geom, DoseModel(1e4, seed))


@pytest.mark.parametrize("seed", range(5))
def test_huber_objective_nonincreasing(seed, tiny):
    geom, vol, _, g = _small_scan(seed, tiny)
    res = huber_solve(g, geom, vol, HuberConfig(lam=0.15, theta=0.0012, iterations=20))
    j = np.array(res.objective)
    assert len(j) == 21
    assert np.all(np.diff(j) <= 1e-12 * np.abs(j[:-1]))


def test_least_squares_limit_monotone(tiny):
    geom, vol, _, g = _small_scan(3, tiny)
    res = huber_solve(g, geom, vol, HuberConfig(lam=0.0, iterations=30))
    assert np.all(np.diff(res.objective) <= 0)
    assert res.objective[-1] < 0.1 * res.objective[0]


def test_huber_improves_on_zero(tiny):
    geom, vol, mu, g = _small_scan(4, tiny)
    out = huber_reconstruct(g, geom, vol)
    assert np.linalg.norm(out.data - mu.data) < np.linalg.norm(mu.data)


def test_huber_rejects_bad_data(tiny):
    geom, vol, _ = tiny
    bad = Sinogram.__new__(Sinogram)
    bad.geom_ref, bad.data = "", np.full(geom.sinogram_shape, np.nan)
    with pytest.raises(ValueError):
        huber_solve(bad, geom, vol)


def test_huber_divergence_guard(tiny, monkeypatch):
    from helixlpd.recon import huber as mod

    geom, vol, _, g = _small_scan(5, tiny)
    # a Lipschitz bound far too small makes every step overshoot
    monkeypatch.setattr(mod._Problem, "lipschitz", lambda self, it: 1e-6)
    with pytest.raises(NumericalError):
        huber_solve(g, geom, vol, HuberConfig(iterations=10))
