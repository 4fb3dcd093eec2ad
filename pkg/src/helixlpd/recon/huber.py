"""Variational reconstruction with a Huber-smoothed total-variation penalty.

Minimizes ``0.5 ||A f - g||^2 + lam * sum H_theta(|grad f|)`` with Nesterov's
accelerated gradient. ``grad`` is the forward difference in physical units
(zero across the last face of each axis), ``|.|`` the voxelwise Euclidean
norm of its three components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError
from ..geometry import HelicalGeometry, VolumeSpec
from ..projector import Sinogram, Volume, back_project, forward_project
from .config import HuberConfig
from .fbp import fbp_reconstruct


def huber(t, theta: float):
    """H_theta(t): t^2/(2 theta) for t <= theta, t - theta/2 above."""
    t = np.asarray(t, dtype=np.float64)
    return np.where(t <= theta, t * t / (2.0 * theta), t - theta / 2.0)


def spatial_gradient(f: np.ndarray, spacing) -> np.ndarray:
    """Forward differences along (z, y, x), shape (3, *f.shape)."""
    dx, dy, dz = spacing
    out = np.zeros((3,) + f.shape)
    out[0, :-1] = (f[1:] - f[:-1]) / dz
    out[1, :, :-1] = (f[:, 1:] - f[:, :-1]) / dy
    out[2, :, :, :-1] = (f[:, :, 1:] - f[:, :, :-1]) / dx
    return out


def spatial_gradient_adjoint(p: np.ndarray, spacing) -> np.ndarray:
    """Exact adjoint of :func:`spatial_gradient` (the negative divergence)."""
    dx, dy, dz = spacing
    out = np.zeros(p.shape[1:])
    for axis, d in zip(range(3), (dz, dy, dx)):
        q = np.moveaxis(p[axis], axis, 0)
        o = np.moveaxis(out, axis, 0)
        o[:-1] -= q[:-1] / d
        o[1:] += q[:-1] / d
    return out


def huber_penalty(f: np.ndarray, spacing, theta: float) -> float:
    mag = np.sqrt((spatial_gradient(f, spacing) ** 2).sum(axis=0))
    return float(huber(mag, theta).sum())


def huber_penalty_gradient(f: np.ndarray, spacing, theta: float) -> np.ndarray:
    grad = spatial_gradient(f, spacing)
    mag = np.sqrt((grad ** 2).sum(axis=0))
    return spatial_gradient_adjoint(grad / np.maximum(mag, theta), spacing)


@dataclass
class HuberResult:
    volume: Volume
    objective: list[float] = field(default_factory=list)
    restarts: int = 0
    lipschitz: float = 0.0


class _Problem:
    def __init__(self, g, geom, vol, lam, theta):
        self.g = g.data.astype(np.float64)
        self.geom, self.vol = geom, vol
        self.lam, self.theta = lam, theta
        self.spacing = vol.voxel_size

    def A(self, f):
        return forward_project(Volume(self.vol, f), self.geom).data

    def At(self, r):
        return back_project(Sinogram(self.geom.geometry_id, r), self.geom, self.vol).data

    def objective(self, f) -> float:
        r = self.A(f) - self.g
        return 0.5 * float((r * r).sum()) + self.lam * huber_penalty(f, self.spacing, self.theta)

    def gradient(self, f):
        g = self.At(self.A(f) - self.g)
        if self.lam:
            g += self.lam * huber_penalty_gradient(f, self.spacing, self.theta)
        return g

    def lipschitz(self, iterations: int) -> float:
        x = np.random.default_rng(0).standard_normal(self.vol.shape)
        x /= np.linalg.norm(x)
        s = 0.0
        for _ in range(iterations):
            y = self.At(self.A(x))
            s = float(np.linalg.norm(y))
            if s == 0:
                break
            x = y / s
        reg = self.lam * 12.0 / (self.theta * min(self.spacing) ** 2) if self.lam else 0.0
        return 1.05 * s + reg


def huber_solve(
    g: Sinogram, geom: HelicalGeometry, vol: VolumeSpec, cfg: HuberConfig = HuberConfig(),
    f0: np.ndarray | None = None,
) -> HuberResult:
    """Nesterov iterations with step 1/L and restart on objective increase.

    When an accelerated step would increase the objective it is replaced by a
    plain gradient step from the current iterate and the momentum is reset.
    Three consecutive increases even after that fallback abort the solve.
    """
    if not np.all(np.isfinite(g.data)):
        raise ValueError("data contains non-finite values")
    if g.data.shape != geom.sinogram_shape:
        raise ValueError(f"sinogram shape {g.data.shape} != geometry {geom.sinogram_shape}")
    prob = _Problem(g, geom, vol, cfg.lam, cfg.theta)
    if f0 is None:
        if cfg.init_mode == "fbp":
            f0 = fbp_reconstruct(g, geom, vol).data
        else:
            f0 = np.zeros(vol.shape)
    x = np.asarray(f0, dtype=np.float64).copy()
    step = 1.0 / prob.lipschitz(cfg.power_iterations)
    y, t = x.copy(), 1.0
    jx = prob.objective(x)
    history = [jx]
    restarts = increases = 0
    for _ in range(cfg.iterations):
        x_new = y - step * prob.gradient(y)
        j_new = prob.objective(x_new)
        if j_new > jx:
            restarts += 1
            x_new = x - step * prob.gradient(x)
            j_new = prob.objective(x_new)
            t = 1.0
            y = x_new.copy()
            increases = increases + 1 if j_new > jx else 0
            if increases >= 3:
                raise NumericalError("Huber solver diverged: objective increased 3 times in a row")
        else:
            increases = 0
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        if not np.isfinite(j_new):
            raise NumericalError("Huber solver produced a non-finite objective")
        x, jx = x_new, j_new
        history.append(jx)
    return HuberResult(Volume(vol, x.astype(np.float32)), history, restarts, 1.0 / step)


def huber_reconstruct(
    g: Sinogram, geom: HelicalGeometry, vol: VolumeSpec, lam: float = 0.15, theta: float = 0.0012,
    iters: int = 20, init_mode: str = "zeros",
) -> Volume:
    return huber_solve(g, geom, vol, HuberConfig(lam, theta, iters, init_mode)).volume
