"""Built-in consistency checks on tiny instances (run by ``helixlpd selftest``)."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import DetectorSpec, VolumeSpec, build_geometry, partition_turns
from .nn import NetworkParams, conv_block_backward, conv_block_forward
from .projector import assemble_matrix, ray_transform, turn_operator
from .recon.engine import SplitProblem, TurnBlock, invertible_backward, run_forward, run_inverse, stored_backward


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    seconds: float


def _tiny_case(seed=0):
    det = DetectorSpec(12, 4, 2.4, 1.5)
    vol = VolumeSpec(8, 8, 12, (1.5, 1.5, 1.0), 0.0)
    geom = build_geometry(2 * math.pi / 16, 3.0, 2.0, 40.0, 80.0, det, z_start=2.5)
    part = partition_turns(geom, vol, 12)
    return geom, vol, part


def _adjoint_error(op, rng, fault=False):
    f = rng.standard_normal(op.vol_shape)
    u = rng.standard_normal(op.data_shape)
    af = op.forward(f)
    atu = op.adjoint(u)
    if fault:
        atu = atu * (1 + 1e-6)
    return abs(np.vdot(af, u) - np.vdot(f, atu)) / (np.linalg.norm(af) * np.linalg.norm(u))


def check_adjoint(fault=False):
    geom, vol, part = _tiny_case()
    rng = np.random.default_rng(1)
    ops = [ray_transform(geom, vol)] + [turn_operator(geom, part, j) for j in range(part.num_turns)]
    return max(_adjoint_error(op, rng, fault) for op in ops), 1e-12


def check_dense_oracle():
    geom, vol, part = _tiny_case()
    rng = np.random.default_rng(2)
    dense = assemble_matrix(geom, vol, (0, geom.num_angles)).toarray()
    f = rng.standard_normal(vol.shape)
    ref = dense @ f.ravel()
    out = ray_transform(geom, vol).forward(f).ravel()
    err = np.linalg.norm(out - ref) / np.linalg.norm(ref)
    a, b = part.turn_ranges[0]
    lo, hi = part.subvolume_ranges[0]
    plane = vol.height * vol.width
    sub = dense[a * 48:b * 48, lo * plane:hi * plane]
    x = rng.standard_normal((hi - lo, vol.height, vol.width))
    ref = sub @ x.ravel()
    out = turn_operator(geom, part, 0).forward(x).ravel()
    return max(err, np.linalg.norm(out - ref) / np.linalg.norm(ref)), 1e-12


def _problem(dtype):
    geom, vol, part = _tiny_case()
    rng = np.random.default_rng(3)
    blocks = []
    for j in range(part.num_turns):
        a, b = part.turn_ranges[j]
        lo, hi = part.subvolume_ranges[j]
        data = torch.from_numpy(rng.standard_normal((b - a, 4, 12))).to(dtype)
        blocks.append(TurnBlock(turn_operator(geom, part, j), lo, hi, data))
    return SplitProblem(blocks, vol.shape, 4.0)


def check_round_trip():
    dtype = torch.float64
    params = NetworkParams.initialize(2, seed=5, dtype=dtype, zero_last=False)
    problem = _problem(dtype)
    g = torch.Generator().manual_seed(0)
    f0 = torch.randn(problem.vol_shape, generator=g, dtype=dtype)
    u0 = [torch.randn(b.op.data_shape, generator=g, dtype=dtype) for b in problem.blocks]
    f, u = run_forward(params, problem, f0, u0)
    fr, ur = run_inverse(params, problem, f, u)
    err = float((fr - f0).norm() / f0.norm())
    err = max(err, max(float((a - b).norm() / b.norm()) for a, b in zip(ur, u0)))
    return err, 1e-10


def check_gradients():
    dtype = torch.float64
    params = NetworkParams.initialize(2, seed=6, dtype=dtype, zero_last=False)
    problem = _problem(dtype)
    f0, u0 = problem.zero_state(dtype)
    target = torch.ones(problem.vol_shape, dtype=dtype)

    def loss_grad(f):
        return 2 * (f - target) / f.numel()

    f, u = run_forward(params, problem, f0, u0)
    inv, _, _ = invertible_backward(params, problem, f, u, loss_grad(f))
    _, ref, _, _ = stored_backward(params, problem, f0, u0, loss_grad)
    num = sum(float((a - b).norm() ** 2) for a, b in zip(inv, ref))
    den = sum(float(b.norm() ** 2) for b in ref)
    return math.sqrt(num / den), 1e-10


def check_block_gradient():
    dtype = torch.float64
    p = NetworkParams.initialize(1, seed=7, dtype=dtype, zero_last=False).dual[0]
    x = torch.randn(2, 4, 5, 6, dtype=dtype, generator=torch.Generator().manual_seed(1))
    up = torch.randn(1, 4, 5, 6, dtype=dtype, generator=torch.Generator().manual_seed(2))
    _, grads = conv_block_backward(p, x, up)
    w = p.weights[1]
    idx = (3, 5, 1, 2, 0)
    h = 1e-5
    old = float(w[idx])
    w[idx] = old + h
    plus = float((conv_block_forward(p, x) * up).sum())
    w[idx] = old - h
    minus = float((conv_block_forward(p, x) * up).sum())
    w[idx] = old
    fd = (plus - minus) / (2 * h)
    an = float(grads[2][idx])
    return abs(fd - an) / max(abs(an), 1e-12), 1e-6


CHECKS = {
    "adjoint": check_adjoint,
    "dense_oracle": check_dense_oracle,
    "invertibility": check_round_trip,
    "invertible_gradients": check_gradients,
    "block_gradient": check_block_gradient,
}


def run_selftest(fault: str | None = None, log=print) -> list[CheckResult]:
    """Run all checks; ``fault='adjoint'`` perturbs the adjoint to show the
    check catches it."""
    out = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        value, tol = fn(fault=True) if (fault == name) else fn()
        res = CheckResult(name, bool(value <= tol), float(value), tol, time.perf_counter() - t0)
        log(f"{'PASS' if res.passed else 'FAIL'}  {name:22s} {value:.3e} (tol {tol:.0e})  {res.seconds:.2f}s")
        out.append(res)
    return out
