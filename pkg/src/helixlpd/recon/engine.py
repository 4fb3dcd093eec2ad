"""Unrolled invertible primal-dual iterations over turn-split operators.

The state is one primal volume ``f`` (the working slab range) and one dual
chunk ``u[j]`` per turn. Half-step ``(i, j, dual)`` adds
``Gamma_i(B_j f[slab_j], g_j)`` to ``u[j]``; half-step ``(i, j, primal)`` adds
``Lambda_i(B_j^* u[j])`` to ``f[slab_j]``. Both are additive couplings, so the
input of every half-step can be recovered from its output and backprop only
needs one block's activations at a time.

Everything here works in network units: images divided by
``params.image_scale`` and operators divided by ``params.op_norm``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import NumericalError
from ..nn import ActivationStore, NetworkParams, conv_block_backward, conv_block_forward
from ..projector import RayTransform


@dataclass
class TurnBlock:
    """Restricted operator of one turn, its slab inside the working volume and
    its (scaled) data chunk."""

    op: RayTransform
    lo: int
    hi: int
    data: torch.Tensor


class SplitProblem:
    """The turn blocks of one reconstruction task plus the working volume shape."""

    def __init__(self, blocks: list[TurnBlock], vol_shape, op_norm: float):
        if not blocks:
            raise ValueError("need at least one turn")
        for b in blocks:
            if not 0 <= b.lo < b.hi <= vol_shape[0]:
                raise ValueError(f"slab [{b.lo}, {b.hi}) outside working volume of {vol_shape[0]} slices")
            if b.op.vol_shape != (b.hi - b.lo, *vol_shape[1:]):
                raise ValueError("operator does not match its slab")
            if tuple(b.data.shape) != b.op.data_shape:
                raise ValueError("data chunk does not match its operator")
        self.blocks = blocks
        self.vol_shape = tuple(vol_shape)
        self.op_norm = float(op_norm)

    @property
    def num_turns(self) -> int:
        return len(self.blocks)

    def forward(self, j: int, f: torch.Tensor) -> torch.Tensor:
        """B_j applied to slab j of the working volume ``f``."""
        b = self.blocks[j]
        return self.forward_slab(j, f[b.lo:b.hi])

    def forward_slab(self, j: int, x: torch.Tensor) -> torch.Tensor:
        out = self.blocks[j].op.forward(x.contiguous().numpy()) / self.op_norm
        return torch.from_numpy(out)

    def adjoint(self, j: int, u: torch.Tensor) -> torch.Tensor:
        out = self.blocks[j].op.adjoint(u.numpy()) / self.op_norm
        return torch.from_numpy(out)

    def zero_state(self, dtype):
        f = torch.zeros(self.vol_shape, dtype=dtype)
        u = [torch.zeros(b.op.data_shape, dtype=dtype) for b in self.blocks]
        return f, u


def _half_steps(iterations: int, turns: int):
    for i in range(iterations):
        for j in range(turns):
            yield i, j, "dual"
            yield i, j, "primal"


def _check_finite(t: torch.Tensor, where):
    if not torch.isfinite(t).all():
        i, j, kind = where
        raise NumericalError(f"non-finite values at iteration {i}, turn {j} ({kind} update)")


def _dual_input(problem: SplitProblem, j: int, f):
    return torch.stack([problem.forward(j, f), problem.blocks[j].data])


def _apply(params, problem, f, u, step, sign, store=None, key=None):
    """Apply (sign=+1) or undo (sign=-1) one half-step in place; return its block input."""
    i, j, kind = step
    b = problem.blocks[j]
    if kind == "dual":
        x = _dual_input(problem, j, f)
        out = conv_block_forward(params.dual[i], x, store, key)
        u[j].add_(out[0], alpha=sign)
    else:
        x = problem.adjoint(j, u[j])[None]
        out = conv_block_forward(params.primal[i], x, store, key)
        f[b.lo:b.hi].add_(out[0], alpha=sign)
    return x


def run_forward(params: NetworkParams, problem: SplitProblem, f0, u0, record: list | None = None):
    """Apply all 2M x N_s half-steps to copies of ``(f0, u0)``.

    With ``record`` given, the state before every half-step is appended to it
    (used to monitor drift of the recomputed inputs during backprop).
    """
    f = f0.clone()
    u = [c.clone() for c in u0]
    for step in _half_steps(params.iterations, problem.num_turns):
        if record is not None:
            record.append((f.clone(), [c.clone() for c in u]))
        _apply(params, problem, f, u, step, +1)
        _check_finite(f if step[2] == "primal" else u[step[1]], step)
    return f, u


def run_inverse(params: NetworkParams, problem: SplitProblem, f, u):
    """Undo :func:`run_forward`: recover ``(f0, u0)`` from the final state."""
    f = f.clone()
    u = [c.clone() for c in u]
    for step in reversed(list(_half_steps(params.iterations, problem.num_turns))):
        _apply(params, problem, f, u, step, -1)
        _check_finite(f if step[2] == "primal" else u[step[1]], step)
    return f, u


def _relative_drift(a, b):
    den = max(float(b.abs().max()), 1e-30)
    return float((a - b).abs().max()) / den


def invertible_backward(
    params: NetworkParams,
    problem: SplitProblem,
    f_final,
    u_final,
    grad_f,
    store: ActivationStore | None = None,
    record: list | None = None,
    drift_tol: float = 1e-4,
):
    """Parameter gradients of a loss on the final primal state.

    Walks the half-steps in reverse. Each one is first undone (recovering its
    input from its output), then its block is re-run with activations kept in
    ``store`` and immediately backpropagated. At most one block's activations
    are alive at any time.

    Returns ``(grads, grad_f0, grad_u0)`` with ``grads`` ordered like
    ``params.tensors()``.
    """
    store = store if store is not None else ActivationStore()
    f = f_final.clone()
    u = [c.clone() for c in u_final]
    gf = grad_f.clone()
    gu = [torch.zeros_like(c) for c in u]
    grads = params.zero_grads()
    steps = list(_half_steps(params.iterations, problem.num_turns))
    for n in range(len(steps) - 1, -1, -1):
        i, j, kind = step = steps[n]
        b = problem.blocks[j]
        key = step
        x = _apply(params, problem, f, u, step, -1, store, key)
        _check_finite(f if kind == "primal" else u[j], step)
        if record is not None:
            rf, ru = record[n]
            drift = max(_relative_drift(f, rf), max(_relative_drift(a, c) for a, c in zip(u, ru)))
            if drift > drift_tol:
                raise NumericalError(f"recomputed input drifted by {drift:.2e} at iteration {i}, turn {j} ({kind})")
        if kind == "primal":
            gx, pg = conv_block_backward(params.primal[i], x, gf[b.lo:b.hi][None], store, key)
            gu[j] += problem.forward_slab(j, gx[0])
            offset = (2 * i + 1) * 6
        else:
            gx, pg = conv_block_backward(params.dual[i], x, gu[j][None], store, key)
            gf[b.lo:b.hi] += problem.adjoint(j, gx[0])
            offset = 2 * i * 6
        for k, g in enumerate(pg):
            grads[offset + k] += g
    return grads, gf, gu


def stored_backward(params: NetworkParams, problem: SplitProblem, f0, u0, grad_fn, store: ActivationStore | None = None):
    """Reference backprop that keeps every block's input and activations.

    ``grad_fn(f_final)`` returns the loss gradient. Returns
    ``(f_final, grads, grad_f0, grad_u0)``.
    """
    store = store if store is not None else ActivationStore()
    f = f0.clone()
    u = [c.clone() for c in u0]
    steps = list(_half_steps(params.iterations, problem.num_turns))
    inputs = []
    for step in steps:
        x = _apply(params, problem, f, u, step, +1, store, step)
        store.put(("input", step), (x,))
        inputs.append(x)
    gf = grad_fn(f).clone()
    gu = [torch.zeros_like(c) for c in u]
    grads = params.zero_grads()
    for step in reversed(steps):
        i, j, kind = step
        b = problem.blocks[j]
        (x,) = store.pop(("input", step))
        if kind == "primal":
            gx, pg = conv_block_backward(params.primal[i], x, gf[b.lo:b.hi][None], store, step)
            gu[j] += problem.forward_slab(j, gx[0])
            offset = (2 * i + 1) * 6
        else:
            gx, pg = conv_block_backward(params.dual[i], x, gu[j][None], store, step)
            gf[b.lo:b.hi] += problem.adjoint(j, gx[0])
            offset = 2 * i * 6
        for k, g in enumerate(pg):
            grads[offset + k] += g
    return f, grads, gf, gu


def as_tensor(a: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)
