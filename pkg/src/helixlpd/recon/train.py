"""Supervised training of the split network on windows of consecutive turns."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import torch

from .. import rng
from ..errors import DataError, NumericalError
from ..geometry import HelicalGeometry, TurnPartition
from ..nn import ActivationStore, AdamConfig, AdamState, NetworkParams, adam_step
from ..projector import Sinogram, Volume, turn_operator
from ..simulation import MU_WATER
from .config import ReconConfig, TrainConfig
from .engine import as_tensor, invertible_backward, run_forward
from .lpd import _DTYPES, window_init, window_problem

_SAMPLE_STREAM = 0x7A1


@dataclass
class TrainingScan:
    """Ground truth (mm^-1) and data of one scan with its turn partition."""

    truth: Volume
    sinogram: Sinogram
    geometry: HelicalGeometry
    partition: TurnPartition

    def __post_init__(self):
        if self.sinogram.data.shape != self.geometry.sinogram_shape:
            raise DataError("sinogram does not match its geometry")
        if self.partition.volume is None or self.partition.volume.shape != self.truth.spec.shape:
            raise DataError("partition volume does not match the ground truth")


@dataclass
class TrainResult:
    params: NetworkParams
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0
    peak_activation_bytes: int = 0


def sample_window(seed: int, index: int, turn_counts: list[int], window: int) -> tuple[int, int]:
    """Scan index and first turn ``q`` of training sample ``index``: the scan
    is uniform over the dataset, ``q`` uniform over ``0..N_s - window``."""
    u0, u1 = rng.uniform_pair(seed, index, _SAMPLE_STREAM)
    scan = min(int(u0 * len(turn_counts)), len(turn_counts) - 1)
    starts = turn_counts[scan] - window + 1
    return scan, min(int(u1 * starts), starts - 1)


def estimate_op_norm(scan: TrainingScan, iterations: int = 20) -> float:
    """Largest spectral norm over the turn operators of a scan."""
    return max(turn_operator(scan.geometry, scan.partition, j).norm(iterations) for j in range(scan.partition.num_turns))


class WindowSampler:
    """Builds (problem, init, target) for a (scan, q) pair, caching the init
    and the scaled target since they do not depend on the network."""

    def __init__(self, scans: list[TrainingScan], window: int, recon_cfg: ReconConfig, image_scale: float):
        for s in scans:
            if s.partition.num_turns < window:
                raise DataError(f"scan with {s.partition.num_turns} turns is too short for window {window}")
        self.scans = scans
        self.window = window
        self.cfg = recon_cfg
        self.image_scale = image_scale
        self._cache: dict = {}

    def get(self, scan_index: int, q: int, params: NetworkParams, dtype):
        s = self.scans[scan_index]
        problem, (lo, hi) = window_problem(s.sinogram, s.geometry, s.partition, q, self.window, params, dtype)
        key = (scan_index, q)
        if key not in self._cache:
            f0 = window_init(s.sinogram, s.geometry, s.partition, q, self.window, self.cfg, self.image_scale)
            f0 = torch.zeros(problem.vol_shape, dtype=dtype) if f0 is None else as_tensor(f0, dtype)
            target = as_tensor(s.truth.data[lo:hi] / self.image_scale, dtype)
            self._cache[key] = (f0, target)
        f0, target = self._cache[key]
        return problem, f0, target


def train(
    scans: list[TrainingScan],
    cfg: TrainConfig,
    recon_cfg: ReconConfig,
    params: NetworkParams | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Adam training with the MSE loss on the window's slab union.

    Each step draws ``batch_size`` samples (scan, q); gradients are averaged.
    The loss is computed in network units (images divided by the image
    scale). ``callback(step, loss)`` is called after every step.
    """
    if not scans:
        raise DataError("empty training set")
    dtype = _DTYPES[recon_cfg.precision]
    if params is None:
        params = NetworkParams.initialize(
            recon_cfg.iterations, cfg.init_seed, MU_WATER, estimate_op_norm(scans[0]), dtype,
        )
    elif params.iterations != recon_cfg.iterations:
        raise DataError(f"network has {params.iterations} iterations, config asks for {recon_cfg.iterations}")
    sampler = WindowSampler(scans, cfg.window, recon_cfg, params.image_scale)
    adam_cfg = AdamConfig(lr=cfg.lr, total_steps=cfg.iterations)
    state = AdamState()
    store = ActivationStore()
    turn_counts = [s.partition.num_turns for s in scans]
    losses = []
    t0 = time.perf_counter()
    for step in range(cfg.iterations):
        total = params.zero_grads()
        step_loss = 0.0
        for b in range(cfg.batch_size):
            scan, q = sample_window(cfg.rng_seed, step * cfg.batch_size + b, turn_counts, cfg.window)
            problem, f0, target = sampler.get(scan, q, params, dtype)
            _, u0 = problem.zero_state(dtype)
            f, u = run_forward(params, problem, f0, u0)
            diff = f - target
            loss = float((diff * diff).mean())
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at step {step} (scan {scan}, window start {q})")
            grads, _, _ = invertible_backward(params, problem, f, u, 2.0 * diff / diff.numel(), store)
            for acc, g in zip(total, grads):
                acc += g
            step_loss += loss
        if cfg.batch_size > 1:
            for acc in total:
                acc /= cfg.batch_size
        adam_step(params, total, step, adam_cfg, state)
        losses.append(step_loss / cfg.batch_size)
        if callback is not None:
            callback(step, losses[-1])
    return TrainResult(params, losses, time.perf_counter() - t0, store.peak_bytes)

