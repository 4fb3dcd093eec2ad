"""Learned reconstructors: iLPDh on turn-split data, plain iLPD, and the glued
sliding-window variants."""

from __future__ import annotations

import numpy as np
import torch

from ..errors import DataError
from ..geometry import HelicalGeometry, TurnPartition, VolumeSpec
from ..nn import NetworkParams
from ..projector import Sinogram, Volume, ray_transform, turn_operator
from .config import ReconConfig
from .engine import SplitProblem, TurnBlock, as_tensor, run_forward
from .fbp import fbp_reconstruct
from .gluing import glue

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def _check_params(params: NetworkParams, cfg: ReconConfig):
    if params.iterations != cfg.iterations:
        raise DataError(f"network has {params.iterations} iterations, config asks for {cfg.iterations}")


def window_problem(
    g: Sinogram, geom: HelicalGeometry, partition: TurnPartition, first: int, count: int,
    params: NetworkParams, dtype,
) -> tuple[SplitProblem, tuple[int, int]]:
    """Turn blocks of turns ``first .. first+count-1`` on the union of their slabs."""
    if g.data.shape != geom.sinogram_shape:
        raise DataError(f"sinogram shape {g.data.shape} != geometry {geom.sinogram_shape}")
    if partition.volume is None or partition.num_angles != geom.num_angles:
        raise DataError("partition does not belong to this geometry")
    if not (0 <= first and count >= 1 and first + count <= partition.num_turns):
        raise DataError(f"turn window [{first}, {first + count}) outside {partition.num_turns} turns")
    lo, hi = partition.union_range(first, first + count - 1)
    vol = partition.volume
    scale = params.image_scale * params.op_norm
    blocks = []
    for j in range(first, first + count):
        a, b = partition.turn_ranges[j]
        s_lo, s_hi = partition.subvolume_ranges[j]
        blocks.append(TurnBlock(
            turn_operator(geom, partition, j), s_lo - lo, s_hi - lo, as_tensor(g.data[a:b] / scale, dtype),
        ))
    return SplitProblem(blocks, (hi - lo, vol.height, vol.width), params.op_norm), (lo, hi)


def window_init(
    g: Sinogram, geom: HelicalGeometry, partition: TurnPartition, first: int, count: int,
    cfg: ReconConfig, image_scale: float,
) -> np.ndarray | None:
    """FBP of the window's own data on its slab union (network units), or None for zeros."""
    if cfg.init_mode == "zeros":
        return None
    a = partition.turn_ranges[first][0]
    b = partition.turn_ranges[first + count - 1][1]
    lo, hi = partition.union_range(first, first + count - 1)
    sub = geom.subset(a, b)
    fbp = fbp_reconstruct(Sinogram(sub.geometry_id, g.data[a:b]), sub, partition.volume.slab(lo, hi), cfg.fbp_bandwidth)
    return fbp.data / image_scale


def _run(params, problem, f0, dtype):
    f0 = torch.zeros(problem.vol_shape, dtype=dtype) if f0 is None else as_tensor(f0, dtype)
    _, u0 = problem.zero_state(dtype)
    f, _ = run_forward(params, problem, f0, u0)
    return f


def ilpdh_reconstruct(
    g: Sinogram,
    geom: HelicalGeometry,
    partition: TurnPartition,
    params: NetworkParams,
    cfg: ReconConfig,
    turns: tuple[int, int] | None = None,
) -> Volume:
    """Split reconstruction over all turns (or the window ``turns=(first, count)``).

    Returns the primal volume on the union of the participating slabs, in mm^-1.
    """
    _check_params(params, cfg)
    dtype = _DTYPES[cfg.precision]
    first, count = turns if turns is not None else (0, partition.num_turns)
    problem, (lo, hi) = window_problem(g, geom, partition, first, count, params, dtype)
    f0 = window_init(g, geom, partition, first, count, cfg, params.image_scale)
    f = _run(params, problem, f0, dtype)
    out = f.numpy() * params.image_scale
    return Volume(partition.volume.slab(lo, hi), out.astype(cfg.precision, copy=False))


def ilpd_reconstruct(
    g: Sinogram, geom: HelicalGeometry, vol: VolumeSpec, params: NetworkParams, cfg: ReconConfig,
) -> Volume:
    """Unsplit reference: one block holding the full operator and all data."""
    _check_params(params, cfg)
    if g.data.shape != geom.sinogram_shape:
        raise DataError(f"sinogram shape {g.data.shape} != geometry {geom.sinogram_shape}")
    dtype = _DTYPES[cfg.precision]
    op = ray_transform(geom, vol, (0, geom.num_angles), (0, vol.num_slices))
    data = as_tensor(g.data / (params.image_scale * params.op_norm), dtype)
    problem = SplitProblem([TurnBlock(op, 0, vol.num_slices, data)], vol.shape, params.op_norm)
    f0 = None
    if cfg.init_mode == "fbp":
        f0 = fbp_reconstruct(g, geom, vol, cfg.fbp_bandwidth).data / params.image_scale
    f = _run(params, problem, f0, dtype)
    return Volume(vol, (f.numpy() * params.image_scale).astype(cfg.precision, copy=False))


def sliding_partials(
    g: Sinogram, geom: HelicalGeometry, partition: TurnPartition, params: NetworkParams,
    cfg: ReconConfig, window: int,
) -> list[tuple[Volume, float, int]]:
    """Partial reconstructions of every window of consecutive turns with the
    gluing center and thickness of each (slice units of the full volume)."""
    if partition.num_turns < window:
        raise DataError(f"scan has {partition.num_turns} turns, window needs {window}")
    out = []
    for q in range(partition.num_turns - window + 1):
        part = ilpdh_reconstruct(g, geom, partition, params, cfg, (q, window))
        if window == 1:
            center, thickness = partition.subvolume_centers[q], partition.subvolume_thickness
        else:
            lo, hi = partition.union_range(q, q + window - 1)
            center, thickness = 0.5 * (lo + hi - 1), hi - lo
        out.append((part, float(center), int(thickness)))
    return out


def glued_reconstruct(
    g: Sinogram, geom: HelicalGeometry, partition: TurnPartition, params: NetworkParams,
    cfg: ReconConfig, window: int,
) -> Volume:
    """g-iLPDh: sliding-window partial reconstructions merged by :func:`glue`."""
    lo, hi = partition.union_range()
    return glue(sliding_partials(g, geom, partition, params, cfg, window), partition.volume.slab(lo, hi), origin=lo)
