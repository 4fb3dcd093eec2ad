"""Small reconstruction problems shared by the recon and acceptance tests."""

import math

import numpy as np
import torch

from helixlpd.geometry import (
    DetectorSpec, VolumeSpec, build_geometry, detector_cell_position, minimal_subvolume_thickness,
    partition_turns, source_position,
)
from helixlpd.nn import NetworkParams
from helixlpd.projector import turn_operator
from helixlpd.recon.engine import SplitProblem, TurnBlock
from helixlpd.selftest import _tiny_case


def multi_turn_case(turns: int):
    """8x8 in-plane helix of ``turns`` complete turns, slabs of 11 slices."""
    det = DetectorSpec(12, 4, 2.4, 1.5)
    vol = VolumeSpec(8, 8, 15 + 3 * (turns - 1), (1.5, 1.5, 1.0), 0.0)
    geom = build_geometry(2 * math.pi / 16, 3.0, turns, 40.0, 80.0, det, z_start=4.0)
    return geom, vol, partition_turns(geom, vol, 11)


def split_problem(geom, vol, part, turns=None, dtype=torch.float64, seed=3, op_norm=4.0):
    """SplitProblem over the first ``turns`` turns with random data."""
    turns = part.num_turns if turns is None else turns
    rng = np.random.default_rng(seed)
    lo, hi = part.union_range(0, turns - 1)
    blocks = []
    for j in range(turns):
        a, b = part.turn_ranges[j]
        s_lo, s_hi = part.subvolume_ranges[j]
        data = torch.from_numpy(rng.standard_normal((b - a, *geom.detector.shape))).to(dtype)
        blocks.append(TurnBlock(turn_operator(geom, part, j), s_lo - lo, s_hi - lo, data))
    return SplitProblem(blocks, (hi - lo, vol.height, vol.width), op_norm)


def tiny_problem(turns=None, dtype=torch.float64):
    geom, vol, part = _tiny_case()
    return split_problem(geom, vol, part, turns, dtype)


def random_params(iterations, seed=0, dtype=torch.float64, scale=1.0):
    p = NetworkParams.initialize(iterations, seed=seed, dtype=dtype, zero_last=False)
    if scale != 1.0:
        for t in p.tensors():
            t.mul_(scale)
    return p


def naive_joseph_row(src, dst, vol: VolumeSpec):
    """One system-matrix row by direct Joseph stepping, written independently
    of the compiled kernel: sample the dominant axis at voxel-center planes,
    bilinearly interpolate the other two, weight by the step length."""
    nx, ny, nz = vol.width, vol.height, vol.num_slices
    dx, dy, dz = vol.voxel_size

    def to_index(p):
        return np.array([p[0] / dx + (nx - 1) / 2, p[1] / dy + (ny - 1) / 2, (p[2] - vol.z_origin) / dz])

    a, b = to_index(src), to_index(dst)
    d = b - a
    dims = (nx, ny, nz)
    ax = int(np.argmax(np.abs(d)))  # ties go to the lower axis, x before y before z
    step = np.linalg.norm(np.asarray(dst) - np.asarray(src)) / abs(d[ax])
    row = np.zeros(vol.shape)
    lo = max(math.ceil(min(a[ax], b[ax])), 0)
    hi = min(math.floor(max(a[ax], b[ax])), dims[ax] - 1)
    for k in range(lo, hi + 1):
        t = (k - a[ax]) / d[ax]
        p = a + t * d
        p[ax] = k
        others = [i for i in range(3) if i != ax]
        base = [math.floor(p[i]) for i in others]
        for e0 in (0, 1):
            for e1 in (0, 1):
                idx = [0, 0, 0]
                idx[ax] = k
                idx[others[0]] = base[0] + e0
                idx[others[1]] = base[1] + e1
                if not all(0 <= idx[i] < dims[i] for i in range(3)):
                    continue
                f0 = p[others[0]] - base[0]
                f1 = p[others[1]] - base[1]
                w = (f0 if e0 else 1 - f0) * (f1 if e1 else 1 - f1)
                row[idx[2], idx[1], idx[0]] += w * step
    return row.ravel()


def naive_matrix(geom, vol):
    det = geom.detector
    rows = []
    for i in range(geom.num_angles):
        s = source_position(geom, i)
        for r in range(det.num_rows):
            for c in range(det.num_cols):
                rows.append(naive_joseph_row(s, detector_cell_position(geom, i, c, r), vol))
    return np.array(rows)


def dense_cases():
    out = []
    for nz, per in ((9, 6), (7, 8)):
        det = DetectorSpec(8, 3, 2.0, 1.0)
        vol = VolumeSpec(6, 6, nz, (1.5, 1.5, 1.0), 0.0)
        geom = build_geometry(2 * math.pi / per, 2.0, 2.0, 30.0, 60.0, det, z_start=(nz - 1) / 2 - 2.0)
        part = partition_turns(geom, vol, minimal_subvolume_thickness(geom, vol))
        assert geom.num_angles * det.num_rows * det.num_cols * vol.size <= 100_000
        out.append((geom, vol, part))
    return out
