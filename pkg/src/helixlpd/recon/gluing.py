"""Per-slice weighted averaging of overlapping partial reconstructions.

A slice at index ``z`` takes weight ``1/|z - z_c|`` from every partial whose
center ``z_c`` lies within ``z_t / 2`` and which actually covers the slice.
A slice that coincides with a partial's center (possible for integer
centers) takes that partial's value, which is the limit of the weighted
average as the distance goes to zero; several coinciding partials are
averaged with equal weight.
"""

from __future__ import annotations

import numpy as np

from ..errors import DataError
from ..geometry import VolumeSpec
from ..projector import Volume


def _offset(part: VolumeSpec, target: VolumeSpec) -> int:
    if part.shape[1:] != target.shape[1:] or part.voxel_size != target.voxel_size:
        raise DataError("partial reconstruction does not match the target grid")
    k = (part.z_origin - target.z_origin) / target.voxel_size[2]
    if abs(k - round(k)) > 1e-6:
        raise DataError("partial reconstruction is not aligned with the target slices")
    return int(round(k))


def _raw_weights(partials, target: VolumeSpec, origin: int):
    n = target.num_slices
    raw = np.zeros((len(partials), n))
    exact = np.zeros((len(partials), n), dtype=bool)
    for p, (vol, zc, zt) in enumerate(partials):
        if zt <= 0:
            raise ValueError("thickness must be positive")
        k0 = _offset(vol.spec, target)
        z = np.arange(n) + origin
        covered = (np.arange(n) >= k0) & (np.arange(n) < k0 + vol.spec.num_slices)
        dist = np.abs(z - zc)
        inside = covered & (dist <= zt / 2.0)
        exact[p] = inside & (dist == 0)
        with np.errstate(divide="ignore"):
            raw[p] = np.where(inside & (dist > 0), 1.0 / np.where(dist > 0, dist, 1.0), 0.0)
    hit = exact.any(axis=0)
    raw[:, hit] = exact[:, hit].astype(float)
    total = raw.sum(axis=0)
    if np.any(total == 0):
        missing = np.flatnonzero(total == 0) + origin
        raise DataError(f"slices {missing.tolist()} are not covered by any partial reconstruction")
    return raw, total


def gluing_weights(partials, target: VolumeSpec, origin: int = 0) -> np.ndarray:
    """Normalized weights, shape (num_partials, num_slices of target)."""
    raw, total = _raw_weights(partials, target, origin)
    return raw / total


def glue(partials, target: VolumeSpec | None = None, origin: int = 0) -> Volume:
    """Weighted average of ``partials``, a list of ``(Volume, z_c, z_t)``.

    Centers ``z_c`` and thicknesses ``z_t`` are in slices; ``z_c`` is measured
    on a grid whose index ``origin`` is slice 0 of ``target``. Without a
    target, the output spans the union of the partials and ``origin`` refers
    to its first slice.
    """
    if not partials:
        raise DataError("nothing to glue")
    if target is None:
        ref = partials[0][0].spec
        dz = ref.voxel_size[2]
        starts = [v.spec.z_origin for v, _, _ in partials]
        ends = [v.spec.z_origin + (v.spec.num_slices - 1) * dz for v, _, _ in partials]
        z0 = min(starts)
        target = VolumeSpec(ref.width, ref.height, int(round((max(ends) - z0) / dz)) + 1, ref.voxel_size, z0)
    w, total = _raw_weights(partials, target, origin)
    out = np.zeros(target.shape)
    for p, (vol, _, _) in enumerate(partials):
        k0 = _offset(vol.spec, target)
        lo, hi = max(k0, 0), min(k0 + vol.spec.num_slices, target.num_slices)
        if hi > lo:
            out[lo:hi] += w[p, lo:hi, None, None] * vol.data[lo - k0:hi - k0]
    out /= total[:, None, None]
    return Volume(target, out.astype(partials[0][0].data.dtype))
