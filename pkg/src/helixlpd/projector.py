"""Joseph-type ray transform for helical cone-beam geometries.

The forward operator is assembled once per (geometry, volume, angle range,
slab) as a sparse matrix whose rows are rays in sinogram layout
``(angle, row, col)`` and whose columns are voxels in volume layout
``(slice, row, col)``. The back projection is the transpose of that very
matrix, so the adjoint is matched exactly. Sparse matrix-vector products are
sequential, hence bitwise deterministic.

Each ray is sampled on the voxel-center planes of its dominant axis (the one
it crosses most planes of); at each sample the other two coordinates are
bilinearly interpolated and the sample is weighted by the physical length of
one step along the ray.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .geometry import (
    HelicalGeometry,
    TurnPartition,
    VolumeSpec,
    detector_frames,
    source_positions,
)


@dataclass(eq=False)
class Volume:
    spec: VolumeSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape != self.spec.shape:
            raise ValueError(f"volume data shape {self.data.shape} != spec shape {self.spec.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")


@dataclass(eq=False)
class Sinogram:
    geom_ref: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError("sinogram data must be (angle, row, col)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sinogram contains non-finite values")


@dataclass(frozen=True)
class TurnRestriction:
    partition: TurnPartition
    turn_index: int

    def __post_init__(self):
        if not 0 <= self.turn_index < self.partition.num_turns:
            raise IndexError(f"turn {self.turn_index} outside [0, {self.partition.num_turns})")


@numba.njit(cache=True)
def _joseph_rays(src, dst, shape, voxel, z0, out_idx, out_val, counts):
    """Weights of every ray ``src[r] -> dst[r]`` (world mm) into a (nz, ny, nx) grid."""
    nz, ny, nx = shape[0], shape[1], shape[2]
    dx, dy, dz = voxel[0], voxel[1], voxel[2]
    cx = (nx - 1) * 0.5
    cy = (ny - 1) * 0.5
    n_dims = np.empty(3, np.int64)
    n_dims[0] = nx
    n_dims[1] = ny
    n_dims[2] = nz
    stride = np.empty(3, np.int64)
    stride[0] = 1
    stride[1] = nx
    stride[2] = nx * ny
    s = np.empty(3)
    d = np.empty(3)
    for r in range(src.shape[0]):
        # continuous voxel-index coordinates, ordered (x, y, z)
        s[0] = src[r, 0] / dx + cx
        s[1] = src[r, 1] / dy + cy
        s[2] = (src[r, 2] - z0) / dz
        d[0] = dst[r, 0] / dx + cx - s[0]
        d[1] = dst[r, 1] / dy + cy - s[1]
        d[2] = (dst[r, 2] - z0) / dz - s[2]
        ax = 0
        if abs(d[1]) > abs(d[ax]):
            ax = 1
        if abs(d[2]) > abs(d[ax]):
            ax = 2
        a1 = (ax + 1) % 3
        a2 = (ax + 2) % 3
        vx = dst[r, 0] - src[r, 0]
        vy = dst[r, 1] - src[r, 1]
        vz = dst[r, 2] - src[r, 2]
        length = math.sqrt(vx * vx + vy * vy + vz * vz)
        step = length / abs(d[ax])
        end = s[ax] + d[ax]
        k_lo = max(int(math.ceil(min(s[ax], end))), 0)
        k_hi = min(int(math.floor(max(s[ax], end))), n_dims[ax] - 1)
        n1 = n_dims[a1]
        n2 = n_dims[a2]
        c = 0
        for k in range(k_lo, k_hi + 1):
            t = (k - s[ax]) / d[ax]
            c1 = s[a1] + t * d[a1]
            c2 = s[a2] + t * d[a2]
            if c1 <= -1.0 or c1 >= n1 or c2 <= -1.0 or c2 >= n2:
                continue
            i1 = int(math.floor(c1))
            i2 = int(math.floor(c2))
            w1 = c1 - i1
            w2 = c2 - i2
            for e1 in range(2):
                j1 = i1 + e1
                if j1 < 0 or j1 >= n1:
                    continue
                f1 = w1 if e1 == 1 else 1.0 - w1
                for e2 in range(2):
                    j2 = i2 + e2
                    if j2 < 0 or j2 >= n2:
                        continue
                    f2 = w2 if e2 == 1 else 1.0 - w2
                    wt = f1 * f2 * step
                    if wt == 0.0:
                        continue
                    out_idx[r, c] = k * stride[ax] + j1 * stride[a1] + j2 * stride[a2]
                    out_val[r, c] = wt
                    c += 1
        counts[r] = c


def ray_endpoints(geom: HelicalGeometry, start: int = 0, stop: int | None = None):
    """Source and detector-cell positions of every ray of sources ``[start, stop)``.

    Returns two (n_rays, 3) arrays in sinogram order (angle, row, col).
    """
    stop = geom.num_angles if stop is None else stop
    sub = geom.subset(start, stop)
    det = geom.detector
    s = source_positions(sub)
    center, col_dir, row_dir = detector_frames(sub)
    u = det.col_offsets()
    v = det.row_offsets()
    p = (
        center[:, None, None, :]
        + v[None, :, None, None] * row_dir[:, None, None, :]
        + u[None, None, :, None] * col_dir[:, None, None, :]
    )
    src = np.broadcast_to(s[:, None, None, :], p.shape)
    return np.ascontiguousarray(src.reshape(-1, 3)), np.ascontiguousarray(p.reshape(-1, 3))


def assemble_matrix(
    geom: HelicalGeometry,
    vol: VolumeSpec,
    angle_range: tuple[int, int] | None = None,
    slice_range: tuple[int, int] | None = None,
) -> sp.csr_matrix:
    """System matrix for sources in ``angle_range`` and voxels in ``slice_range``.

    With a slice range the weights are computed on the full volume and must all
    fall inside the slab; a ray reaching outside it raises ValueError (it would
    otherwise be silently truncated).
    """
    a, b = angle_range if angle_range is not None else (0, geom.num_angles)
    src, dst = ray_endpoints(geom, a, b)
    max_planes = max(vol.width, vol.height, vol.num_slices)
    n_rays = src.shape[0]
    idx = np.empty((n_rays, 4 * max_planes), np.int64)
    val = np.empty((n_rays, 4 * max_planes), np.float64)
    counts = np.empty(n_rays, np.int64)
    _joseph_rays(
        src, dst, np.array(vol.shape, np.int64), np.array(vol.voxel_size), vol.z_origin,
        idx, val, counts,
    )
    mask = np.arange(idx.shape[1])[None, :] < counts[:, None]
    indices = idx[mask]
    data = val[mask]
    indptr = np.concatenate([[0], np.cumsum(counts)])
    n_cols = vol.size
    if slice_range is not None:
        lo, hi = slice_range
        plane = vol.width * vol.height
        if indices.size and (indices.min() < lo * plane or indices.max() >= hi * plane):
            raise ValueError(
                f"rays of sources [{a}, {b}) reach outside slices [{lo}, {hi})"
            )
        indices = indices - lo * plane
        n_cols = (hi - lo) * plane
    return sp.csr_matrix((data, indices.astype(np.int32), indptr), shape=(n_rays, n_cols))


class RayTransform:
    """Linear operator wrapper around an assembled system matrix.

    Accepts and returns arrays shaped like the volume / sinogram block. Sums
    are accumulated in double precision; results take the input's dtype.
    """

    def __init__(self, matrix: sp.csr_matrix, vol_shape, data_shape):
        self.matrix = matrix
        self._transpose = matrix.T.tocsr()
        self.vol_shape = tuple(vol_shape)
        self.data_shape = tuple(data_shape)

    def forward(self, f: np.ndarray) -> np.ndarray:
        if f.shape != self.vol_shape:
            raise ValueError(f"expected volume of shape {self.vol_shape}, got {f.shape}")
        out = self.matrix @ f.reshape(-1).astype(np.float64, copy=False)
        return out.reshape(self.data_shape).astype(f.dtype, copy=False)

    def adjoint(self, u: np.ndarray) -> np.ndarray:
        if u.shape != self.data_shape:
            raise ValueError(f"expected data of shape {self.data_shape}, got {u.shape}")
        out = self._transpose @ u.reshape(-1).astype(np.float64, copy=False)
        return out.reshape(self.vol_shape).astype(u.dtype, copy=False)

    def norm(self, iterations: int = 20, seed: int = 0) -> float:
        """Power-iteration estimate of the spectral norm (from below)."""
        x = np.random.default_rng(seed).standard_normal(self.vol_shape)
        x /= np.linalg.norm(x)
        s = 0.0
        for _ in range(iterations):
            y = self.adjoint(self.forward(x))
            s = np.linalg.norm(y)
            if s == 0:
                return 0.0
            x = y / s
        return math.sqrt(s)

    @property
    def nbytes(self) -> int:
        m = self.matrix
        return 2 * (m.data.nbytes + m.indices.nbytes + m.indptr.nbytes)


class _OperatorCache:
    """LRU cache of assembled operators bounded by total matrix bytes."""

    def __init__(self, max_bytes: int = 1_500_000_000):
        self.max_bytes = max_bytes
        self._items: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key, build):
        with self._lock:
            if key in self._items:
                self._items.move_to_end(key)
                return self._items[key]
        op = build()
        with self._lock:
            self._items[key] = op
            total = sum(o.nbytes for o in self._items.values())
            while total > self.max_bytes and len(self._items) > 1:
                _, old = self._items.popitem(last=False)
                total -= old.nbytes
        return op

    def clear(self):
        with self._lock:
            self._items.clear()


operator_cache = _OperatorCache()


def ray_transform(
    geom: HelicalGeometry,
    vol: VolumeSpec,
    angle_range: tuple[int, int] | None = None,
    slice_range: tuple[int, int] | None = None,
) -> RayTransform:
    a, b = angle_range if angle_range is not None else (0, geom.num_angles)
    lo, hi = slice_range if slice_range is not None else (0, vol.num_slices)
    key = (geom.geometry_id, vol, a, b, lo, hi)

    def build():
        m = assemble_matrix(geom, vol, (a, b), None if slice_range is None else (lo, hi))
        return RayTransform(
            m, (hi - lo, vol.height, vol.width),
            (b - a, geom.detector.num_rows, geom.detector.num_cols),
        )

    return operator_cache.get(key, build)


def turn_operator(geom: HelicalGeometry, partition: TurnPartition, j: int) -> RayTransform:
    """The restricted operator A^j from slab j to the data of turn j."""
    if partition.volume is None:
        raise ValueError("partition carries no volume spec")
    TurnRestriction(partition, j)
    return ray_transform(
        geom, partition.volume, partition.turn_ranges[j], partition.subvolume_ranges[j]
    )


# chunking keeps the working set of a full-scan projection bounded
_ANGLE_CHUNK = 64


def _chunks(n: int):
    for a in range(0, n, _ANGLE_CHUNK):
        yield a, min(a + _ANGLE_CHUNK, n)


def forward_project(f: Volume, geom: HelicalGeometry) -> Sinogram:
    out = np.empty(geom.sinogram_shape, dtype=f.data.dtype)
    for a, b in _chunks(geom.num_angles):
        out[a:b] = ray_transform(geom, f.spec, (a, b)).forward(f.data)
    return Sinogram(geom.geometry_id, out)


def back_project(u: Sinogram, geom: HelicalGeometry, vol: VolumeSpec) -> Volume:
    if u.data.shape != geom.sinogram_shape:
        raise ValueError(f"sinogram shape {u.data.shape} != geometry {geom.sinogram_shape}")
    acc = np.zeros(vol.shape, dtype=np.float64)
    for a, b in _chunks(geom.num_angles):
        acc += ray_transform(geom, vol, (a, b)).adjoint(u.data[a:b].astype(np.float64))
    return Volume(vol, acc.astype(u.data.dtype, copy=False))


def _check_turn(partition: TurnPartition, j: int):
    TurnRestriction(partition, j)


def forward_project_turn(
    f_sub: Volume, restriction: TurnRestriction, geom: HelicalGeometry
) -> np.ndarray:
    part, j = restriction.partition, restriction.turn_index
    lo, hi = part.subvolume_ranges[j]
    if f_sub.data.shape != (hi - lo, part.volume.height, part.volume.width):
        raise ValueError("sub-volume shape does not match the partition slab")
    return turn_operator(geom, part, j).forward(f_sub.data)


def back_project_turn(
    u_chunk: np.ndarray, restriction: TurnRestriction, geom: HelicalGeometry
) -> Volume:
    part, j = restriction.partition, restriction.turn_index
    a, b = part.turn_ranges[j]
    if u_chunk.shape != (b - a, geom.detector.num_rows, geom.detector.num_cols):
        raise ValueError("data chunk shape does not match the turn")
    lo, hi = part.subvolume_ranges[j]
    return Volume(part.volume.slab(lo, hi), turn_operator(geom, part, j).adjoint(u_chunk))


def project_image(f: Volume, partition: TurnPartition, j: int) -> Volume:
    _check_turn(partition, j)
    lo, hi = partition.subvolume_ranges[j]
    if partition.volume is not None and f.spec.shape != partition.volume.shape:
        raise ValueError("volume does not match the partition")
    return Volume(f.spec.slab(lo, hi), f.data[lo:hi].copy())


def pad_image(f_sub: Volume, partition: TurnPartition, j: int, full_spec: VolumeSpec) -> Volume:
    _check_turn(partition, j)
    lo, hi = partition.subvolume_ranges[j]
    if f_sub.data.shape != (hi - lo, full_spec.height, full_spec.width):
        raise ValueError("sub-volume shape does not match the slab")
    out = np.zeros(full_spec.shape, dtype=f_sub.data.dtype)
    out[lo:hi] = f_sub.data
    return Volume(full_spec, out)


def project_data(g: Sinogram, partition: TurnPartition, j: int) -> np.ndarray:
    _check_turn(partition, j)
    if partition.num_angles and g.data.shape[0] != partition.num_angles:
        raise ValueError("sinogram does not match the partition")
    a, b = partition.turn_ranges[j]
    return g.data[a:b].copy()


def pad_data(chunk: np.ndarray, partition: TurnPartition, j: int, full_shape, geom_ref: str = "") -> Sinogram:
    _check_turn(partition, j)
    a, b = partition.turn_ranges[j]
    if chunk.shape[0] != b - a or tuple(chunk.shape[1:]) != tuple(full_shape[1:]):
        raise ValueError("data chunk does not match the turn")
    out = np.zeros(full_shape, dtype=chunk.dtype)
    out[a:b] = chunk
    return Sinogram(geom_ref, out)
