"""Helical cone-beam acquisition geometry and its turn-wise partition.

Coordinate conventions (single source of truth for orientation):

* rotation axis is +z; the source sits at ``(R sin phi, R cos phi, z)``.
* the flat detector is orthogonal to the source-isocenter ray, at distance
  ``source_detector_distance`` from the source. Columns run along the in-plane
  tangent ``(cos phi, -sin phi, 0)`` (so at ``phi = 0`` increasing column moves
  towards +x) and rows run along +z. Cell centers sit at
  ``(index - (count - 1) / 2) * spacing`` from the detector center.
* volume voxels are indexed ``(slice, row, col)`` = ``(z, y, x)`` with in-plane
  centers at ``(index - (count - 1) / 2) * spacing`` and slice ``k`` at
  ``z_origin + k * dz``.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
_ANGLE_TOL = 1e-9


@dataclass(frozen=True)
class DetectorSpec:
    num_cols: int
    num_rows: int
    col_spacing: float
    row_spacing: float

    def __post_init__(self):
        if self.num_cols < 1 or self.num_rows < 1:
            raise ValueError("detector needs at least one row and one column")
        if self.col_spacing <= 0 or self.row_spacing <= 0:
            raise ValueError("detector spacings must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        """(rows, cols), the per-angle layout of a sinogram."""
        return (self.num_rows, self.num_cols)

    def col_offsets(self) -> np.ndarray:
        return (np.arange(self.num_cols) - (self.num_cols - 1) / 2.0) * self.col_spacing

    def row_offsets(self) -> np.ndarray:
        return (np.arange(self.num_rows) - (self.num_rows - 1) / 2.0) * self.row_spacing

    def to_dict(self) -> dict:
        return {
            "num_cols": self.num_cols,
            "num_rows": self.num_rows,
            "col_spacing": self.col_spacing,
            "row_spacing": self.row_spacing,
        }


@dataclass(frozen=True, eq=False)
class HelicalGeometry:
    """Sampled helical trajectory with a flat detector.

    ``angles`` are unwrapped (monotone increasing), so turn boundaries are
    defined by cumulative rotation rather than ``phi mod 2 pi``.
    """

    angles: np.ndarray
    z_offsets: np.ndarray
    source_radius: float
    source_detector_distance: float
    detector: DetectorSpec

    def __post_init__(self):
        angles = np.array(self.angles, dtype=np.float64).ravel()
        z = np.array(self.z_offsets, dtype=np.float64).ravel()
        if angles.size < 1 or angles.size != z.size:
            raise ValueError("angles and z_offsets must be nonempty and of equal length")
        if np.any(np.diff(angles) <= 0):
            raise ValueError("angles must be strictly increasing (unwrapped)")
        if np.any(np.diff(z) < 0):
            raise ValueError("z_offsets must be nondecreasing")
        if not self.source_radius > 0:
            raise ValueError("source_radius must be positive")
        if not self.source_detector_distance > self.source_radius:
            raise ValueError("source_detector_distance must exceed source_radius")
        angles.flags.writeable = False
        z.flags.writeable = False
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "z_offsets", z)

    @property
    def num_angles(self) -> int:
        return int(self.angles.size)

    @property
    def sinogram_shape(self) -> tuple[int, int, int]:
        return (self.num_angles, self.detector.num_rows, self.detector.num_cols)

    def subset(self, start: int, stop: int) -> "HelicalGeometry":
        """Geometry restricted to source indices ``[start, stop)``."""
        if not 0 <= start < stop <= self.num_angles:
            raise IndexError(f"invalid angle range [{start}, {stop})")
        return HelicalGeometry(
            self.angles[start:stop],
            self.z_offsets[start:stop],
            self.source_radius,
            self.source_detector_distance,
            self.detector,
        )

    def local_pitch(self) -> np.ndarray:
        """Table feed per 2 pi at every source position (central differences)."""
        if self.num_angles < 2:
            return np.zeros(1)
        return TWO_PI * np.gradient(self.z_offsets, self.angles)

    def to_dict(self) -> dict:
        return {
            "angles": self.angles.tolist(),
            "z_offsets": self.z_offsets.tolist(),
            "source_radius": self.source_radius,
            "source_detector_distance": self.source_detector_distance,
            "detector": self.detector.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HelicalGeometry":
        return cls(
            np.asarray(d["angles"], dtype=np.float64),
            np.asarray(d["z_offsets"], dtype=np.float64),
            float(d["source_radius"]),
            float(d["source_detector_distance"]),
            DetectorSpec(**d["detector"]),
        )

    @property
    def geometry_id(self) -> str:
        # repr() of floats round-trips exactly, so the id is stable across runs
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class VolumeSpec:
    width: int
    height: int
    num_slices: int
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    z_origin: float = 0.0

    def __post_init__(self):
        if min(self.width, self.height, self.num_slices) < 1:
            raise ValueError("volume dimensions must be >= 1")
        vs = tuple(float(v) for v in self.voxel_size)
        if len(vs) != 3 or min(vs) <= 0:
            raise ValueError("voxel_size must be three positive numbers")
        object.__setattr__(self, "voxel_size", vs)

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array layout (slice, row, col)."""
        return (self.num_slices, self.height, self.width)

    @property
    def size(self) -> int:
        return self.num_slices * self.height * self.width

    def slice_z(self) -> np.ndarray:
        return self.z_origin + np.arange(self.num_slices) * self.voxel_size[2]

    def z_extent(self) -> tuple[float, float]:
        """World z of the lower and upper voxel faces."""
        dz = self.voxel_size[2]
        return (self.z_origin - dz / 2, self.z_origin + (self.num_slices - 0.5) * dz)

    def lateral_extent(self) -> tuple[float, float]:
        """Half-widths of the voxel box along x and y."""
        return (self.width * self.voxel_size[0] / 2, self.height * self.voxel_size[1] / 2)

    def slab(self, lo: int, hi: int) -> "VolumeSpec":
        """Spec of slices ``[lo, hi)``."""
        if not 0 <= lo < hi <= self.num_slices:
            raise IndexError(f"invalid slice range [{lo}, {hi})")
        return VolumeSpec(
            self.width, self.height, hi - lo, self.voxel_size,
            self.z_origin + lo * self.voxel_size[2],
        )

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "num_slices": self.num_slices,
            "voxel_size": list(self.voxel_size),
            "z_origin": self.z_origin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeSpec":
        return cls(
            int(d["width"]), int(d["height"]), int(d["num_slices"]),
            tuple(d.get("voxel_size", (1.0, 1.0, 1.0))), float(d.get("z_origin", 0.0)),
        )


@dataclass(frozen=True)
class TurnPartition:
    """Split of the data into complete turns and of the image into slabs.

    Turns are numbered from 0. Ranges are half-open index ranges.
    """

    turn_ranges: tuple[tuple[int, int], ...]
    head_discard: tuple[int, int]
    tail_discard: tuple[int, int]
    subvolume_ranges: tuple[tuple[int, int], ...]
    subvolume_centers: tuple[int, ...]
    subvolume_thickness: int
    num_angles: int = field(default=0)
    volume: VolumeSpec | None = field(default=None)

    @property
    def num_turns(self) -> int:
        return len(self.turn_ranges)

    def union_range(self, first: int = 0, last: int | None = None) -> tuple[int, int]:
        """Slice range covered by the slabs of turns ``first .. last`` (inclusive)."""
        last = self.num_turns - 1 if last is None else last
        rngs = self.subvolume_ranges[first:last + 1]
        return (min(r[0] for r in rngs), max(r[1] for r in rngs))

    def window(self, first: int, count: int) -> "TurnPartition":
        """Partition of ``count`` consecutive turns re-based to their slab union.

        The result indexes angles relative to ``turn_ranges[first][0]`` and
        slices relative to the union of the selected slabs.
        """
        if not 0 <= first and first + count <= self.num_turns and count >= 1:
            raise IndexError(f"window [{first}, {first + count}) outside {self.num_turns} turns")
        a0 = self.turn_ranges[first][0]
        b1 = self.turn_ranges[first + count - 1][1]
        lo, hi = self.union_range(first, first + count - 1)
        sel = range(first, first + count)
        return TurnPartition(
            tuple((self.turn_ranges[j][0] - a0, self.turn_ranges[j][1] - a0) for j in sel),
            (0, 0),
            (b1 - a0, b1 - a0),
            tuple((self.subvolume_ranges[j][0] - lo, self.subvolume_ranges[j][1] - lo) for j in sel),
            tuple(self.subvolume_centers[j] - lo for j in sel),
            self.subvolume_thickness,
            b1 - a0,
            None if self.volume is None else self.volume.slab(lo, hi),
        )


def build_geometry(
    angular_increment: float,
    pitch_per_turn: float | Sequence[float],
    num_turns: float,
    source_radius: float,
    source_detector_distance: float,
    detector: DetectorSpec,
    z_start: float = 0.0,
    start_angle: float = 0.0,
) -> HelicalGeometry:
    """Sample a helix with ``ceil(num_turns * 2 pi / increment)`` source positions.

    ``pitch_per_turn`` may be a list giving the table feed of each turn; the
    z step between two samples uses the pitch of the turn the step starts in.
    """
    if not angular_increment > 0:
        raise ValueError("angular_increment must be positive")
    if not num_turns > 0:
        raise ValueError("num_turns must be positive")
    pitches = np.atleast_1d(np.asarray(pitch_per_turn, dtype=np.float64))
    if np.any(pitches <= 0):
        raise ValueError("pitch values must be positive")
    n = int(math.ceil(num_turns * TWO_PI / angular_increment - 1e-9))
    if pitches.size > 1 and pitches.size < math.ceil(num_turns - 1e-9):
        raise ValueError(f"need a pitch for each of {num_turns} turns, got {pitches.size}")
    angles = start_angle + angular_increment * np.arange(n)
    turn_of_step = np.floor(angular_increment * np.arange(n - 1) / TWO_PI + _ANGLE_TOL).astype(int)
    step_pitch = pitches[np.minimum(turn_of_step, pitches.size - 1)]
    z = z_start + np.concatenate([[0.0], np.cumsum(step_pitch * angular_increment / TWO_PI)])
    return HelicalGeometry(angles, z, source_radius, source_detector_distance, detector)


def _check_index(i: int, n: int, what: str):
    if not 0 <= i < n:
        raise IndexError(f"{what} index {i} out of range [0, {n})")


def source_position(geom: HelicalGeometry, i: int) -> np.ndarray:
    _check_index(i, geom.num_angles, "angle")
    phi = geom.angles[i]
    r = geom.source_radius
    return np.array([r * math.sin(phi), r * math.cos(phi), geom.z_offsets[i]])


def source_positions(geom: HelicalGeometry) -> np.ndarray:
    """All source positions, shape (N_phi, 3)."""
    r = geom.source_radius
    return np.stack([r * np.sin(geom.angles), r * np.cos(geom.angles), geom.z_offsets], axis=1)


def detector_frames(geom: HelicalGeometry) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Detector centers, column unit vectors and row unit vectors, each (N_phi, 3)."""
    s = source_positions(geom)
    sin, cos = np.sin(geom.angles), np.cos(geom.angles)
    toward_iso = np.stack([-sin, -cos, np.zeros_like(sin)], axis=1)
    center = s + geom.source_detector_distance * toward_iso
    col_dir = np.stack([cos, -sin, np.zeros_like(sin)], axis=1)
    row_dir = np.zeros_like(col_dir)
    row_dir[:, 2] = 1.0
    return center, col_dir, row_dir


def detector_cell_position(geom: HelicalGeometry, i: int, col: int, row: int) -> np.ndarray:
    _check_index(i, geom.num_angles, "angle")
    _check_index(col, geom.detector.num_cols, "column")
    _check_index(row, geom.detector.num_rows, "row")
    det = geom.detector
    phi = geom.angles[i]
    s = source_position(geom, i)
    center = s + geom.source_detector_distance * np.array([-math.sin(phi), -math.cos(phi), 0.0])
    u = (col - (det.num_cols - 1) / 2.0) * det.col_spacing
    v = (row - (det.num_rows - 1) / 2.0) * det.row_spacing
    return center + u * np.array([math.cos(phi), -math.sin(phi), 0.0]) + np.array([0.0, 0.0, v])


def ray_z_bounds(
    geom: HelicalGeometry, vol: VolumeSpec, start: int = 0, stop: int | None = None,
    grow: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-source extreme world z of ray segments inside the lateral voxel box.

    The box is the volume's x/y extent grown by ``grow`` voxels on each side.
    Returns ``(zmin, zmax)`` of shape (stop - start,), NaN where every ray of
    that source misses the box.
    """
    stop = geom.num_angles if stop is None else stop
    sub = geom.subset(start, stop)
    s = source_positions(sub)
    center, col_dir, _ = detector_frames(sub)
    det = geom.detector
    dx, dy, _ = vol.voxel_size
    hx = vol.width * dx / 2.0 + grow * dx
    hy = vol.height * dy / 2.0 + grow * dy
    # (angles, cols): x/y of the ray do not depend on the detector row
    p = center[:, None, :] + det.col_offsets()[None, :, None] * col_dir[:, None, :]
    v = p - s[:, None, :]
    t0 = np.zeros(v.shape[:2])
    t1 = np.ones(v.shape[:2])
    for axis, h in ((0, hx), (1, hy)):
        d = v[..., axis]
        o = np.broadcast_to(s[:, None, axis], d.shape)
        inside = np.abs(o) <= h
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-h - o) / d
            tb = (h - o) / d
        lo_t = np.where(d != 0, np.minimum(ta, tb), np.where(inside, -np.inf, np.inf))
        hi_t = np.where(d != 0, np.maximum(ta, tb), np.where(inside, np.inf, -np.inf))
        t0 = np.maximum(t0, lo_t)
        t1 = np.minimum(t1, hi_t)
    hit = t1 > t0
    rows = det.row_offsets()[[0, -1]]
    # z is linear along the ray and in the row offset: extremes sit at the
    # clipped segment ends of the outermost rows
    z = s[:, 2, None, None, None] + np.stack([t0, t1], axis=-1)[..., None] * rows
    z = np.where(hit[..., None, None], z, np.nan)
    flat = z.reshape(z.shape[0], -1)
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmin(flat, axis=1), np.nanmax(flat, axis=1)


def ray_slice_support(
    geom: HelicalGeometry, vol: VolumeSpec, start: int = 0, stop: int | None = None
) -> tuple[int, int] | None:
    """Conservative slice range ``[lo, hi)`` that rays of sources ``[start, stop)``
    can deposit weight into, or None if they miss the volume.

    Rays are clipped to the lateral voxel box grown by one voxel (the reach of
    the interpolating projector) and the z of the clipped segment is widened to
    the two slices an interpolated sample touches.
    """
    zmin, zmax = ray_z_bounds(geom, vol, start, stop, grow=0.5)
    if np.all(np.isnan(zmin)):
        return None
    dz = vol.voxel_size[2]
    cmin = (np.nanmin(zmin) - vol.z_origin) / dz
    cmax = (np.nanmax(zmax) - vol.z_origin) / dz
    lo = max(int(math.floor(cmin)), 0)
    hi = min(int(math.floor(cmax)) + 2, vol.num_slices)
    if hi <= lo:
        return None
    return (lo, hi)


def _turn_ranges(geom: HelicalGeometry, align_to: float | None):
    a = geom.angles
    n = geom.num_angles
    start = 0
    if align_to is not None:
        k = math.ceil((a[0] - align_to) / TWO_PI - _ANGLE_TOL)
        boundary = align_to + k * TWO_PI
        start = int(np.searchsorted(a, boundary - _ANGLE_TOL))
    last_step = a[-1] - a[-2] if n > 1 else TWO_PI
    turns = []
    while start < n:
        stop = int(np.searchsorted(a, a[start] + TWO_PI - _ANGLE_TOL))
        if stop < n:
            turns.append((start, stop))
            start = stop
            continue
        # final turn may end exactly at the last sample
        if a[-1] + last_step - a[start] >= TWO_PI - _ANGLE_TOL:
            turns.append((start, n))
            start = n
        break
    head = (0, turns[0][0]) if turns else (0, 0)
    tail = (turns[-1][1], n) if turns else (0, n)
    return turns, head, tail


def _slab_around(center: int, thickness: int, num_slices: int) -> tuple[int, int]:
    lo = center - thickness // 2
    hi = lo + thickness
    return (max(lo, 0), min(hi, num_slices))


def _turn_centers(geom: HelicalGeometry, vol: VolumeSpec, turns) -> list[int]:
    dz = vol.voxel_size[2]
    return [int(np.rint((geom.z_offsets[a:b].mean() - vol.z_origin) / dz)) for a, b in turns]


def minimal_subvolume_thickness(
    geom: HelicalGeometry, vol: VolumeSpec, align_to: float | None = None
) -> int:
    """Smallest odd slab thickness for which every turn passes the coverage check."""
    turns, _, _ = _turn_ranges(geom, align_to)
    if not turns:
        raise ValueError("geometry contains no complete turn")
    need = 1
    for (a, b), c in zip(turns, _turn_centers(geom, vol, turns)):
        sup = ray_slice_support(geom, vol, a, b)
        if sup is None:
            continue
        lo, hi = sup
        half = max(c - lo, hi - 1 - c, 0)
        need = max(need, 2 * half + 1)
    return need


def partition_turns(
    geom: HelicalGeometry, vol: VolumeSpec, thickness: int, align_to: float | None = None
) -> TurnPartition:
    """Split the trajectory into complete 2 pi turns and assign each a slab.

    With ``align_to=None`` the first turn starts at the first source position;
    otherwise turns start at angles ``align_to + 2 pi k`` and the samples before
    the first such boundary form the head discard.

    Raises ValueError when there is no complete turn or when some ray of a turn
    reaches outside that turn's slab (``thickness`` too small for the pitch and
    detector height).
    """
    if thickness < 1:
        raise ValueError("thickness must be >= 1")
    turns, head, tail = _turn_ranges(geom, align_to)
    if not turns:
        raise ValueError("geometry contains no complete turn")
    centers = _turn_centers(geom, vol, turns)
    slabs = []
    for j, ((a, b), c) in enumerate(zip(turns, centers)):
        slab = _slab_around(c, thickness, vol.num_slices)
        if slab[1] <= slab[0]:
            raise ValueError(f"turn {j} slab lies outside the volume")
        sup = ray_slice_support(geom, vol, a, b)
        if sup is not None and (sup[0] < slab[0] or sup[1] > slab[1]):
            raise ValueError(
                f"turn {j}: rays reach slices [{sup[0]}, {sup[1]}) outside slab "
                f"[{slab[0]}, {slab[1]}); thickness {thickness} is too small "
                f"(minimum {minimal_subvolume_thickness(geom, vol, align_to)})"
            )
        slabs.append(slab)
    return TurnPartition(
        tuple(turns), head, tail, tuple(slabs), tuple(centers), thickness,
        geom.num_angles, vol,
    )


def load_geometry(path) -> HelicalGeometry:
    with open(path) as fh:
        return HelicalGeometry.from_dict(json.load(fh))


def save_geometry(geom: HelicalGeometry, path) -> None:
    with open(path, "w") as fh:
        json.dump(geom.to_dict(), fh)
