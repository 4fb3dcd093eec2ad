"""Procedural phantoms and low-dose helical data simulation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .geometry import HelicalGeometry, VolumeSpec, ray_z_bounds
from .projector import Sinogram, Volume, forward_project

MU_WATER = 0.0192  # mm^-1, water at 70 keV
LOW_DOSE_PHOTONS = 1e4


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    rotation: float  # radians, about the z axis
    value: float  # HU, added to whatever lies underneath

    def __post_init__(self):
        if min(self.semi_axes) <= 0:
            raise ValueError("ellipsoid semi-axes must be positive")
        if not math.isfinite(self.value):
            raise ValueError("ellipsoid value must be finite")

    def to_dict(self) -> dict:
        return {
            "center": list(self.center),
            "semi_axes": list(self.semi_axes),
            "rotation": self.rotation,
            "value": self.value,
        }


@dataclass(frozen=True)
class PhantomSpec:
    rng_seed: int
    volume: VolumeSpec
    ellipsoids: tuple[Ellipsoid, ...] = ()
    background: float = -1000.0

    def to_dict(self) -> dict:
        return {
            "rng_seed": self.rng_seed,
            "volume": self.volume.to_dict(),
            "ellipsoids": [e.to_dict() for e in self.ellipsoids],
            "background": self.background,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(
            int(d.get("rng_seed", 0)),
            VolumeSpec.from_dict(d["volume"]),
            tuple(
                Ellipsoid(tuple(e["center"]), tuple(e["semi_axes"]), float(e.get("rotation", 0.0)), float(e["value"]))
                for e in d.get("ellipsoids", ())
            ),
            float(d.get("background", -1000.0)),
        )


@dataclass(frozen=True)
class DoseModel:
    photons_per_pixel: float = LOW_DOSE_PHOTONS
    rng_seed: int = 0

    def __post_init__(self):
        if not self.photons_per_pixel >= 1:
            raise ValueError("photons_per_pixel must be >= 1")


def hu_to_mu(f_hu: Volume, mu_water: float = MU_WATER) -> Volume:
    return Volume(f_hu.spec, (f_hu.data.astype(np.float64) / 1000.0 + 1.0) * mu_water)


def voxel_centers(vol: VolumeSpec):
    """Broadcastable world coordinates (z, y, x) of voxel centers."""
    dx, dy, _ = vol.voxel_size
    x = (np.arange(vol.width) - (vol.width - 1) / 2.0) * dx
    y = (np.arange(vol.height) - (vol.height - 1) / 2.0) * dy
    z = vol.slice_z()
    return z[:, None, None], y[None, :, None], x[None, None, :]


def make_phantom(spec: PhantomSpec) -> Volume:
    """Background plus additive rotated-ellipsoid indicators, in HU."""
    z, y, x = voxel_centers(spec.volume)
    out = np.full(spec.volume.shape, spec.background, dtype=np.float64)
    for e in spec.ellipsoids:
        c, s = math.cos(e.rotation), math.sin(e.rotation)
        xr = c * (x - e.center[0]) + s * (y - e.center[1])
        yr = -s * (x - e.center[0]) + c * (y - e.center[1])
        zr = z - e.center[2]
        inside = (xr / e.semi_axes[0]) ** 2 + (yr / e.semi_axes[1]) ** 2 + (zr / e.semi_axes[2]) ** 2 <= 1.0
        out += np.where(inside, e.value, 0.0)
    return Volume(spec.volume, out.astype(np.float32))


def random_phantom_spec(seed: int, volume: VolumeSpec) -> PhantomSpec:
    """Draw an abdomen-like ellipsoid scene.

    All parameters are uniform draws (from the counter-based generator):

    * body: in-plane semi-axes 0.60-0.85 / 0.50-0.75 of the half field of view,
      z semi-axis 4x the volume length, value 1000 + [-60, 40] HU over air.
    * 4-9 organs inside 0.55 of the body semi-axes: in-plane semi-axes
      0.06-0.28 of the half field of view, z semi-axes 0.3-1.5 of the volume
      length, rotation 0-pi, value [-150, 250] HU.
    * 1-3 bones: in-plane semi-axes 0.03-0.09, same z range, value [400, 900] HU.
    """
    u = rng.uniform(seed, 256, stream=0x5EED)
    it = iter(u)

    def draw(lo, hi):
        return lo + (hi - lo) * next(it)

    hx, hy = volume.lateral_extent()
    half = min(hx, hy)
    z_lo, z_hi = volume.z_extent()
    zc = 0.5 * (z_lo + z_hi)
    length = z_hi - z_lo
    ax, ay = draw(0.60, 0.85) * half, draw(0.50, 0.75) * half
    ells = [Ellipsoid((0.0, 0.0, zc), (ax, ay, 4.0 * length), draw(-0.3, 0.3), 1000.0 + draw(-60.0, 40.0))]
    n_organs = 4 + int(draw(0, 6))
    n_bones = 1 + int(draw(0, 3))
    for kind in ["organ"] * n_organs + ["bone"] * n_bones:
        r, t = math.sqrt(draw(0, 1)) * 0.55, draw(0, 2 * math.pi)
        center = (r * ax * math.cos(t), r * ay * math.sin(t), draw(z_lo, z_hi))
        if kind == "organ":
            axes = (draw(0.06, 0.28) * half, draw(0.06, 0.28) * half, draw(0.3, 1.5) * length)
            value = draw(-150.0, 250.0)
        else:
            axes = (draw(0.03, 0.09) * half, draw(0.03, 0.09) * half, draw(0.3, 1.5) * length)
            value = draw(400.0, 900.0)
        ells.append(Ellipsoid(center, axes, draw(0, math.pi), value))
    return PhantomSpec(seed, volume, tuple(ells), -1000.0)


def random_phantom(seed: int, volume: VolumeSpec) -> Volume:
    return make_phantom(random_phantom_spec(seed, volume))


def simulate_data(f: Volume, geom: HelicalGeometry, dose: DoseModel, stream: int = 0) -> Sinogram:
    """Poisson-noisy, log-linearized line integrals of ``f`` (mm^-1).

    Counts of zero are raised to one photon before taking the log.
    """
    clean = forward_project(Volume(f.spec, f.data.astype(np.float64)), geom).data
    transmission = np.exp(-clean)
    if np.any(transmission == 0.0):
        raise ValueError("line integrals too large: transmission underflows (nonphysical phantom?)")
    counts = rng.poisson(dose.photons_per_pixel * transmission, dose.rng_seed, stream)
    counts = np.maximum(counts, 1.0)
    return Sinogram(geom.geometry_id, -np.log(counts / dose.photons_per_pixel))


def trajectory_keep_mask(geom: HelicalGeometry, vol: VolumeSpec) -> np.ndarray:
    """True for sources whose rays cross the voxel box only through its lateral
    faces, i.e. never pass above or below the volume inside its x/y footprint."""
    zmin, zmax = ray_z_bounds(geom, vol)
    z_lo, z_hi = vol.z_extent()
    miss = np.isnan(zmin)
    with np.errstate(invalid="ignore"):
        return miss | ((zmin >= z_lo) & (zmax <= z_hi))


def trajectory_keep_range(geom: HelicalGeometry, vol: VolumeSpec) -> tuple[int, int]:
    """Longest contiguous run ``[a, b)`` of qualifying source indices."""
    keep = trajectory_keep_mask(geom, vol)
    best = (0, 0)
    start = None
    for i, k in enumerate(np.append(keep, False)):
        if k and start is None:
            start = i
        elif not k and start is not None:
            if i - start > best[1] - best[0]:
                best = (start, i)
            start = None
    if best[1] == best[0]:
        raise ValueError("no source position has all its rays inside the volume")
    return best


def truncate_trajectory(geom: HelicalGeometry, vol: VolumeSpec) -> HelicalGeometry:
    a, b = trajectory_keep_range(geom, vol)
    return geom.subset(a, b)
