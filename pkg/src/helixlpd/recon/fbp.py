"""Approximate helical filtered backprojection (FDK with a Tam-Danielsson window).

Projections are rescaled to a virtual flat detector through the isocenter,
cosine weighted and row-wise ramp filtered with a Hann apodization. During
backprojection a voxel only receives the filtered value of a projection when
its image falls between the projections of the previous and next helix turns
(the Tam-Danielsson window). Each voxel then collects data over a pi-line
range, so no 1/2 redundancy factor is applied.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from ..geometry import HelicalGeometry, VolumeSpec
from ..projector import Sinogram, Volume


def hann_ramp(num_cols: int, spacing: float, bandwidth: float = 0.45) -> np.ndarray:
    """Frequency response of the band-limited ramp filter on an FFT grid.

    Built from the spatial Ram-Lak kernel (exact zero-frequency term) and
    multiplied by ``cos^2(pi f / (2 b))`` for ``f <= b`` (f relative to
    Nyquist), zero above. Length is the padded FFT size.
    """
    if not 0 < bandwidth <= 1:
        raise ValueError("bandwidth must lie in (0, 1]")
    n = 1 << int(math.ceil(math.log2(2 * num_cols)))
    k = np.arange(n)
    k = np.where(k > n // 2, k - n, k)
    h = np.zeros(n)
    h[0] = 1.0 / (4 * spacing ** 2)
    odd = k % 2 == 1
    h[odd] = -1.0 / (math.pi * k[odd] * spacing) ** 2
    resp = np.real(np.fft.fft(h)) * spacing
    f = np.abs(np.fft.fftfreq(n)) * 2.0  # 1 at Nyquist
    window = np.where(f <= bandwidth, np.cos(np.pi * f / (2 * bandwidth)) ** 2, 0.0)
    return resp * window


def filter_projections(g: np.ndarray, geom: HelicalGeometry, bandwidth: float = 0.45) -> np.ndarray:
    """Cosine weighting and row-wise filtering on the virtual (isocenter) detector."""
    det = geom.detector
    scale = geom.source_radius / geom.source_detector_distance
    u = det.col_offsets() * scale
    v = det.row_offsets() * scale
    r = geom.source_radius
    cosw = r / np.sqrt(r ** 2 + u[None, :] ** 2 + v[:, None] ** 2)
    resp = hann_ramp(det.num_cols, det.col_spacing * scale, bandwidth)
    weighted = g * cosw[None]
    spec = np.fft.rfft(weighted, n=resp.size, axis=-1)
    out = np.fft.irfft(spec * resp[: resp.size // 2 + 1], n=resp.size, axis=-1)
    return out[..., : det.num_cols]


@numba.njit(cache=True)
def _backproject(q, angles, zs, dphi, pitch, radius, u0, du, v0, dv, xs, ys, zv, use_window, out):
    n_ang, n_rows, n_cols = q.shape
    for a in range(n_ang):
        s, c = math.sin(angles[a]), math.cos(angles[a])
        sx, sy = radius * s, radius * c
        h = pitch[a] / (2.0 * math.pi)
        for iy in range(ys.size):
            for ix in range(xs.size):
                rx, ry = xs[ix] - sx, ys[iy] - sy
                depth = -(rx * s + ry * c)
                if depth <= 0.0:
                    continue
                mag = radius / depth
                u = (rx * c - ry * s) * mag
                t = u / radius
                fu = (u - u0) / du
                col = int(math.floor(fu))
                if col < 0 or col + 1 >= n_cols:
                    continue
                wu = fu - col
                top = h * (1.0 + t * t) * (0.5 * math.pi - math.atan(t))
                bottom = -h * (1.0 + t * t) * (0.5 * math.pi + math.atan(t))
                w = dphi[a] * mag * mag
                for iz in range(zv.size):
                    v = (zv[iz] - zs[a]) * mag
                    if use_window and (v > top or v < bottom):
                        continue
                    fv = (v - v0) / dv
                    row = int(math.floor(fv))
                    if row < 0 or row + 1 >= n_rows:
                        continue
                    wv = fv - row
                    val = ((1 - wv) * ((1 - wu) * q[a, row, col] + wu * q[a, row, col + 1])
                           + wv * ((1 - wu) * q[a, row + 1, col] + wu * q[a, row + 1, col + 1]))
                    out[iz, iy, ix] += w * val


def check_window(geom: HelicalGeometry) -> None:
    """Raise if the Tam-Danielsson window does not fit on the detector."""
    det = geom.detector
    half = 0.5 * (det.num_rows - 1) * det.row_spacing
    need = np.max(geom.local_pitch()) * geom.source_detector_distance / (4.0 * geom.source_radius)
    if need > half:
        raise ValueError(
            f"pitch too large for the detector: the Tam-Danielsson window needs "
            f"+-{need:.3g} mm at the central column, detector rows reach +-{half:.3g} mm"
        )


def fbp_reconstruct(
    g: Sinogram,
    geom: HelicalGeometry,
    vol: VolumeSpec,
    bandwidth: float = 0.45,
    window: bool = True,
) -> Volume:
    """Helical FDK reconstruction of ``g`` (line integrals) on ``vol``."""
    if g.data.shape != geom.sinogram_shape:
        raise ValueError(f"sinogram shape {g.data.shape} != geometry {geom.sinogram_shape}")
    if geom.num_angles < 2:
        raise ValueError("need at least two projections")
    if window:
        check_window(geom)
    q = filter_projections(g.data.astype(np.float64), geom, bandwidth)
    det = geom.detector
    scale = geom.source_radius / geom.source_detector_distance
    dphi = np.gradient(geom.angles)
    dx, dy, _ = vol.voxel_size
    xs = (np.arange(vol.width) - (vol.width - 1) / 2.0) * dx
    ys = (np.arange(vol.height) - (vol.height - 1) / 2.0) * dy
    out = np.zeros(vol.shape)
    _backproject(
        q, geom.angles, geom.z_offsets, dphi, geom.local_pitch(), geom.source_radius,
        det.col_offsets()[0] * scale, det.col_spacing * scale,
        det.row_offsets()[0] * scale, det.row_spacing * scale,
        xs, ys, vol.slice_z(), window, out,
    )
    return Volume(vol, out.astype(np.float32))
