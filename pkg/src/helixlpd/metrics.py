"""Image-quality metrics under a slice-discard protocol.

PSNR uses the dynamic range ``max - min`` of the ground truth. SSIM is the
standard 2D index (11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03,
population statistics, same dynamic range), evaluated per slice on the valid
region of the window and averaged over slices.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DataError
from .geometry import TurnPartition
from .projector import Volume

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_METHOD = "2d-per-slice-gaussian11-sigma1.5-valid-population"


def psnr(recon: np.ndarray, truth: np.ndarray, data_range: float | None = None) -> float:
    """10 log10(range^2 / MSE); ``inf`` for identical inputs."""
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise DataError(f"shape mismatch {recon.shape} vs {truth.shape}")
    rng = float(truth.max() - truth.min()) if data_range is None else data_range
    mse = float(np.mean((recon - truth) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(rng * rng / mse)


def _gaussian_kernel():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-(x * x) / (2 * SSIM_SIGMA ** 2))
    return k / k.sum()


def _filter2d(img, k):
    # separable correlation; only the valid region is kept
    out = correlate1d(img, k, axis=0, mode="constant")
    out = correlate1d(out, k, axis=1, mode="constant")
    r = SSIM_WINDOW // 2
    return out[r:-r, r:-r]


def ssim_slice(x: np.ndarray, y: np.ndarray, data_range: float) -> float:
    """Mean SSIM of two 2D images (``x`` reference)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if min(x.shape) < SSIM_WINDOW:
        raise DataError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    k = _gaussian_kernel()
    mx, my = _filter2d(x, k), _filter2d(y, k)
    sxx = _filter2d(x * x, k) - mx * mx
    syy = _filter2d(y * y, k) - my * my
    sxy = _filter2d(x * y, k) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def ssim(recon: np.ndarray, truth: np.ndarray, data_range: float | None = None) -> float:
    """Average of :func:`ssim_slice` over the slices (axis 0)."""
    if recon.shape != truth.shape:
        raise DataError(f"shape mismatch {recon.shape} vs {truth.shape}")
    rng = float(truth.max() - truth.min()) if data_range is None else data_range
    return float(np.mean([ssim_slice(t, r, rng) for r, t in zip(recon, truth)]))


@dataclass
class EvalReport:
    psnr: float
    ssim: float
    slice_rmse: list[float]
    retained_range: tuple[int, int]
    z_origin: float = 0.0
    boundaries: list[int] = field(default_factory=list)
    ssim_method: str = SSIM_METHOD

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psnr"] = "inf" if math.isinf(self.psnr) else self.psnr
        d["retained_range"] = list(self.retained_range)
        return d

    def save(self, json_path, csv_path=None):
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=1))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["slice_index", "rmse"])
                lo = self.retained_range[0]
                for k, v in enumerate(self.slice_rmse):
                    w.writerow([lo + k, repr(v)])


def _align(recon: Volume, truth: Volume) -> np.ndarray:
    """Truth restricted to the reconstruction's slices."""
    rs, ts = recon.spec, truth.spec
    if rs.shape[1:] != ts.shape[1:] or tuple(rs.voxel_size) != tuple(ts.voxel_size):
        raise DataError("reconstruction and truth grids differ")
    k = (rs.z_origin - ts.z_origin) / ts.voxel_size[2]
    k0 = int(round(k))
    if abs(k - k0) > 1e-6 or k0 < 0 or k0 + rs.num_slices > ts.num_slices:
        raise DataError("reconstruction slices are not contained in the truth volume")
    return truth.data[k0:k0 + rs.num_slices]


def evaluate(recon: Volume, truth: Volume, discard: int = 10, boundaries=()) -> EvalReport:
    """PSNR / SSIM / slice RMSE on slices ``[discard, N_z - discard)`` of ``recon``.

    ``truth`` may cover more slices than ``recon``; it is cropped to the
    reconstruction's z range first. Slice indices in the report are relative
    to the reconstruction.
    """
    t = _align(recon, truth).astype(np.float64)
    r = recon.data.astype(np.float64)
    n = r.shape[0]
    if n <= 2 * discard:
        raise DataError(f"{n} slices leave nothing after discarding {discard} at each end")
    lo, hi = discard, n - discard
    r, t = r[lo:hi], t[lo:hi]
    rng = float(t.max() - t.min())
    rmse = np.sqrt(np.mean((r - t) ** 2, axis=(1, 2)))
    return EvalReport(
        psnr(r, t, rng), ssim(r, t, rng), rmse.tolist(), (lo, hi), recon.spec.z_origin, list(boundaries),
    )


def slice_rmse_stability(report: EvalReport, partition: TurnPartition, train_turns: int = 3, origin: int = 0) -> float:
    """Mean slice RMSE over turns after the first ``train_turns`` divided by
    the mean over the first ``train_turns``.

    Each retained slice belongs to the turn whose slab center is nearest
    (ties go to the earlier turn). ``origin`` is the index, in the partition's
    slice numbering, of the reconstruction's slice 0.
    """
    if partition.num_turns < train_turns + 1:
        raise DataError(f"need at least {train_turns + 1} turns, partition has {partition.num_turns}")
    centers = np.asarray(partition.subvolume_centers, dtype=float)
    lo, hi = report.retained_range
    z = np.arange(lo, hi) + origin
    turn = np.argmin(np.abs(z[:, None] - centers[None, :]), axis=1)
    rmse = np.asarray(report.slice_rmse)
    early, late = rmse[turn < train_turns], rmse[turn >= train_turns]
    if early.size == 0 or late.size == 0:
        raise DataError("retained slices do not reach both groups of turns")
    return float(late.mean() / early.mean())
