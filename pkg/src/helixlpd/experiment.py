"""Desk-scale end-to-end experiment: train the split network on procedural
phantoms and compare it with FBP and Huber on held-out scans.

Trained checkpoints and result summaries are cached under a directory keyed
by the configuration digest, so repeated runs (tests, scripts) reuse them.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DetectorSpec, HelicalGeometry, TurnPartition, VolumeSpec, build_geometry, partition_turns
from .metrics import evaluate, slice_rmse_stability
from .nn import load_checkpoint, save_checkpoint
from .projector import Volume
from .recon.config import HuberConfig, ReconConfig, TrainConfig
from .recon.fbp import fbp_reconstruct
from .recon.huber import huber_solve
from .recon.lpd import ilpdh_reconstruct
from .recon.train import TrainingScan, train
from .simulation import DoseModel, hu_to_mu, random_phantom, simulate_data, truncate_trajectory


@dataclass(frozen=True)
class DeskGeometry:
    width: int = 64
    height: int = 64
    voxel_size: tuple[float, float, float] = (2.0, 2.0, 1.0)
    angles_per_turn: int = 32
    pitch: float = 4.0
    source_radius: float = 250.0
    source_detector_distance: float = 500.0
    detector_cols: int = 64
    detector_rows: int = 8
    col_spacing: float = 6.4
    row_spacing: float = 2.0
    lead_in: float = 12.0  # helix starts this far (mm) below the volume
    extra_turns: float = 6.0  # beyond the volume length, before truncation
    thickness: int = 15  # N_t


@dataclass(frozen=True)
class DeskConfig:
    geometry: DeskGeometry = field(default_factory=DeskGeometry)
    num_slices: int = 30  # five complete turns after truncation
    long_num_slices: int = 34  # six complete turns
    photons: float = 1e4
    train_seeds: tuple[int, ...] = tuple(range(1000, 1016))
    test_seeds: tuple[int, ...] = (2000, 2001, 2002, 2003)
    long_seeds: tuple[int, ...] = (3000, 3001, 3002, 3003)
    recon: ReconConfig = field(default_factory=lambda: ReconConfig(iterations=3, init_mode="fbp"))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=2000, window=3, rng_seed=7))
    huber: HuberConfig = field(default_factory=HuberConfig)
    discard: int = 10

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DeskConfig":
        d = dict(d)
        geo = dict(d.pop("geometry", {}))
        if "voxel_size" in geo:
            geo["voxel_size"] = tuple(geo["voxel_size"])
        recon = ReconConfig(**d.pop("recon", {}))
        train_cfg = TrainConfig(**d.pop("train", {}))
        huber = HuberConfig(**d.pop("huber", {}))
        rest = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(geometry=DeskGeometry(**geo), recon=recon, train=train_cfg, huber=huber, **rest)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def desk_volume(cfg: DeskConfig, num_slices: int) -> VolumeSpec:
    g = cfg.geometry
    return VolumeSpec(g.width, g.height, num_slices, tuple(g.voxel_size), 0.0)


def desk_scan_geometry(cfg: DeskConfig, vol: VolumeSpec) -> tuple[HelicalGeometry, TurnPartition]:
    """Helix covering the volume with margin, truncated and partitioned."""
    g = cfg.geometry
    det = DetectorSpec(g.detector_cols, g.detector_rows, g.col_spacing, g.row_spacing)
    length = vol.num_slices * vol.voxel_size[2]
    turns = length / g.pitch + g.extra_turns
    helix = build_geometry(
        2 * math.pi / g.angles_per_turn, g.pitch, turns, g.source_radius, g.source_detector_distance,
        det, z_start=vol.z_origin - g.lead_in,
    )
    geom = truncate_trajectory(helix, vol)
    return geom, partition_turns(geom, vol, g.thickness)


def make_scan(cfg: DeskConfig, seed: int, num_slices: int) -> TrainingScan:
    vol = desk_volume(cfg, num_slices)
    geom, part = desk_scan_geometry(cfg, vol)
    truth = hu_to_mu(random_phantom(seed, vol))
    sino = simulate_data(truth, geom, DoseModel(cfg.photons, seed))
    return TrainingScan(Volume(vol, truth.data.astype(np.float32)), sino, geom, part)


def trained_params(cfg: DeskConfig, cache_dir, log=print):
    """Train (or load the cached) network for ``cfg``."""
    cache = Path(cache_dir) / cfg.digest()
    ckpt = cache / "model.json"
    if ckpt.exists():
        return load_checkpoint(ckpt), json.loads((cache / "train.json").read_text())
    cache.mkdir(parents=True, exist_ok=True)
    scans = [make_scan(cfg, s, cfg.num_slices) for s in cfg.train_seeds]
    t0 = time.perf_counter()

    def report(step, loss):
        if step % 50 == 0 or step == cfg.train.iterations - 1:
            log(f"step {step:5d}  loss {loss:.5f}  {time.perf_counter() - t0:7.1f}s")

    res = train(scans, cfg.train, cfg.recon, callback=report)
    info = {"seconds": res.seconds, "losses": res.losses, "peak_activation_bytes": res.peak_activation_bytes}
    (cache / "train.json").write_text(json.dumps(info))
    (cache / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    save_checkpoint(res.params, ckpt, extra={"desk_config_digest": cfg.digest()})
    return res.params, info


def run_desk_experiment(cfg: DeskConfig = DeskConfig(), cache_dir="desk_cache", log=print) -> dict:
    """Train/load the model, then evaluate FBP, Huber and iLPDh on held-out
    5-turn scans and the slice-wise RMSE stability on 6-turn scans."""
    cache = Path(cache_dir) / cfg.digest()
    result_path = cache / "results.json"
    if result_path.exists():
        return json.loads(result_path.read_text())
    params, info = trained_params(cfg, cache_dir, log)
    rows = []
    t0 = time.perf_counter()
    for seed in cfg.test_seeds:
        scan = make_scan(cfg, seed, cfg.num_slices)
        vol = scan.partition.volume
        recons = {
            "fbp": fbp_reconstruct(scan.sinogram, scan.geometry, vol),
            "huber": huber_solve(scan.sinogram, scan.geometry, vol, cfg.huber).volume,
            "ilpdh": ilpdh_reconstruct(scan.sinogram, scan.geometry, scan.partition, params, cfg.recon),
        }
        row = {"seed": seed}
        for name, rec in recons.items():
            rep = evaluate(rec, scan.truth, cfg.discard)
            row[name] = {"psnr": rep.psnr, "ssim": rep.ssim}
        log(f"test phantom {seed}: " + "  ".join(f"{k} {v['psnr']:.2f} dB" for k, v in row.items() if k != "seed"))
        rows.append(row)
    ratios = []
    for seed in cfg.long_seeds:
        scan = make_scan(cfg, seed, cfg.long_num_slices)
        rec = ilpdh_reconstruct(scan.sinogram, scan.geometry, scan.partition, params, cfg.recon)
        lo, _ = scan.partition.union_range()
        rep = evaluate(rec, scan.truth, cfg.discard)
        ratios.append(slice_rmse_stability(rep, scan.partition, cfg.train.window, origin=lo))
        log(f"6-turn phantom {seed}: stability ratio {ratios[-1]:.3f}")
    mean = {m: float(np.mean([r[m]["psnr"] for r in rows])) for m in ("fbp", "huber", "ilpdh")}
    out = {
        "config_digest": cfg.digest(),
        "per_phantom": rows,
        "mean_psnr": mean,
        "stability_ratios": ratios,
        "mean_stability_ratio": float(np.mean(ratios)),
        "train_seconds": info["seconds"],
        "eval_seconds": time.perf_counter() - t0,
        "final_loss": float(np.mean(info["losses"][-50:])),
        "initial_loss": float(np.mean(info["losses"][:50])),
    }
    cache.mkdir(parents=True, exist_ok=True)
    result_path.write_text(json.dumps(out, indent=1))
    return out
