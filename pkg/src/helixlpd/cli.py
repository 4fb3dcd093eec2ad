"""``helixlpd`` command line: phantom, simulate, train, reconstruct, evaluate, selftest.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical failure.
Every command writes a run manifest (JSON) next to its main output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict
from importlib import metadata, resources
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- manifests ---------------------------------------------------------------


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import numba
    import scipy
    import torch

    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {
        "helixlpd": pkg, "python": platform.python_version(), "numpy": np.__version__,
        "scipy": scipy.__version__, "numba": numba.__version__, "torch": torch.__version__,
    }


class RunManifest:
    def __init__(self, command: str, argv: list[str], threads: int):
        self.data = {
            "command": command, "argv": argv, "threads": threads, "inputs": {}, "outputs": {},
            "seeds": {}, "config": {}, "versions": _versions(), "timings": {},
        }
        self._t0 = time.perf_counter()

    def input(self, path):
        p = Path(path)
        if p.is_file():
            self.data["inputs"][str(p)] = _digest(p)

    def output(self, path):
        p = Path(path)
        if p.is_file():
            self.data["outputs"][str(p)] = _digest(p)

    def config(self, cfg: dict):
        self.data["config"] = cfg
        self.data["config_hash"] = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]

    def write(self, path):
        from .io import atomic_write_json

        self.data["timings"]["wall_seconds"] = time.perf_counter() - self._t0
        atomic_write_json(path, self.data)


# --- helpers -----------------------------------------------------------------


def _set_threads(n: int | None) -> int:
    if n is None:
        env = os.environ.get("HELICAL_THREADS")
        n = int(env) if env else os.cpu_count() or 1
    if n < 1:
        raise UsageError("--threads must be >= 1")
    import numba
    import torch

    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


def _volume_spec_from(args_spec):
    from .geometry import VolumeSpec

    if args_spec is None:
        text = resources.files("helixlpd.presets").joinpath("phantom.json").read_text()
    else:
        text = Path(args_spec).read_text()
    d = json.loads(text)
    return d, VolumeSpec.from_dict(d["volume"])


def _load_dataset(root: Path):
    from .geometry import load_geometry
    from .io import load_sinogram, load_volume

    manifest = json.loads((root / "manifest.json").read_text())
    geom = load_geometry(root / "geometry.json")
    items = []
    for entry in manifest["items"]:
        truth = load_volume(root / entry["phantom"])
        sino = load_sinogram(root / entry["sinogram"]) if entry.get("sinogram") else None
        items.append((entry, truth, sino))
    return manifest, geom, items


# --- commands ----------------------------------------------------------------


def cmd_phantom(args, man: RunManifest):
    from .io import atomic_write_json, save_volume
    from .simulation import PhantomSpec, make_phantom, random_phantom_spec

    if args.count < 0:
        raise UsageError("--count must be >= 0")
    spec_dict, vol = _volume_spec_from(args.spec)
    if args.spec:
        man.input(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = []
    for k in range(args.count):
        seed = args.seed + k
        if spec_dict.get("ellipsoids"):
            spec = PhantomSpec.from_dict({**spec_dict, "rng_seed": seed})
        else:
            spec = random_phantom_spec(seed, vol)
        name = f"phantom_{k:03d}.vol"
        save_volume(make_phantom(spec), out / name, {"units": "HU", "phantom": spec.to_dict()})
        spec_hash = hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
        items.append({"phantom": name, "seed": seed, "spec_hash": spec_hash})
        man.output(out / name)
    dataset = {"volume": vol.to_dict(), "items": items, "seed": args.seed}
    atomic_write_json(out / "manifest.json", dataset)
    man.data["seeds"] = {"base": args.seed}
    man.config({"volume": vol.to_dict(), "count": args.count})
    return out / "run_phantom.json"


def _geometry_for(args, vol):
    from .experiment import DeskConfig, desk_scan_geometry
    from .geometry import load_geometry
    from .simulation import truncate_trajectory

    if args.geometry == "desk":
        geom, _ = desk_scan_geometry(DeskConfig(), vol)
        return geom
    return truncate_trajectory(load_geometry(args.geometry), vol)


def cmd_simulate(args, man: RunManifest):
    from .geometry import minimal_subvolume_thickness, save_geometry
    from .io import atomic_write_json, save_sinogram
    from .simulation import DoseModel, hu_to_mu, simulate_data

    if not args.photons >= 1:
        raise DataError("--photons must be >= 1 (photon count per detector pixel)")
    root = Path(args.dataset)
    manifest, _, _ = _load_dataset_phantoms(root)
    from .geometry import VolumeSpec
    from .io import load_volume

    vol = VolumeSpec.from_dict(manifest["volume"])
    geom = _geometry_for(args, vol)
    if args.geometry != "desk":
        man.input(args.geometry)
    save_geometry(geom, root / "geometry.json")
    dose_seed = args.seed
    for k, entry in enumerate(manifest["items"]):
        truth = load_volume(root / entry["phantom"])
        if truth.spec.shape != vol.shape:
            raise DataError(f"{entry['phantom']} does not match the dataset volume spec")
        sino = simulate_data(hu_to_mu(truth), geom, DoseModel(args.photons, dose_seed + k))
        name = f"sino_{k:03d}.sin"
        save_sinogram(sino, root / name, {"volume": vol.to_dict(), "photons": args.photons, "seed": dose_seed + k})
        entry["sinogram"] = name
        entry["noise_seed"] = dose_seed + k
        man.output(root / name)
    manifest["photons"] = args.photons
    manifest["geometry_id"] = geom.geometry_id
    manifest["min_thickness"] = minimal_subvolume_thickness(geom, vol)
    atomic_write_json(root / "manifest.json", manifest)
    man.output(root / "geometry.json")
    man.data["seeds"] = {"noise_base": dose_seed}
    man.config({"photons": args.photons, "geometry_id": geom.geometry_id})
    return root / "run_simulate.json"


def _load_dataset_phantoms(root: Path):
    path = root / "manifest.json"
    if not path.exists():
        raise DataError(f"{root} is not a dataset directory (no manifest.json)")
    return json.loads(path.read_text()), None, None


def _thickness(args, manifest, geom, vol):
    from .geometry import minimal_subvolume_thickness

    if getattr(args, "thickness", None):
        return args.thickness
    return manifest.get("min_thickness") or minimal_subvolume_thickness(geom, vol)


def cmd_train(args, man: RunManifest):
    import torch

    from .geometry import VolumeSpec, partition_turns
    from .nn import NetworkParams, save_checkpoint
    from .projector import Volume
    from .recon.config import load_preset
    from .recon.train import TrainingScan, estimate_op_norm, train
    from .simulation import MU_WATER, hu_to_mu

    preset = load_preset(args.preset)
    if args.steps is not None:
        if args.steps < 1:
            raise UsageError("--steps must be >= 1")
        preset = preset.__class__(preset.method, preset.recon, preset.train.__class__(
            **{**asdict(preset.train), "iterations": args.steps}), preset.fbp, preset.huber)
    if args.iterations is not None:
        preset = preset.__class__(preset.method, preset.recon.__class__(
            **{**asdict(preset.recon), "iterations": args.iterations}), preset.train, preset.fbp, preset.huber)
    root = Path(args.dataset)
    manifest, geom, items = _load_dataset(root)
    vol = VolumeSpec.from_dict(manifest["volume"])
    part = partition_turns(geom, vol, _thickness(args, manifest, geom, vol))
    scans = []
    for entry, truth, sino in items:
        if sino is None:
            raise DataError(f"{entry['phantom']} has no simulated sinogram; run simulate first")
        mu = hu_to_mu(truth)
        scans.append(TrainingScan(Volume(vol, mu.data.astype(np.float32)), sino, geom, part))
        man.input(root / entry["phantom"])
        man.input(root / entry["sinogram"])
    if part.num_turns < preset.train.window:
        raise DataError(f"scans have {part.num_turns} complete turns, window needs {preset.train.window}")
    params = NetworkParams.initialize(
        preset.recon.iterations, preset.train.init_seed, MU_WATER, estimate_op_norm(scans[0]),
        torch.float32 if preset.recon.precision == "float32" else torch.float64,
    )
    res = train(scans, preset.train, preset.recon, params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.params, out, extra={
        "preset": preset.to_dict(), "thickness": part.subvolume_thickness, "geometry_id": geom.geometry_id,
    })
    loss_csv = out.with_name(out.name + ".loss.csv")
    with open(loss_csv, "w") as fh:
        fh.write("step,loss\n")
        for k, v in enumerate(res.losses):
            fh.write(f"{k},{v!r}\n")
    man.output(out)
    man.output(loss_csv)
    man.data["seeds"] = {"sampling": preset.train.rng_seed, "init": preset.train.init_seed}
    man.data["timings"]["train_seconds"] = res.seconds
    man.config(preset.to_dict())
    return out.with_name(out.name + ".run.json")


LEARNED = {"ilpdh": None, "g-ilpdh1": 1, "g-ilpdh3": 3}


def cmd_reconstruct(args, man: RunManifest):
    from .geometry import VolumeSpec, load_geometry, partition_turns
    from .io import load_sinogram, save_volume
    from .recon.config import ReconConfig, load_preset
    from .recon.fbp import fbp_reconstruct
    from .recon.huber import huber_solve
    from .recon.lpd import glued_reconstruct, ilpdh_reconstruct

    sino = load_sinogram(args.sinogram)
    geom = load_geometry(args.geometry)
    man.input(args.sinogram)
    man.input(args.geometry)
    if args.volume:
        vol = VolumeSpec.from_dict(json.loads(Path(args.volume).read_text()))
    else:
        side = Path(args.sinogram + ".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        if "volume" not in meta:
            raise DataError("no volume spec: pass --volume or use a sinogram written by simulate")
        vol = VolumeSpec.from_dict(meta["volume"])
    if sino.data.shape != geom.sinogram_shape:
        raise DataError(f"sinogram shape {sino.data.shape} does not match the geometry {geom.sinogram_shape}")
    method = args.method
    if method == "fbp":
        preset = load_preset(args.preset or "fbp")
        out = fbp_reconstruct(sino, geom, vol, preset.fbp.bandwidth, preset.fbp.window)
        man.config(preset.to_dict())
    elif method == "huber":
        preset = load_preset(args.preset or "huber")
        out = huber_solve(sino, geom, vol, preset.huber).volume
        man.config(preset.to_dict())
    else:
        from .nn import load_checkpoint

        if not args.ckpt:
            raise UsageError(f"--ckpt is required for method {method}")
        if not Path(args.ckpt).exists():
            raise DataError(f"checkpoint {args.ckpt} not found")
        ck_meta = json.loads(Path(args.ckpt).read_text())
        extra = ck_meta.get("extra", {})
        recon_cfg = ReconConfig(**extra["preset"]["recon"]) if "preset" in extra else ReconConfig(ck_meta["iterations"])
        params = load_checkpoint(args.ckpt)
        man.input(args.ckpt)
        thickness = args.thickness or extra.get("thickness")
        if not thickness:
            raise DataError("sub-volume thickness unknown: pass --thickness")
        part = partition_turns(geom, vol, thickness)
        if LEARNED[method] is None:
            out = ilpdh_reconstruct(sino, geom, part, params, recon_cfg)
        else:
            out = glued_reconstruct(sino, geom, part, params, recon_cfg, LEARNED[method])
        man.config({"method": method, "recon": asdict(recon_cfg), "thickness": thickness})
    dest = Path(args.out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    save_volume(out, dest, {"units": "mm^-1", "method": method})
    man.output(dest)
    return dest.with_name(dest.name + ".run.json")


def cmd_evaluate(args, man: RunManifest):
    from .geometry import load_geometry, minimal_subvolume_thickness, partition_turns
    from .io import atomic_write_json, load_volume
    from .metrics import evaluate, slice_rmse_stability
    from .projector import Volume
    from .simulation import hu_to_mu

    recon = load_volume(args.recon)
    truth = load_volume(args.truth)
    man.input(args.recon)
    man.input(args.truth)
    side = Path(args.truth + ".json")
    if side.exists() and json.loads(side.read_text()).get("units") == "HU":
        truth = hu_to_mu(truth)
    boundaries = []
    part = None
    if args.geometry:
        geom = load_geometry(args.geometry)
        thickness = args.thickness or minimal_subvolume_thickness(geom, truth.spec)
        part = partition_turns(geom, truth.spec, thickness)
        k0 = int(round((recon.spec.z_origin - truth.spec.z_origin) / truth.spec.voxel_size[2]))
        boundaries = [lo - k0 for lo, _ in part.subvolume_ranges]
    report = evaluate(recon, Volume(truth.spec, truth.data), args.discard, boundaries)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out.with_suffix(".csv")
    report.save(out, csv_path)
    if part is not None and part.num_turns > args.train_turns:
        report_d = report.to_dict()
        report_d["stability_ratio"] = slice_rmse_stability(report, part, args.train_turns, origin=k0)
        atomic_write_json(out, report_d)
    man.output(out)
    man.output(csv_path)
    man.config({"discard": args.discard})
    print(f"PSNR {report.psnr:.3f} dB  SSIM {report.ssim:.4f}")
    return out.with_name(out.name + ".run.json")


def cmd_selftest(args, man: RunManifest):
    from .selftest import run_selftest

    results = run_selftest(fault=args.inject_fault)
    man.data["checks"] = [asdict(r) for r in results]
    failed = [r.name for r in results if not r.passed]
    man.data["passed"] = not failed
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return Path(args.manifest), (EXIT_NUMERICAL if failed else EXIT_OK)


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="helixlpd", description="Helical cone-beam CT: simulation, learned and classical reconstruction.")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $HELICAL_THREADS or all cores)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate procedural ellipsoid phantoms")
    s.add_argument("spec", nargs="?", help="phantom/volume spec JSON (default: built-in desk volume)")
    s.add_argument("--out", required=True, help="dataset directory")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("simulate", help="simulate low-dose data for a dataset")
    s.add_argument("dataset")
    s.add_argument("--geometry", default="desk", help="helix geometry JSON, or 'desk' for the built-in one")
    s.add_argument("--photons", type=float, default=1e4, help="incident photons per pixel H0")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("train", help="train a network on a simulated dataset")
    s.add_argument("dataset")
    s.add_argument("--preset", default="ilpdh3", help="ilpdh3, ilpdh1 or a preset JSON path")
    s.add_argument("--steps", type=int, default=None, help="override the number of training steps")
    s.add_argument("--iterations", type=int, default=None, help="override the number of unrolled iterations M")
    s.add_argument("--thickness", type=int, default=None, help="sub-volume thickness N_t (default: minimal)")
    s.add_argument("--out", required=True, help="checkpoint manifest path")

    s = sub.add_parser("reconstruct", help="reconstruct a sinogram")
    s.add_argument("sinogram")
    s.add_argument("--geometry", required=True)
    s.add_argument("--method", required=True, choices=["fbp", "huber", "ilpdh", "g-ilpdh1", "g-ilpdh3"])
    s.add_argument("--ckpt", help="checkpoint for learned methods")
    s.add_argument("--preset", help="preset name or JSON for fbp/huber")
    s.add_argument("--volume", help="VolumeSpec JSON (default: from the sinogram sidecar)")
    s.add_argument("--thickness", type=int, default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", help="PSNR / SSIM / slice RMSE against ground truth")
    s.add_argument("recon")
    s.add_argument("truth")
    s.add_argument("--geometry", help="geometry JSON, for turn boundaries and the stability ratio")
    s.add_argument("--thickness", type=int, default=None, help="sub-volume thickness N_t (default: minimal)")
    s.add_argument("--discard", type=int, default=10)
    s.add_argument("--train-turns", type=int, default=3)
    s.add_argument("--out", required=True, help="report JSON (a CSV is written alongside)")

    s = sub.add_parser("selftest", help="run built-in consistency checks")
    s.add_argument("--manifest", default="helixlpd-selftest.run.json")
    s.add_argument("--inject-fault", choices=["adjoint"], default=None, help=argparse.SUPPRESS)
    return p


COMMANDS = {
    "phantom": cmd_phantom, "simulate": cmd_simulate, "train": cmd_train,
    "reconstruct": cmd_reconstruct, "evaluate": cmd_evaluate, "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = _set_threads(args.threads)
        man = RunManifest(args.command, argv, threads)
        res = COMMANDS[args.command](args, man)
        path, code = res if isinstance(res, tuple) else (res, EXIT_OK)
        man.write(path)
        return code
    except UsageError as e:
        print(f"helixlpd: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"helixlpd: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ValueError, KeyError, FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"helixlpd: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
