"""Solver and training configuration, loadable from the JSON presets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path


@dataclass(frozen=True)
class ReconConfig:
    iterations: int = 10  # M
    init_mode: str = "zeros"  # zeros | fbp
    precision: str = "float32"  # float32 | float64
    fbp_bandwidth: float = 0.45

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations (M) must be >= 1")
        if self.init_mode not in ("zeros", "fbp"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 1
    lr: float = 5e-4
    window: int = 3
    rng_seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")


@dataclass(frozen=True)
class FBPConfig:
    bandwidth: float = 0.45
    window: bool = True


@dataclass(frozen=True)
class HuberConfig:
    lam: float = 0.15
    theta: float = 0.0012
    iterations: int = 20
    init_mode: str = "zeros"  # zeros | fbp
    power_iterations: int = 20


@dataclass(frozen=True)
class Preset:
    """A named method with all its numeric settings."""

    method: str
    recon: ReconConfig = field(default_factory=ReconConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fbp: FBPConfig = field(default_factory=FBPConfig)
    huber: HuberConfig = field(default_factory=HuberConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Preset":
        def build(kind, sub):
            allowed = {f.name for f in fields(kind)}
            unknown = set(sub) - allowed
            if unknown:
                raise ValueError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
            return kind(**sub)

        return cls(
            d["method"],
            build(ReconConfig, d.get("recon", {})),
            build(TrainConfig, d.get("train", {})),
            build(FBPConfig, d.get("fbp", {})),
            build(HuberConfig, d.get("huber", {})),
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


PRESET_NAMES = ("ilpdh1", "ilpdh3", "fbp", "huber")


def load_preset(name_or_path) -> Preset:
    """Load a shipped preset by name or any preset JSON by path."""
    if str(name_or_path) in PRESET_NAMES:
        text = resources.files("helixlpd.presets").joinpath(f"{name_or_path}.json").read_text()
    else:
        text = Path(name_or_path).read_text()
    return Preset.from_dict(json.loads(text))
