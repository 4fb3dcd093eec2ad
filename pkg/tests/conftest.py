import math

import numpy as np
import pytest
import torch

from helixlpd.geometry import DetectorSpec, VolumeSpec, build_geometry
from helixlpd.selftest import _tiny_case


@pytest.fixture
def tiny():
    """8x8x12 volume, 2 complete turns of 16 views, 12x4 detector."""
    return _tiny_case()


def random_tiny_case(rng: np.random.Generator):
    """A randomized small helix and volume within the adjoint-test limits."""
    nx = int(rng.integers(4, 17))
    ny = int(rng.integers(4, 17))
    nz = int(rng.integers(6, 25))
    vox = (float(rng.uniform(0.8, 2.0)), float(rng.uniform(0.8, 2.0)), float(rng.uniform(0.5, 1.5)))
    vol = VolumeSpec(nx, ny, nz, vox, float(rng.uniform(-3, 3)))
    cols = int(rng.integers(4, 25))
    rows = int(rng.integers(2, 9))
    det = DetectorSpec(cols, rows, float(rng.uniform(1.5, 4.0)), float(rng.uniform(0.5, 2.0)))
    per_turn = int(rng.integers(6, 33))
    turns = float(rng.uniform(0.8, 64 / per_turn))
    pitch = float(rng.uniform(1.0, 6.0))
    radius = float(rng.uniform(30, 60))
    z0 = vol.z_origin + float(rng.uniform(0, nz * vox[2] / 2))
    geom = build_geometry(2 * math.pi / per_turn, pitch, turns, radius, 2 * radius, det, z_start=z0)
    return geom, vol


def set_seed(seed=0):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and rep.when == "call":
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL", props["detail"]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for n, status, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {n:2d} {status}  {detail}")
