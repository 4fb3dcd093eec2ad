import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helixlpd.geometry import (
    DetectorSpec, HelicalGeometry, VolumeSpec, build_geometry, detector_cell_position,
    minimal_subvolume_thickness, partition_turns, source_position,
)

DET = DetectorSpec(5, 3, 1.0, 2.0)


def test_single_turn_angles_and_z():
    g = build_geometry(2 * math.pi / 8, 8.0, 1.0, 500.0, 1000.0, DET)
    assert np.allclose(g.angles, np.arange(8) * math.pi / 4)
    assert np.allclose(g.z_offsets, np.arange(8.0))


def test_pitch_list_second_turn_steps():
    g = build_geometry(2 * math.pi / 8, [8.0, 16.0], 2.0, 500.0, 1000.0, DET)
    assert np.allclose(np.diff(g.z_offsets)[:7], 1.0)
    assert np.allclose(np.diff(g.z_offsets)[8:], 2.0)


def test_fine_sampling_count():
    g = build_geometry(2 * math.pi / 1152, 20.0, 3.0, 500.0, 1000.0, DET)
    assert g.num_angles == 3456


@pytest.mark.parametrize("phi,z,r,expected", [
    (0.0, 0.0, 500.0, (0.0, 500.0, 0.0)),
    (math.pi / 2, 3.0, 500.0, (500.0, 0.0, 3.0)),
    (math.pi / 4, 1.0, 2.0, (math.sqrt(2), math.sqrt(2), 1.0)),
])
def test_source_position(phi, z, r, expected):
    g = HelicalGeometry(np.array([phi]), np.array([z]), r, 2 * r, DET)
    assert np.allclose(source_position(g, 0), expected, atol=1e-12)


def test_source_position_range():
    g = build_geometry(1.0, 1.0, 1.0, 10.0, 20.0, DET)
    with pytest.raises(IndexError):
        source_position(g, g.num_angles)


def test_detector_cells():
    g = HelicalGeometry(np.array([0.0, 1.1]), np.array([0.0, 0.5]), 500.0, 800.0, DET)
    assert np.allclose(detector_cell_position(g, 0, 2, 1), (0.0, 500.0 - 800.0, 0.0))
    for i in range(2):
        a = detector_cell_position(g, i, 2, 1)
        b = detector_cell_position(g, i, 2, 2)
        assert np.allclose(b - a, (0, 0, DET.row_spacing))
    step = detector_cell_position(g, 0, 3, 1) - detector_cell_position(g, 0, 2, 1)
    assert np.allclose(step, (DET.col_spacing, 0, 0))


def test_detector_plane_orthogonal_to_central_ray():
    g = build_geometry(0.37, 3.0, 2.0, 100.0, 180.0, DET)
    for i in range(g.num_angles):
        s = source_position(g, i)
        c = detector_cell_position(g, i, 2, 1)
        u = detector_cell_position(g, i, 3, 1) - c
        axis = c - s
        assert abs(np.dot(axis, u)) < 1e-9
        assert abs(np.linalg.norm(axis) - 180.0) < 1e-9


def test_geometry_validation():
    with pytest.raises(ValueError):
        HelicalGeometry(np.array([0.0, 0.0]), np.array([0.0, 1.0]), 10.0, 20.0, DET)
    with pytest.raises(ValueError):
        HelicalGeometry(np.array([0.0]), np.array([0.0]), 10.0, 5.0, DET)
    with pytest.raises(ValueError):
        build_geometry(1.0, -1.0, 1.0, 10.0, 20.0, DET)


def test_json_roundtrip_and_id(tmp_path):
    from helixlpd.geometry import load_geometry, save_geometry

    g = build_geometry(0.3, [2.0, 3.0], 2.0, 40.0, 80.0, DET, z_start=-1.5)
    save_geometry(g, tmp_path / "g.json")
    h = load_geometry(tmp_path / "g.json")
    assert np.array_equal(g.angles, h.angles) and np.array_equal(g.z_offsets, h.z_offsets)
    assert g.geometry_id == h.geometry_id


def _vol(nz=40):
    return VolumeSpec(8, 8, nz, (1.0, 1.0, 1.0), 0.0)


def test_exact_two_turns():
    g = build_geometry(2 * math.pi / 16, 2.0, 2.0, 40.0, 80.0, DetectorSpec(12, 4, 2.4, 1.5), z_start=15.0)
    p = partition_turns(g, _vol(), 12)
    assert p.num_turns == 2
    assert p.head_discard[0] == p.head_discard[1]
    assert p.tail_discard[0] == p.tail_discard[1]


def test_fractional_turns_tail():
    g = build_geometry(2 * math.pi / 10, 2.0, 3.4, 40.0, 80.0, DetectorSpec(12, 4, 2.4, 1.5), z_start=15.0)
    p = partition_turns(g, _vol(), 12)
    assert p.num_turns == 3
    assert p.tail_discard == (30, 34)


def test_fixed_thickness_slab_shape():
    # a slab thickness of 20 slices gives sub-volumes of 20 slices
    g = build_geometry(2 * math.pi / 16, 2.0, 3.0, 40.0, 80.0, DetectorSpec(12, 4, 2.4, 1.5), z_start=15.0)
    p = partition_turns(g, _vol(), 20)
    assert all(hi - lo == 20 for lo, hi in p.subvolume_ranges)


def test_thickness_too_small_rejected():
    g = build_geometry(2 * math.pi / 16, 2.0, 2.0, 40.0, 80.0, DetectorSpec(12, 4, 2.4, 1.5), z_start=15.0)
    t = minimal_subvolume_thickness(g, _vol())
    partition_turns(g, _vol(), t)
    with pytest.raises(ValueError):
        partition_turns(g, _vol(), t - 2)


def test_no_complete_turn():
    g = build_geometry(2 * math.pi / 16, 2.0, 0.5, 40.0, 80.0, DET, z_start=15.0)
    with pytest.raises(ValueError):
        partition_turns(g, _vol(), 12)


@settings(max_examples=40, deadline=None)
@given(
    per_turn=st.integers(4, 40),
    turns=st.floats(1.0, 4.9),
    start=st.floats(0.0, 6.0),
    align=st.one_of(st.none(), st.floats(0.0, 6.28)),
)
def test_partition_completeness(per_turn, turns, start, align):
    g = build_geometry(2 * math.pi / per_turn, 1.0, turns, 40.0, 80.0, DetectorSpec(4, 2, 1.0, 0.5),
                       z_start=20.0, start_angle=start)
    try:
        p = partition_turns(g, _vol(60), 15, align_to=align)
    except ValueError:
        return  # no complete turn after alignment
    pieces = [p.head_discard, *p.turn_ranges, p.tail_discard]
    idx = np.concatenate([np.arange(a, b) for a, b in pieces])
    assert np.array_equal(idx, np.arange(g.num_angles))
    for a, b in p.turn_ranges:
        span = g.angles[b - 1] - g.angles[a] + 2 * math.pi / per_turn
        assert abs(span - 2 * math.pi) < 1e-6


def test_window_partition_is_relative(tiny):
    geom, vol, part = tiny
    w = part.window(1, 1)
    assert w.num_turns == 1
    assert w.turn_ranges[0] == (0, part.turn_ranges[1][1] - part.turn_ranges[1][0])
    lo, hi = part.subvolume_ranges[1]
    assert w.subvolume_ranges[0] == (0, hi - lo)
