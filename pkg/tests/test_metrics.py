import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from helixlpd.errors import DataError
from helixlpd.geometry import TurnPartition, VolumeSpec
from helixlpd.metrics import SSIM_METHOD, evaluate, psnr, slice_rmse_stability, ssim, ssim_slice
from helixlpd.projector import Volume


def _pair(seed, shape=(6, 24, 20), noise=0.1):
    rng = np.random.default_rng(seed)
    truth = rng.uniform(0, 1, shape)
    return truth + noise * rng.standard_normal(shape), truth


def test_psnr_hand_value():
    truth = np.array([0.0, 2.0, 2.0, 2.0])
    recon = truth + np.array([0.2, -0.2, 0.2, -0.2])
    assert psnr(recon, truth) == pytest.approx(10 * math.log10(4 / 0.04), abs=1e-12)
    assert psnr(truth, truth) == math.inf


def test_psnr_against_skimage():
    recon, truth = _pair(0)
    rng = truth.max() - truth.min()
    assert psnr(recon, truth) == pytest.approx(peak_signal_noise_ratio(truth, recon, data_range=rng), abs=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_against_skimage(seed):
    recon, truth = _pair(seed, noise=0.05 * (seed + 1))
    rng = truth.max() - truth.min()
    ref = np.mean([
        structural_similarity(t, r, data_range=rng, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        for r, t in zip(recon, truth)
    ])
    assert ssim(recon, truth) == pytest.approx(ref, abs=1e-10)


def test_ssim_identity_and_symmetry():
    recon, truth = _pair(4)
    assert ssim_slice(truth[0], truth[0], 1.0) == pytest.approx(1.0, abs=1e-12)
    assert ssim_slice(truth[0], recon[0], 1.0) == pytest.approx(ssim_slice(recon[0], truth[0], 1.0), abs=1e-14)


def test_ssim_too_small():
    with pytest.raises(DataError):
        ssim_slice(np.zeros((5, 20)), np.zeros((5, 20)), 1.0)


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(5)
    truth = rng.uniform(0, 1, (4, 16, 16))
    base = rng.standard_normal(truth.shape)
    values = [psnr(truth + a * base, truth) for a in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(values, values[1:]))


def _vol(data, z0=0.0):
    spec = VolumeSpec(data.shape[2], data.shape[1], data.shape[0], (1.0, 1.0, 1.0), z0)
    return Volume(spec, data)


def test_evaluate_discard_and_rmse_identity():
    recon, truth = _pair(6, shape=(30, 16, 16))
    rep = evaluate(_vol(recon), _vol(truth), discard=10)
    assert rep.retained_range == (10, 20)
    assert len(rep.slice_rmse) == 10
    r, t = recon[10:20], truth[10:20]
    mse = np.mean((r - t) ** 2)
    assert abs(np.mean(np.square(rep.slice_rmse)) - mse) <= 1e-12 * mse
    assert rep.psnr == pytest.approx(psnr(r, t))
    assert rep.ssim_method == SSIM_METHOD


def test_evaluate_crops_truth_to_recon_range():
    recon, truth = _pair(7, shape=(40, 16, 16))
    sub = _vol(recon[5:30], z0=5.0)
    rep = evaluate(sub, _vol(truth), discard=3)
    assert rep.psnr == pytest.approx(psnr(recon[8:27], truth[8:27]))


def test_evaluate_errors():
    recon, truth = _pair(8, shape=(12, 16, 16))
    with pytest.raises(DataError):
        evaluate(_vol(recon), _vol(truth), discard=6)
    with pytest.raises(DataError):
        evaluate(_vol(recon), _vol(truth[:, :8]), discard=1)
    with pytest.raises(DataError):
        evaluate(_vol(recon, z0=3.0), _vol(truth), discard=1)


def test_report_serialization(tmp_path):
    recon, truth = _pair(9, shape=(24, 16, 16))
    rep = evaluate(_vol(recon), _vol(truth), discard=2)
    rep.save(tmp_path / "r.json", tmp_path / "r.csv")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["psnr"] == rep.psnr and d["ssim_method"] == SSIM_METHOD
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "slice_index,rmse" and len(lines) == 21
    assert lines[1].startswith("2,")


def _partition(centers, thickness=5, n=40):
    slabs = tuple((c - thickness // 2, c - thickness // 2 + thickness) for c in centers)
    turns = tuple((10 * j, 10 * j + 10) for j in range(len(centers)))
    return TurnPartition(turns, (0, 0), (turns[-1][1],) * 2, slabs, tuple(centers), thickness, turns[-1][1])


def test_stability_ratio():
    part = _partition([4, 8, 12, 16, 20, 24])
    from helixlpd.metrics import EvalReport

    # slices 2..27 retained; slices nearest turns 0-2 have RMSE 1, later ones 1.5
    z = np.arange(2, 28)
    centers = np.array(part.subvolume_centers)
    turn = np.argmin(np.abs(z[:, None] - centers), axis=1)
    rmse = np.where(turn < 3, 1.0, 1.5)
    rep = EvalReport(0.0, 0.0, rmse.tolist(), (2, 28))
    assert slice_rmse_stability(rep, part, 3) == pytest.approx(1.5)
    # slice 10 sits midway between centers 8 and 12 and goes to the earlier turn
    assert turn[8] == 1
    with pytest.raises(DataError):
        slice_rmse_stability(rep, _partition([4, 8, 12]), 3)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 2.0))
def test_psnr_scale_invariance(seed, shift):
    recon, truth = _pair(seed, shape=(2, 12, 12))
    assert psnr(recon + shift, truth + shift) == pytest.approx(psnr(recon, truth), abs=1e-9)
