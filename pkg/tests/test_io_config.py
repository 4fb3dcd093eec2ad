import json
import struct

import numpy as np
import pytest

from helixlpd.errors import DataError
from helixlpd.experiment import DeskConfig
from helixlpd.geometry import VolumeSpec
from helixlpd.io import load_sinogram, load_volume, save_sinogram, save_volume
from helixlpd.projector import Sinogram, Volume
from helixlpd.recon.config import PRESET_NAMES, Preset, load_preset

SPEC = VolumeSpec(5, 4, 3, (1.0, 2.0, 0.5), -1.0)


def test_volume_roundtrip(tmp_path):
    data = np.arange(60, dtype=np.float32).reshape(SPEC.shape)
    save_volume(Volume(SPEC, data), tmp_path / "v.vol", {"units": "HU"})
    back = load_volume(tmp_path / "v.vol")
    assert back.spec == SPEC and np.array_equal(back.data, data)
    blob = (tmp_path / "v.vol").read_bytes()
    assert blob[:8] == b"HCTVOL01"
    assert struct.unpack_from("<III", blob, 8) == (1, 0, 3)
    assert struct.unpack_from("<3I", blob, 20) == (3, 4, 5)
    assert len(blob) == 32 + 60 * 4


def test_sinogram_roundtrip(tmp_path):
    data = np.random.default_rng(0).standard_normal((6, 2, 3)).astype(np.float32)
    save_sinogram(Sinogram("abc", data), tmp_path / "s.sin")
    back = load_sinogram(tmp_path / "s.sin")
    assert back.geom_ref == "abc" and np.array_equal(back.data, data)


def test_corrupt_files(tmp_path):
    save_volume(Volume(SPEC, np.zeros(SPEC.shape)), tmp_path / "v.vol")
    with pytest.raises(DataError):
        load_sinogram(tmp_path / "v.vol")
    blob = (tmp_path / "v.vol").read_bytes()
    (tmp_path / "t.vol").write_bytes(blob[:-4])
    (tmp_path / "t.vol.json").write_text((tmp_path / "v.vol.json").read_text())
    with pytest.raises(DataError):
        load_volume(tmp_path / "t.vol")
    meta = json.loads((tmp_path / "v.vol.json").read_text())
    meta["spec"]["width"] = 6
    (tmp_path / "v.vol.json").write_text(json.dumps(meta))
    with pytest.raises(DataError):
        load_volume(tmp_path / "v.vol")


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_presets_load(name):
    p = load_preset(name)
    assert Preset.from_dict(p.to_dict()) == p


def test_preset_contents():
    assert load_preset("ilpdh3").train.window == 3
    assert load_preset("ilpdh1").train.window == 1
    for name in ("ilpdh1", "ilpdh3"):
        p = load_preset(name)
        assert p.train.lr == 5e-4 and p.train.batch_size == 1 and p.train.iterations == 5000
        assert p.recon.init_mode == "zeros"
    h = load_preset("huber").huber
    assert (h.lam, h.theta, h.iterations) == (0.15, 0.0012, 20)
    f = load_preset("fbp").fbp
    assert f.bandwidth == 0.45 and f.window


def test_preset_rejects_unknown_keys(tmp_path):
    d = load_preset("fbp").to_dict()
    d["fbp"]["cutoff"] = 1
    (tmp_path / "p.json").write_text(json.dumps(d))
    with pytest.raises(ValueError):
        load_preset(tmp_path / "p.json")


def test_preset_digest_stable():
    assert load_preset("ilpdh3").digest() == load_preset("ilpdh3").digest()
    assert load_preset("ilpdh3").digest() != load_preset("ilpdh1").digest()


def test_desk_config_roundtrip_and_shipped_copy():
    from importlib import resources

    cfg = DeskConfig()
    assert DeskConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    shipped = json.loads(resources.files("helixlpd.presets").joinpath("desk.json").read_text())
    assert DeskConfig.from_dict(shipped).digest() == cfg.digest()
