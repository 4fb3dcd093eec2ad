"""Binary raster files with JSON sidecars.

Layout: 8-byte magic (``HCTVOL01`` or ``HCTSIN01``), little-endian u32 format
version, u32 reserved, u32 number of dims, the dims as u32 in layout order,
then the little-endian float32 payload in row-major order. The sidecar
``<file>.json`` holds the physical metadata.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import VolumeSpec
from .projector import Sinogram, Volume

VOLUME_MAGIC = b"HCTVOL01"
SINOGRAM_MAGIC = b"HCTSIN01"
FORMAT_VERSION = 1


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def atomic_write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def atomic_write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def _write_raster(path, magic: bytes, data: np.ndarray, meta: dict) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    header = magic + struct.pack("<III", FORMAT_VERSION, 0, data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    atomic_write_bytes(path, header + data.tobytes())
    atomic_write_json(_sidecar(Path(path)), meta)


def _read_raster(path, magic: bytes) -> tuple[np.ndarray, dict]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 20 or blob[:8] != magic:
        raise DataError(f"{path}: not a {magic.decode()} file")
    version, _, ndim = struct.unpack_from("<III", blob, 8)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    dims = struct.unpack_from(f"<{ndim}I", blob, 20)
    offset = 20 + 4 * ndim
    count = int(np.prod(dims))
    if len(blob) != offset + 4 * count:
        raise DataError(f"{path}: payload size does not match header dims {dims}")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)
    side = _sidecar(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    return data, meta


def save_volume(vol: Volume, path, extra: dict | None = None) -> None:
    meta = {"kind": "volume", "spec": vol.spec.to_dict(), **(extra or {})}
    _write_raster(path, VOLUME_MAGIC, vol.data, meta)


def load_volume(path) -> Volume:
    data, meta = _read_raster(path, VOLUME_MAGIC)
    if "spec" not in meta:
        raise DataError(f"{path}: sidecar lacks the volume spec")
    spec = VolumeSpec.from_dict(meta["spec"])
    if spec.shape != data.shape:
        raise DataError(f"{path}: sidecar spec {spec.shape} does not match data {data.shape}")
    return Volume(spec, data)


def save_sinogram(sino: Sinogram, path, extra: dict | None = None) -> None:
    meta = {"kind": "sinogram", "geometry_id": sino.geom_ref, **(extra or {})}
    _write_raster(path, SINOGRAM_MAGIC, sino.data, meta)


def load_sinogram(path) -> Sinogram:
    data, meta = _read_raster(path, SINOGRAM_MAGIC)
    return Sinogram(meta.get("geometry_id", ""), data)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
