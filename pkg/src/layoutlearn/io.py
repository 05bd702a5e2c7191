"""File formats: LAYL checkpoints, VOXL voxel grids, PNG/PPM images, TOML run configs."""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .compositor import LayoutSet, SceneModel
from .field import VoxelField, field_from_vector

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

CKPT_MAGIC = b"LAYL"
CKPT_VERSION = 1
VOXL_MAGIC = "VOXL"
VOXL_VERSION = 1


class CheckpointError(ValueError):
    pass


class VoxelParseError(ValueError):
    pass


class ConfigFileError(ValueError):
    pass


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# checkpoints

def checkpoint_bytes(model: SceneModel, optimizer_state: np.ndarray | None = None) -> bytes:
    K, N = model.n_fields, model.n_layouts
    parts = [CKPT_MAGIC, struct.pack("<III", CKPT_VERSION, K, N)]
    for f in model.fields:
        v = np.asarray(f.to_vector(), dtype="<f8")
        parts += [struct.pack("<Q", v.size), v.tobytes()]
    parts.append(np.asarray(model.layout_array(), dtype="<f8").tobytes())
    opt = np.zeros(0) if optimizer_state is None else np.asarray(optimizer_state, dtype="<f8").ravel()
    parts += [struct.pack("<Q", opt.size), opt.astype("<f8").tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, model: SceneModel, optimizer_state: np.ndarray | None = None) -> None:
    _atomic_write(path, checkpoint_bytes(model, optimizer_state))


def parse_checkpoint(data: bytes):
    """``(SceneModel, optimizer state or None)``; the CRC is verified before anything is built."""
    if len(data) < 20 or data[:4] != CKPT_MAGIC:
        raise CheckpointError("not a LAYL checkpoint (bad magic at byte 0)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch; file is corrupted")
    version, K, N = struct.unpack_from("<III", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    off = 16

    def take_f64(count: int) -> np.ndarray:
        nonlocal off
        end = off + 8 * count
        if end > len(body):
            raise CheckpointError(f"truncated checkpoint: need {end} bytes, have {len(body)}")
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).astype(np.float64)
        off = end
        return arr

    def take_u64() -> int:
        nonlocal off
        if off + 8 > len(body):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        (n,) = struct.unpack_from("<Q", body, off)
        off += 8
        return n

    vectors = [take_f64(take_u64()) for _ in range(K)]
    layouts = take_f64(N * K * 8).reshape(N, K, 8)
    opt = take_f64(take_u64())
    if off != len(body):
        raise CheckpointError(f"{len(body) - off} trailing bytes after optimizer blob")
    fields = [field_from_vector(v) for v in vectors]
    return SceneModel(fields, LayoutSet.from_array(layouts)), (opt if opt.size else None)


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())


# voxel grids

def voxel_bytes(vox: VoxelField) -> bytes:
    nx, ny, nz = vox.resolution
    nums = " ".join(repr(float(x)) for x in (*vox.lo, *vox.hi))
    header = f"{VOXL_MAGIC} {VOXL_VERSION} {nx} {ny} {nz} {nums}\n".encode("ascii")
    # x-fastest: iterate z, then y, then x
    dens = vox.density.transpose(2, 1, 0).astype("<f4").tobytes()
    rgb = vox.albedo.transpose(2, 1, 0, 3).astype("<f4").tobytes()
    return header + dens + rgb


def export_voxel(vox: VoxelField, path) -> None:
    _atomic_write(path, voxel_bytes(vox))


def parse_voxel(data: bytes) -> VoxelField:
    nl = data.find(b"\n")
    if nl < 0:
        raise VoxelParseError("missing header line terminator (no newline found from byte 0)")
    try:
        tokens = data[:nl].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise VoxelParseError(f"non-ASCII header at byte {exc.start}") from exc
    if not tokens or tokens[0] != VOXL_MAGIC:
        raise VoxelParseError("bad magic at byte 0: expected 'VOXL'")
    if len(tokens) != 11:
        raise VoxelParseError(f"header has {len(tokens)} fields, expected 11 (bytes 0..{nl})")
    try:
        version = int(tokens[1])
        nx, ny, nz = (int(t) for t in tokens[2:5])
        bounds = [float(t) for t in tokens[5:11]]
    except ValueError as exc:
        raise VoxelParseError(f"bad header number in bytes 0..{nl}: {exc}") from exc
    if version != VOXL_VERSION:
        raise VoxelParseError(f"unsupported VOXL version {version} at byte 5")
    if min(nx, ny, nz) < 2:
        raise VoxelParseError("grid needs at least 2 nodes per axis")
    m = nx * ny * nz
    start = nl + 1
    expected, actual = 16 * m, len(data) - start
    if actual != expected:
        raise VoxelParseError(
            f"payload starting at byte {start} is {actual} bytes, expected {expected} for a {nx}x{ny}x{nz} grid"
        )
    dens = np.frombuffer(data, "<f4", m, start).astype(np.float64).reshape(nz, ny, nx).transpose(2, 1, 0)
    rgb = np.frombuffer(data, "<f4", 3 * m, start + 4 * m).astype(np.float64)
    rgb = rgb.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
    try:
        return VoxelField(np.ascontiguousarray(dens), np.ascontiguousarray(rgb), bounds[:3], bounds[3:])
    except ValueError as exc:
        raise VoxelParseError(str(exc)) from exc


def import_voxel(path) -> VoxelField:
    return parse_voxel(Path(path).read_bytes())


# images

def to_uint8(buf) -> np.ndarray:
    a = np.asarray(buf, dtype=np.float64)
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[-1] != 3):
        raise ValueError(f"image must be (H, W) or (H, W, 3), got {a.shape}")
    if not np.all((a >= 0.0) & (a <= 1.0)):
        raise ValueError("image values must lie in [0, 1]")
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def export_image(buf, path) -> None:
    """8-bit PNG, or binary PPM when the path ends in ``.ppm``."""
    path = Path(path)
    img = Image.fromarray(to_uint8(buf))
    fmt = "PPM" if path.suffix.lower() == ".ppm" else "PNG"
    if fmt == "PPM" and img.mode != "RGB":
        img = img.convert("RGB")
    img.save(path, format=fmt)


def read_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


# run configuration

_SCHEMA = {
    "scene": {"k": int, "n_layouts": int, "prompt": str, "assets": list, "target_volume": str},
    "field": {"octaves": int, "hidden": int, "depth": int, "density_bias": float, "blob_amplitude": float,
              "blob_sigma": float},
    "train": {"steps": int, "seed": int, "mode": str, "peak_lr": float, "start_lr": float, "end_lr": float,
              "warmup_steps": int, "blob_decay_steps": int, "layout_lr_multiplier": float,
              "textureless_prob": float},
    "render": {"width": int, "height": int, "samples_per_ray": int, "near": float, "far": float,
               "azimuth": list, "elevation": list, "radius": float, "fov_y": float, "background": (str, list),
               "views": list},
    "guidance": {"provider": str, "target_image": str, "target_volume": str, "endpoint": str,
                 "transport": str, "timeout": float, "max_retries": int, "cfg": float},
    "loss": {"acc": float, "empty": float, "rec": float, "empty_margin": float, "soft_bin_temperature": float},
    "freeze": {"fields": list, "transforms": list},
    "eval": {"num_views": int, "elevation": float, "seeds": int, "scorer": str, "grid_resolution": int,
             "density_threshold": float, "objects": list, "texts": list},
}


@dataclass
class RunConfig:
    """Parsed TOML run configuration; each section is a plain dict of validated keys."""

    sections: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    def path(self, section: str, key: str):
        v = self.get(section, key)
        return None if v is None else (self.base_dir / v)

    def section(self, name: str) -> dict:
        return dict(self.sections.get(name, {}))


def _check_type(section: str, key: str, value, expected) -> None:
    types = expected if isinstance(expected, tuple) else (expected,)
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return
    if isinstance(value, bool) or not isinstance(value, types):
        names = "/".join(t.__name__ for t in types)
        raise ConfigFileError(f"[{section}] {key} must be {names}, got {type(value).__name__}")


def parse_config(doc: dict, base_dir=".") -> RunConfig:
    sections = {}
    for name, body in doc.items():
        if name not in _SCHEMA:
            raise ConfigFileError(f"unknown config section [{name}]")
        if not isinstance(body, dict):
            raise ConfigFileError(f"[{name}] must be a table")
        for key, value in body.items():
            if key not in _SCHEMA[name]:
                raise ConfigFileError(f"unknown key {key!r} in [{name}]")
            _check_type(name, key, value, _SCHEMA[name][key])
        sections[name] = dict(body)
    return RunConfig(sections, Path(base_dir))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigFileError(f"{path}: {exc}") from exc
    return parse_config(doc, path.parent)
