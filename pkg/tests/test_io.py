import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layoutlearn.compositor import SceneModel, init_layout_set
from layoutlearn.field import BlobField, MlpField, VoxelField
from layoutlearn.io import (
    CheckpointError,
    ConfigFileError,
    VoxelParseError,
    checkpoint_bytes,
    export_image,
    export_voxel,
    import_voxel,
    load_checkpoint,
    load_config,
    parse_checkpoint,
    parse_config,
    parse_voxel,
    read_image,
    save_checkpoint,
    to_uint8,
    voxel_bytes,
)
from layoutlearn.renderer import Camera, RenderConfig, render


def mixed_model(seed=0):
    rng = np.random.default_rng(seed)
    vox = VoxelField(rng.random((3, 4, 5)), rng.random((3, 4, 5, 3)), [-1, -1, -1], [1, 1.5, 1])
    fields = [MlpField(2, 8, 2, rng=rng), BlobField([0.1, 0, 0], 0.3, 4, [1, 0.5, 0]), vox]
    return SceneModel(fields, init_layout_set(2, 3, rng))


def test_checkpoint_roundtrip(tmp_path):
    model = mixed_model()
    opt = np.arange(7, dtype=float)
    path = tmp_path / "m.layl"
    save_checkpoint(path, model, opt)
    loaded, opt2 = load_checkpoint(path)
    assert np.array_equal(opt2, opt)
    assert np.array_equal(loaded.layout_array(), model.layout_array())
    for a, b in zip(model.fields, loaded.fields):
        assert np.array_equal(a.to_vector(), b.to_vector())
    assert checkpoint_bytes(loaded, opt2) == path.read_bytes()
    cfg = RenderConfig(5, 5, 8)
    r1 = render(model, 1, Camera(0, -30), cfg, np.random.default_rng(0))
    r2 = render(loaded, 1, Camera(0, -30), cfg, np.random.default_rng(0))
    assert np.array_equal(r1.rgb, r2.rgb)


@settings(max_examples=20)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_checkpoint_roundtrip_property(N, K, seed):
    rng = np.random.default_rng(seed)
    model = SceneModel([BlobField(rng.random(3), 0.3, 2.0) for _ in range(K)], init_layout_set(N, K, rng))
    loaded, opt = parse_checkpoint(checkpoint_bytes(model))
    assert opt is None
    assert np.array_equal(loaded.layout_array(), model.layout_array())


def test_checkpoint_layout_header():
    data = checkpoint_bytes(mixed_model())
    assert data[:4] == b"LAYL"
    assert struct.unpack_from("<III", data, 4) == (1, 3, 2)
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


@pytest.mark.parametrize("pos", [4, 20, 100, -10])
def test_checkpoint_corruption_detected(pos):
    data = bytearray(checkpoint_bytes(mixed_model()))
    data[pos] ^= 0x01
    with pytest.raises(CheckpointError, match="CRC"):
        parse_checkpoint(bytes(data))


def test_checkpoint_bad_magic_and_truncation():
    data = checkpoint_bytes(mixed_model())
    with pytest.raises(CheckpointError, match="magic"):
        parse_checkpoint(b"XXXX" + data[4:])
    body = data[:-50]
    with pytest.raises(CheckpointError, match="truncated"):
        parse_checkpoint(body + struct.pack("<I", zlib.crc32(body)))
    bumped = data[:4] + struct.pack("<I", 9) + data[8:-4]
    with pytest.raises(CheckpointError, match="version"):
        parse_checkpoint(bumped + struct.pack("<I", zlib.crc32(bumped)))


def test_voxel_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    vox = VoxelField(rng.random((4, 3, 2)).astype(np.float32), rng.random((4, 3, 2, 3)).astype(np.float32),
                     [-1, -2, -0.5], [1, 2, 0.5])
    path = tmp_path / "v.voxl"
    export_voxel(vox, path)
    back = import_voxel(path)
    assert np.array_equal(back.density, vox.density) and np.array_equal(back.albedo, vox.albedo)
    assert np.array_equal(back.lo, vox.lo) and np.array_equal(back.hi, vox.hi)


def test_voxel_x_fastest_layout():
    d = np.arange(8, dtype=float).reshape(2, 2, 2)
    data = voxel_bytes(VoxelField(d, np.zeros((2, 2, 2, 3)), [0, 0, 0], [1, 1, 1]))
    start = data.index(b"\n") + 1
    first = np.frombuffer(data, "<f4", 8, start)
    expect = [d[x, y, z] for z in range(2) for y in range(2) for x in range(2)]
    assert first.tolist() == expect


def test_voxel_errors_report_offsets():
    good = voxel_bytes(VoxelField(np.zeros((2, 2, 2)), np.zeros((2, 2, 2, 3)), [0, 0, 0], [1, 1, 1]))
    with pytest.raises(VoxelParseError, match="byte 0"):
        parse_voxel(b"VOXX" + good[4:])
    with pytest.raises(VoxelParseError, match="byte"):
        parse_voxel(good[:-4])
    with pytest.raises(VoxelParseError):
        parse_voxel(b"VOXL 1 2 2 2 0 0 0 1 1\n")
    with pytest.raises(VoxelParseError, match="newline"):
        parse_voxel(b"VOXL 1")
    with pytest.raises(VoxelParseError, match="version"):
        parse_voxel(good.replace(b"VOXL 1", b"VOXL 7", 1))


def test_uint8_rounding():
    assert to_uint8(np.array([[0.5]]))[0, 0] == 128
    assert to_uint8(np.array([[0.0, 1.0, 0.2]])).tolist() == [[0, 255, 51]]
    with pytest.raises(ValueError):
        to_uint8(np.array([[1.5]]))
    with pytest.raises(ValueError):
        to_uint8(np.zeros((2, 2, 4)))


def test_ppm_bytes_exact(tmp_path):
    img = np.array([[[0.0, 0.5, 1.0], [0.2, 0.4, 0.6]]])
    path = tmp_path / "a.ppm"
    export_image(img, path)
    assert path.read_bytes() == b"P6\n2 1\n255\n" + bytes([0, 128, 255, 51, 102, 153])


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (4, 6, 3)) / 255.0
    export_image(img, tmp_path / "a.png")
    assert np.array_equal(read_image(tmp_path / "a.png"), img)


def test_config_parsing(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('[scene]\nk = 2\nprompt = "a cat"\n[train]\nsteps = 10\npeak_lr = 1\n'
                    '[guidance]\ntarget_image = "img.png"\n')
    cfg = load_config(path)
    assert cfg.get("scene", "k") == 2 and cfg.get("train", "peak_lr") == 1
    assert cfg.path("guidance", "target_image") == tmp_path / "img.png"
    assert cfg.get("render", "width", 64) == 64


@pytest.mark.parametrize("doc,msg", [
    ({"bogus": {}}, "unknown config section"),
    ({"train": {"stepz": 3}}, "unknown key"),
    ({"train": {"steps": "3"}}, "must be int"),
    ({"train": {"steps": True}}, "must be int"),
    ({"scene": 3}, "must be a table"),
])
def test_config_errors(doc, msg):
    with pytest.raises(ConfigFileError, match=msg):
        parse_config(doc)


def test_config_syntax_error(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[train\n")
    with pytest.raises(ConfigFileError):
        load_config(path)
