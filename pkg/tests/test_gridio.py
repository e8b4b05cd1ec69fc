import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ammnet.gridio import (
    HEADER,
    BadDtypeError,
    BadMagicError,
    BadVersionError,
    GridFormatError,
    TruncatedError,
    decode_grid,
    encode_grid,
    list_scene_dirs,
    load_scene,
    read_grid,
    save_scene,
    write_grid,
)
from ammnet.voxel_data import gen_synthetic_scene

dims3 = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.uint8, dims3))
def test_label_round_trip(a):
    out = decode_grid(encode_grid(a))
    assert out.dtype == np.uint8 and out.shape == a.shape
    assert out.tobytes() == a.tobytes()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, dims3, elements=st.floats(width=32, allow_nan=False)))
def test_float_round_trip(a):
    out = decode_grid(encode_grid(a))
    assert out.dtype == np.float32
    assert out.tobytes() == a.tobytes()


def test_file_size_and_header_layout(tmp_path):
    p = tmp_path / "t.ammv"
    write_grid(p, np.zeros((20, 12, 20), np.float32))
    raw = p.read_bytes()
    assert len(raw) == 20 + 4 * 4800 == 19220
    assert raw[:4] == b"AMMV" and raw[4] == 1 and raw[5] == 1 and raw[6:8] == b"\0\0"
    assert struct.unpack("<3I", raw[8:20]) == (20, 12, 20)


def test_payload_order_is_z_fastest():
    a = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    raw = encode_grid(a)[HEADER.size:]
    for x in range(2):
        for y in range(3):
            for z in range(4):
                assert raw[(x * 3 + y) * 4 + z] == a[x, y, z]


def test_error_codes():
    good = encode_grid(np.ones((2, 2, 2), np.uint8))
    cases = [
        (b"XXXX" + good[4:], BadMagicError, "bad_magic"),
        (good[:4] + b"\x02" + good[5:], BadVersionError, "bad_version"),
        (good[:5] + b"\x07" + good[6:], BadDtypeError, "bad_dtype"),
        (good[:-1], TruncatedError, "truncated"),
        (good[:10], TruncatedError, "truncated"),
    ]
    codes = set()
    for buf, exc, code in cases:
        with pytest.raises(exc) as info:
            decode_grid(buf)
        assert isinstance(info.value, GridFormatError)
        assert info.value.code == code
        codes.add(code)
    assert len(codes) == 4


def test_rejects_unsupported_payloads():
    with pytest.raises(TypeError):
        encode_grid(np.zeros((2, 2, 2), np.int32))
    with pytest.raises(ValueError):
        encode_grid(np.zeros((2, 2), np.uint8))


def test_file_round_trip(tmp_path):
    a = np.random.default_rng(0).random((20, 12, 20)).astype(np.float32)
    write_grid(tmp_path / "a.ammv", a)
    assert read_grid(tmp_path / "a.ammv").tobytes() == a.tobytes()


def test_scene_bundle_round_trip(tmp_path):
    s = gen_synthetic_scene(4)
    d = save_scene(s, tmp_path / "scene")
    assert sorted(p.name for p in d.iterdir()) == ["depth.ammv", "gt.ammv", "meta.json", "rgb.ammv", "tsdf.ammv"]
    assert read_grid(d / "depth.ammv").shape == (64, 64, 1)
    assert read_grid(d / "rgb.ammv").shape == (64, 64, 3)
    back = load_scene(d)
    for name in ("rgb", "depth", "gt", "tsdf", "mask"):
        assert getattr(back, name).tobytes() == getattr(s, name).tobytes(), name
    assert back.grid == s.grid and back.intrinsics == s.intrinsics and back.seed == s.seed
    assert list_scene_dirs(tmp_path) == [d]
