import struct

import numpy as np
import pytest

from genlora.adapters import genlora_init, lora_init
from genlora.checkpoint import (decode_tensors, encode_tensors, load_checkpoint, load_tensors,
                                save_checkpoint, save_tensors)
from genlora.errors import FormatError
from genlora.gradcheck import random_genlora_state
from genlora.numerics import RngStream
from genlora.rbf import make_grid


def test_tensor_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"w": rng.standard_normal((3, 4)), "v": rng.standard_normal(5), "s": np.array(2.5),
               "tiny": np.array([5e-324, -0.0, 1e308])}
    save_tensors(tmp_path / "t.glra", tensors, {"note": "x"})
    meta, back = load_tensors(tmp_path / "t.glra")
    assert meta["note"] == "x" and meta["tensors"] == list(tensors)
    for name, arr in tensors.items():
        assert back[name].shape == arr.shape
        assert back[name].tobytes() == arr.tobytes()


def test_encoding_is_deterministic():
    t = {"a": np.arange(6.0).reshape(2, 3)}
    assert encode_tensors(t, {"b": 1, "a": 2}) == encode_tensors(t, {"a": 2, "b": 1})


def test_float32_option_round_trips_to_float32_precision():
    x = np.random.default_rng(1).standard_normal(10)
    _, back = decode_tensors(encode_tensors({"x": x}, dtype="f32"))
    assert np.array_equal(back["x"], x.astype(np.float32).astype(np.float64))


def test_header_layout():
    data = encode_tensors({"a": np.zeros((2, 2))})
    assert data[:4] == b"GLRA"
    version, meta_len = struct.unpack("<IQ", data[4:16])
    assert version == 1 and meta_len > 0


@pytest.mark.parametrize("cut", [3, 10, 20, -1, -9])
def test_truncation_is_a_format_error(cut):
    data = encode_tensors({"a": np.ones((3, 3)), "b": np.ones(2)})
    with pytest.raises(FormatError):
        decode_tensors(data[:cut])


def test_bad_magic_version_and_trailing_bytes():
    data = encode_tensors({"a": np.ones(2)})
    with pytest.raises(FormatError, match="magic"):
        decode_tensors(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="version"):
        decode_tensors(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(FormatError, match="trailing"):
        decode_tensors(data + b"\0")


def test_missing_file_is_a_format_error(tmp_path):
    with pytest.raises(FormatError):
        load_tensors(tmp_path / "nope.glra")


def test_adapter_checkpoint_round_trip(tmp_path):
    gen = random_genlora_state(12, 8, 3, 4, 5, RngStream(1))
    gen.frozen = frozenset({"z_a"})
    lora = lora_init(6, 10, 2, alpha=3.0, rng=1)
    lora.b[:] = 0.5
    save_checkpoint(tmp_path / "c.glra", {"g": gen, "l": lora}, {"seed": 7})
    states, meta = load_checkpoint(tmp_path / "c.glra")
    assert meta["seed"] == 7
    g, l = states["g"], states["l"]
    assert g.frozen == {"z_a"} and g.grid == gen.grid and g.normalize
    for name, arr in gen.blocks().items():
        assert np.array_equal(arr, g.blocks()[name])
    assert np.array_equal(g.delta_w(), gen.delta_w())
    assert l.alpha == 3.0 and np.array_equal(l.delta_w(), lora.delta_w())


def test_weights_file_is_not_an_adapter_checkpoint(tmp_path):
    save_tensors(tmp_path / "w.glra", {"w": np.eye(2)}, {"format": "weights"})
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "w.glra")


def test_shape_mismatch_in_checkpoint_is_detected(tmp_path):
    state = genlora_init(8, 8, 2, 2, make_grid(3))
    save_checkpoint(tmp_path / "c.glra", {"x": state})
    meta, tensors = load_tensors(tmp_path / "c.glra")
    meta["adapters"]["x"]["rank"] = 3
    save_tensors(tmp_path / "bad.glra", tensors, {k: v for k, v in meta.items() if k != "tensors"})
    with pytest.raises(FormatError, match="shape"):
        load_checkpoint(tmp_path / "bad.glra")
