import numpy as np
import pytest

from avflow.checkpoint import load_arrays, save_arrays
from avflow.errors import DataError
from avflow.storage import (
    load_tensor,
    load_wave,
    read_jsonl,
    save_tensor,
    save_wave,
    write_jsonl,
)


def test_tensor_round_trip(tmp_path, rng):
    arr = rng.standard_normal((3, 4, 5)).astype(np.float32)
    path = tmp_path / "x.avt"
    save_tensor(path, arr, meta={"fps": 8})
    back, meta = load_tensor(path)
    assert np.array_equal(back, arr)
    assert meta == {"fps": 8}


def test_tensor_int_dtypes(tmp_path):
    arr = np.arange(12, dtype=np.int64).reshape(3, 4)
    save_tensor(tmp_path / "i.avt", arr)
    back, _ = load_tensor(tmp_path / "i.avt")
    assert np.array_equal(back, arr) and back.dtype == np.int64


def test_tensor_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.avt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError, match="magic"):
        load_tensor(p)


def test_wave_round_trip(tmp_path, rng):
    samples = rng.uniform(-1, 1, 1600).astype(np.float32)
    save_wave(tmp_path / "a.wav", samples, 16000)
    back, rate = load_wave(tmp_path / "a.wav")
    assert rate == 16000
    assert np.array_equal(back, samples)


def test_jsonl_round_trip(tmp_path):
    records = [{"a": 1}, {"b": [1, 2]}, {"c": "x"}]
    write_jsonl(tmp_path / "r.jsonl", records)
    assert list(read_jsonl(tmp_path / "r.jsonl")) == records


def test_checkpoint_container_round_trip(tmp_path, rng):
    arrays = {
        "w": rng.standard_normal((4, 4)).astype(np.float32),
        "b": rng.standard_normal(4).astype(np.float64),
        "step": np.asarray(7.0, dtype=np.float32),
    }
    save_arrays(tmp_path / "c.ckpt", arrays, {"note": "hello", "n": 3})
    back, extra = load_arrays(tmp_path / "c.ckpt")
    assert extra == {"note": "hello", "n": 3}
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])
        assert back[k].dtype == arrays[k].dtype


def test_checkpoint_bytes_stable(tmp_path, rng):
    arrays = {"w": rng.standard_normal((2, 2)).astype(np.float32)}
    save_arrays(tmp_path / "a.ckpt", arrays, {"x": 1})
    save_arrays(tmp_path / "b.ckpt", arrays, {"x": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
