"""Binary tensor container, waveform files, and line-delimited records.

The tensor container is deliberately minimal: a magic string, a JSON header
describing dtype/shape plus free-form metadata, then raw little-endian bytes.
Every writer in the package goes through this module so that byte-identical
regeneration can be asserted in tests.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np
from scipy.io import wavfile

from .errors import DataError

TENSOR_MAGIC = b"AVT1"


def _le_dtype(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<")
    return dt.str


def save_tensor(path: str | Path, array: np.ndarray, meta: dict[str, Any] | None = None) -> None:
    """Write an array as magic + JSON header + raw little-endian data."""
    array = np.ascontiguousarray(array)
    header = {
        "dtype": _le_dtype(array),
        "shape": list(array.shape),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(array.astype(header["dtype"], copy=False).tobytes())


def load_tensor(path: str | Path) -> tuple[np.ndarray, dict[str, Any]]:
    """Read an array written by :func:`save_tensor`; returns (array, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TENSOR_MAGIC:
            raise DataError(f"{path}: not a tensor container (magic {magic!r})")
        size = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(size).decode("utf-8"))
        data = fh.read()
    arr = np.frombuffer(data, dtype=np.dtype(header["dtype"]))
    expected = int(np.prod(header["shape"])) if header["shape"] else 1
    if arr.size != expected:
        raise DataError(f"{path}: payload has {arr.size} elements, header says {expected}")
    return arr.reshape(header["shape"]).copy(), header.get("meta", {})


def save_wave(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write float32 PCM; the WAV header carries the sample rate."""
    wavfile.write(str(path), sample_rate, np.asarray(samples, dtype=np.float32))


def load_wave(path: str | Path) -> tuple[np.ndarray, int]:
    sample_rate, samples = wavfile.read(str(path))
    if samples.dtype != np.float32:
        raise DataError(f"{path}: expected float32 samples, got {samples.dtype}")
    return samples, int(sample_rate)


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def append_jsonl(path: str | Path, record: dict[str, Any]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True))
        fh.write("\n")


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_json(path: str | Path, payload: dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path: str | Path) -> dict[str, Any]:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
