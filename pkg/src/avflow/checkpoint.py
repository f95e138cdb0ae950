"""Checkpoint container: JSON header + flat little-endian parameter arrays.

The header carries a config echo and a parameter manifest (names, shapes,
dtypes, byte offsets); payloads are concatenated raw arrays. Round trips are
bit-exact, which training-resume and save/load tests assert directly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import DataError
from .model import Denoiser, ModelConfig

CHECKPOINT_MAGIC = b"AVCK"

__all__ = [
    "save_arrays",
    "load_arrays",
    "save_model",
    "load_model",
    "state_arrays",
    "load_state_arrays",
]


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], extra: dict[str, Any]) -> None:
    manifest = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        manifest.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dt.str,
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = {"manifest": manifest, "extra": extra}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(bytes(payload))


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint container (magic {magic!r})")
        size = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(size).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in header["manifest"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return arrays, header.get("extra", {})


def state_arrays(module: torch.nn.Module, prefix: str = "param/") -> dict[str, np.ndarray]:
    return {prefix + name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}


def load_state_arrays(
    module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "param/"
) -> None:
    state = module.state_dict()
    missing = [k for k in state if prefix + k not in arrays]
    if missing:
        raise DataError(f"checkpoint missing parameters: {missing[:5]}")
    loaded = {}
    for key, tensor in state.items():
        arr = arrays[prefix + key]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise DataError(
                f"parameter {key}: checkpoint shape {arr.shape} != model shape {tuple(tensor.shape)}"
            )
        loaded[key] = torch.from_numpy(np.ascontiguousarray(arr)).to(tensor.dtype)
    module.load_state_dict(loaded)


def save_model(path: str | Path, model: Denoiser, extra: dict[str, Any] | None = None) -> None:
    """Write model parameters with the config echoed in the header."""
    header_extra: dict[str, Any] = {"model_config": model.cfg.to_dict()}
    if extra:
        header_extra.update(extra)
    save_arrays(path, state_arrays(model), header_extra)


def load_model(
    path: str | Path, expected_cfg: ModelConfig | None = None
) -> tuple[Denoiser, dict[str, Any]]:
    """Rebuild a model from its checkpoint; rejects config mismatches."""
    arrays, extra = load_arrays(path)
    if "model_config" not in extra:
        raise DataError(f"{path}: checkpoint header lacks a model config")
    cfg = ModelConfig(**extra["model_config"])
    if expected_cfg is not None and cfg != expected_cfg:
        raise DataError(
            f"checkpoint config {cfg} does not match the expected config {expected_cfg}"
        )
    model = Denoiser(cfg)
    load_state_arrays(model, arrays)
    return model, extra
