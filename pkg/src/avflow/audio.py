"""Waveform to per-latent-frame audio tokens.

Pipeline: a deterministic layered feature backend (log-magnitude filterbank
over non-overlapping windows followed by fixed affine+tanh stages), learnable
softmax fusion over layers, a stack of strided causal 1D convolutions that
compresses the time axis, and nearest-timestamp alignment of compressed steps
to video latent frames.

Causality contract: filterbank frame i reads only samples in its own window,
every convolution left-pads, and alignment only selects compressed steps whose
last contributing sample ends before the latent frame does — so audio after a
frame's end can never change that frame's tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError
from .storage import load_tensor, save_tensor

__all__ = [
    "AudioWave",
    "AudioFeatureConfig",
    "LayeredAudioFeatures",
    "log_filterbank",
    "extract_features",
    "save_features",
    "load_features",
    "fuse_layers",
    "CausalConv1d",
    "AudioEncoder",
    "alignment_indices",
    "align_to_latent",
]

# Fixed seed of the deterministic feature backend (not a tunable).
_BACKEND_SEED = 1234
_LOG_FLOOR = 1e-5


@dataclass
class AudioWave:
    """Mono waveform with its sample rate."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size == 0:
            raise ValueError("waveform is empty")
        if not np.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite values")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class AudioFeatureConfig:
    """Backend settings: analysis rate, band count, and pseudo-layer count."""

    sample_rate: int = 16000
    feature_rate: int = 50
    bands: int = 40
    layers: int = 3

    def __post_init__(self) -> None:
        if self.sample_rate % self.feature_rate:
            raise ValueError(
                f"sample_rate {self.sample_rate} must be divisible by "
                f"feature_rate {self.feature_rate}"
            )
        if self.layers < 2:
            raise ValueError(f"need at least 2 layers, got {self.layers}")
        if self.bands < 1:
            raise ValueError(f"bands must be >= 1, got {self.bands}")

    @property
    def hop(self) -> int:
        return self.sample_rate // self.feature_rate


@dataclass
class LayeredAudioFeatures:
    """(L, T, c_a) feature stack at feature_rate Hz."""

    data: np.ndarray
    feature_rate: int

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"layered features must be (L, T, c), got {self.data.shape}")
        if self.data.shape[0] < 2:
            raise ValueError(f"need at least 2 layers, got {self.data.shape[0]}")

    @property
    def num_layers(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]


def log_filterbank(wave: AudioWave, cfg: AudioFeatureConfig) -> np.ndarray:
    """(T, bands) log band power over non-overlapping rectangular windows.

    T = floor(duration * feature_rate); the dangling tail shorter than one
    window is dropped. Frame i depends only on samples [i*hop, (i+1)*hop).
    """
    if wave.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"waveform rate {wave.sample_rate} != backend rate {cfg.sample_rate}"
        )
    hop = cfg.hop
    T = wave.samples.size // hop
    if T < 1:
        raise ValueError(f"waveform too short: need at least {hop} samples, got {wave.samples.size}")
    frames = wave.samples[: T * hop].reshape(T, hop).astype(np.float64)
    spec = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    bins = spec[:, 1:]  # drop DC so silence maps to the log floor
    per_band = bins.shape[1] // cfg.bands
    if per_band < 1:
        raise ValueError(f"too many bands ({cfg.bands}) for hop {hop}")
    used = bins[:, : per_band * cfg.bands].reshape(T, cfg.bands, per_band).sum(axis=2)
    return np.log(used + _LOG_FLOOR).astype(np.float32)


def _backend_stages(cfg: AudioFeatureConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(_BACKEND_SEED)
    stages = []
    for _ in range(cfg.layers):
        a = rng.standard_normal((cfg.bands, cfg.bands)) / np.sqrt(cfg.bands)
        b = rng.standard_normal(cfg.bands) * 0.1
        stages.append((a.astype(np.float32), b.astype(np.float32)))
    return stages


def extract_features(wave: AudioWave, cfg: AudioFeatureConfig | None = None) -> LayeredAudioFeatures:
    """Deterministic layered features: L fixed affine+tanh stages over the
    normalized filterbank, each stage's output emitted as one layer.

    Each stage acts per time frame, so the backend keeps the filterbank's
    per-window causality.
    """
    cfg = cfg or AudioFeatureConfig()
    fb = log_filterbank(wave, cfg)
    x = (fb - np.log(_LOG_FLOOR)) / 4.0 - 1.0  # roughly unit range for tanh stages
    layers = []
    for a, b in _backend_stages(cfg):
        x = np.tanh(x @ a + b)
        layers.append(x.astype(np.float32))
    return LayeredAudioFeatures(np.stack(layers), cfg.feature_rate)


def save_features(path: str | Path, feats: LayeredAudioFeatures) -> None:
    """Persist layered features with a self-describing header."""
    save_tensor(
        path,
        feats.data,
        meta={
            "kind": "layered_audio_features",
            "layers": feats.num_layers,
            "frames": feats.num_frames,
            "channels": int(feats.data.shape[2]),
            "feature_rate": feats.feature_rate,
        },
    )


def load_features(path: str | Path) -> LayeredAudioFeatures:
    arr, meta = load_tensor(path)
    if meta.get("kind") != "layered_audio_features":
        raise DataError(f"{path}: not a layered-features file")
    expected = (meta["layers"], meta["frames"], meta["channels"])
    if tuple(arr.shape) != expected:
        raise DataError(f"{path}: array shape {arr.shape} disagrees with header {expected}")
    return LayeredAudioFeatures(arr, int(meta["feature_rate"]))


def fuse_layers(layers: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Convex combination over the layer axis with softmax(logits) weights.

    `layers` is (..., L, T, c); the result drops the layer axis.
    """
    L = layers.shape[-3]
    if logits.shape != (L,):
        raise ValueError(f"expected {L} layer logits, got shape {tuple(logits.shape)}")
    weights = torch.softmax(logits, dim=0)
    return torch.einsum("l,...ltc->...tc", weights, layers)


class CausalConv1d(nn.Module):
    """Conv1d with zero left-padding only, so outputs never see the future."""

    def __init__(self, chan_in: int, chan_out: int, kernel_size: int = 3, stride: int = 1):
        super().__init__()
        self.pad = kernel_size - 1
        self.stride = stride
        self.conv = nn.Conv1d(chan_in, chan_out, kernel_size, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.pad(x, (self.pad, 0)))


class AudioEncoder(nn.Module):
    """Learnable layer fusion plus causal strided temporal compression.

    forward maps (..., L, T, c_a) layered features to (..., T', width)
    compressed steps, where each stride-2 stage halves the time axis
    (T' = ceil(T / stride_total)). Compressed step j depends only on feature
    frames <= j * stride_total.
    """

    def __init__(
        self,
        num_layers: int = 3,
        in_channels: int = 40,
        width: int = 128,
        hidden: int = 64,
        kernel_size: int = 3,
    ):
        super().__init__()
        self.layer_logits = nn.Parameter(torch.zeros(num_layers))
        self.conv1 = CausalConv1d(in_channels, hidden, kernel_size, stride=2)
        self.norm1 = nn.LayerNorm(hidden)
        self.conv2 = CausalConv1d(hidden, width, kernel_size, stride=2)
        self.norm2 = nn.LayerNorm(width)
        self.act = nn.SiLU()
        self.num_layers = num_layers
        self.in_channels = in_channels
        self.width = width
        self.kernel_size = kernel_size

    @property
    def stride_total(self) -> int:
        return self.conv1.stride * self.conv2.stride

    @property
    def min_input_frames(self) -> int:
        """Smallest T yielding at least one compressed step per stage."""
        return self.stride_total

    def fuse(self, layers: torch.Tensor) -> torch.Tensor:
        if layers.shape[-3] != self.num_layers:
            raise ValueError(
                f"encoder fuses {self.num_layers} layers, input has {layers.shape[-3]}"
            )
        return fuse_layers(layers, self.layer_logits)

    def compress(self, fused: torch.Tensor) -> torch.Tensor:
        """(…, T, c_a) -> (…, T', width) causal strided compression."""
        if fused.shape[-2] < self.min_input_frames:
            raise ValueError(
                f"need at least {self.min_input_frames} feature frames, got {fused.shape[-2]}"
            )
        squeeze = fused.dim() == 2
        x = fused[None] if squeeze else fused
        x = x.transpose(-1, -2)  # (B, c, T)
        x = self.conv1(x).transpose(-1, -2)
        x = self.act(self.norm1(x)).transpose(-1, -2)
        x = self.conv2(x).transpose(-1, -2)
        x = self.act(self.norm2(x))
        return x[0] if squeeze else x

    def forward(self, layers: torch.Tensor) -> torch.Tensor:
        return self.compress(self.fuse(layers))


def step_timestamps(num_steps: int, stride_total: int, feature_rate: int) -> np.ndarray:
    """Time (s) of the last waveform sample each compressed step depends on."""
    return (stride_total * np.arange(num_steps) + 1) / feature_rate


def alignment_indices(
    num_steps: int,
    f_target: int,
    t_a: int,
    *,
    feature_rate: int,
    stride_total: int,
    fps: int,
    temporal_factor: int,
    frame_offset: int = 0,
) -> np.ndarray:
    """(f_target, t_a) compressed-step indices assigned to each latent frame.

    Latent frame i spans [(i+off), (i+1+off)) * temporal_factor / fps seconds.
    For each of t_a evenly spaced probe times inside the span, the nearest
    step by dependency-end timestamp is chosen, restricted to steps ending
    within the span when any exist and clamped to steps ending no later than
    the span otherwise — this is what keeps the composed pipeline causal.
    """
    if f_target < 1 or t_a < 1:
        raise ValueError(f"f_target and t_a must be >= 1, got ({f_target}, {t_a})")
    ts = step_timestamps(num_steps, stride_total, feature_rate)
    frame_dur = temporal_factor / fps
    end_last = (frame_offset + f_target) * frame_dur
    coverage = ts[-1] + stride_total / feature_rate if ts.size else 0.0
    if coverage < end_last - 1e-9:
        raise ValueError(
            f"audio is shorter than the requested video window "
            f"(covers {coverage:.3f}s, window ends at {end_last:.3f}s)"
        )
    out = np.zeros((f_target, t_a), dtype=np.int64)
    for i in range(f_target):
        start = (frame_offset + i) * frame_dur
        end = start + frame_dur
        hi = int(np.searchsorted(ts, end + 1e-9, side="right")) - 1
        if hi < 0:
            raise ValueError(
                f"no audio features end before latent frame {i} does "
                f"(frame ends at {end:.4f}s, first step ends at {ts[0]:.4f}s)"
            )
        lo = int(np.searchsorted(ts, start - 1e-9, side="left"))
        if lo > hi:
            lo = hi
        probes = start + (np.arange(t_a) + 0.5) * frame_dur / t_a
        idx = np.searchsorted(ts, probes)
        idx = np.clip(idx, lo, hi)
        prev = np.clip(idx - 1, lo, hi)
        pick_prev = np.abs(ts[prev] - probes) <= np.abs(ts[idx] - probes)
        out[i] = np.where(pick_prev, prev, idx)
    return out


def align_to_latent(
    compressed: torch.Tensor,
    f_target: int,
    t_a: int,
    *,
    feature_rate: int,
    stride_total: int,
    fps: int,
    temporal_factor: int,
    frame_offset: int = 0,
) -> torch.Tensor:
    """Gather (…, f_target, t_a, c) per-frame audio tokens from compressed steps."""
    idx = alignment_indices(
        compressed.shape[-2],
        f_target,
        t_a,
        feature_rate=feature_rate,
        stride_total=stride_total,
        fps=fps,
        temporal_factor=temporal_factor,
        frame_offset=frame_offset,
    )
    flat = torch.as_tensor(idx.reshape(-1), device=compressed.device)
    gathered = compressed.index_select(-2, flat)
    shape = compressed.shape[:-2] + (f_target, t_a, compressed.shape[-1])
    return gathered.reshape(shape)
