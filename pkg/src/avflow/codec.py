"""Invertible video/latent codec based on space-to-depth rearrangement.

Provides the shape contract of a learned 3D autoencoder (temporal and spatial
downsampling into a channel-rich latent) while staying exactly invertible, so
round trips through the latent space can be asserted with zero error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CodecConfig",
    "PixelVideo",
    "LatentVideo",
    "encode",
    "decode",
    "encode_reference",
]


@dataclass(frozen=True)
class CodecConfig:
    """Downsampling factors; latent channels = 3 * temporal * spatial^2."""

    temporal_factor: int = 2
    spatial_factor: int = 4

    def __post_init__(self) -> None:
        if self.temporal_factor < 1 or self.spatial_factor < 1:
            raise ValueError(
                f"codec factors must be >= 1, got "
                f"({self.temporal_factor}, {self.spatial_factor})"
            )

    @property
    def latent_channels(self) -> int:
        return 3 * self.temporal_factor * self.spatial_factor**2


@dataclass
class PixelVideo:
    """Frame tensor of shape (F, H, W, 3), values in [-1, 1]."""

    data: np.ndarray
    fps: int = 8

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ValueError(f"video data must have shape (F, H, W, 3), got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ValueError("video must contain at least one frame")
        if int(self.fps) < 1:
            raise ValueError(f"fps must be a positive integer, got {self.fps}")
        self.fps = int(self.fps)
        if not np.isfinite(self.data).all():
            raise ValueError("video data contains non-finite values")
        peak = float(np.abs(self.data).max())
        if peak > 1.0 + 1e-5:
            raise ValueError(f"video values must lie in [-1, 1], found magnitude {peak:.5f}")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class LatentVideo:
    """Latent tensor of shape (f, h, w, c)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"latent data must have shape (f, h, w, c), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("latent data contains non-finite values")

    @property
    def latent_frames(self) -> int:
        return self.data.shape[0]


def _check_divisibility(video: PixelVideo, cfg: CodecConfig) -> None:
    F, H, W, _ = video.data.shape
    problems = []
    if F % cfg.temporal_factor:
        problems.append(f"F={F} not divisible by temporal_factor={cfg.temporal_factor}")
    if H % cfg.spatial_factor:
        problems.append(f"H={H} not divisible by spatial_factor={cfg.spatial_factor}")
    if W % cfg.spatial_factor:
        problems.append(f"W={W} not divisible by spatial_factor={cfg.spatial_factor}")
    if problems:
        raise ValueError("cannot encode video: " + "; ".join(problems))


def encode(video: PixelVideo, cfg: CodecConfig) -> LatentVideo:
    """Rearrange (F, H, W, 3) into (F/tf, H/sf, W/sf, 3*tf*sf^2) losslessly.

    The channel axis flattens the (tf, sf, sf, rgb) block in that order, so
    the transform is linear and exactly inverted by :func:`decode`.
    """
    _check_divisibility(video, cfg)
    F, H, W, _ = video.data.shape
    tf, sf = cfg.temporal_factor, cfg.spatial_factor
    x = video.data.reshape(F // tf, tf, H // sf, sf, W // sf, sf, 3)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)
    x = x.reshape(F // tf, H // sf, W // sf, cfg.latent_channels)
    return LatentVideo(np.ascontiguousarray(x))


def decode(latent: LatentVideo, cfg: CodecConfig, fps: int = 8) -> PixelVideo:
    """Exact inverse of :func:`encode`."""
    f, h, w, c = latent.data.shape
    tf, sf = cfg.temporal_factor, cfg.spatial_factor
    if c != cfg.latent_channels:
        raise ValueError(
            f"latent has {c} channels, codec ({tf}, {sf}) requires {cfg.latent_channels}"
        )
    x = latent.data.reshape(f, h, w, tf, sf, sf, 3)
    x = x.transpose(0, 3, 1, 4, 2, 5, 6)
    x = x.reshape(f * tf, h * sf, w * sf, 3)
    return PixelVideo(np.ascontiguousarray(x), fps=fps)


def encode_reference(image: PixelVideo, cfg: CodecConfig) -> LatentVideo:
    """Encode a single still frame into a one-frame latent.

    The frame is duplicated temporal_factor times so the temporal block is
    filled with identical content, then encoded; the result has f = 1.
    """
    if image.frames != 1:
        raise ValueError(f"reference image must be a single frame, got {image.frames}")
    tiled = PixelVideo(
        np.repeat(image.data, cfg.temporal_factor, axis=0), fps=image.fps
    )
    return encode(tiled, cfg)
