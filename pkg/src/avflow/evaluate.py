"""Geometry-based evaluation: audio-visual sync, motion direction, identity,
and cross-clip boundary consistency.

All metrics are pure functions of rendered pixels and waveforms; on the
synthetic corpus each one has an exact ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .audio import AudioWave
from .codec import PixelVideo
from .storage import read_json, write_json
from .synth import (
    BODY_PALETTE,
    COLOR_TOLERANCE,
    DIRECTIONS,
    Script,
    readback_mouth_height,
    track_body,
)

__all__ = [
    "MetricReport",
    "envelope_from_wave",
    "sync_score",
    "direction_accuracy",
    "boundary_consistency",
    "identity_drift",
    "permutation_null",
]

MIN_TRACKED_FRACTION = 0.8


def envelope_from_wave(wave: AudioWave, frames: int, fps: int) -> np.ndarray:
    """Per-video-frame RMS amplitude of the waveform."""
    per_frame = wave.sample_rate // fps
    need = frames * per_frame
    if wave.samples.size < need:
        raise ValueError(
            f"audio too short: {wave.samples.size} samples, need {need} for {frames} frames"
        )
    chunks = wave.samples[:need].reshape(frames, per_frame).astype(np.float64)
    return np.sqrt((chunks**2).mean(axis=1))


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.std() < 1e-12 or b.std() < 1e-12:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def sync_score(video: PixelVideo, wave: AudioWave) -> float | None:
    """Pearson correlation between mouth readback and the audio envelope.

    Returns None (flagged) when the body is trackable in fewer than 80% of
    frames or either series is constant.
    """
    track = track_body(video)
    heights, valid = readback_mouth_height(video, track)
    if valid.mean() < MIN_TRACKED_FRACTION:
        return None
    env = envelope_from_wave(wave, video.frames, video.fps)
    return _pearson(heights[valid], env[valid])


def dominant_direction(displacement: np.ndarray) -> str:
    """Direction label of a (dy, dx) displacement by dominant axis."""
    dy, dx = float(displacement[0]), float(displacement[1])
    if abs(dy) >= abs(dx):
        return "down" if dy >= 0 else "up"
    return "right" if dx >= 0 else "left"


def direction_accuracy(
    videos: Sequence[PixelVideo], scripts: Sequence[Script]
) -> tuple[float, int, int]:
    """Fraction of moving clips whose net centroid motion matches the script.

    Still scripts are rejected (caller must pre-filter); untrackable clips are
    excluded but counted. Returns (accuracy, evaluated, excluded).
    """
    hits, used, excluded = 0, 0, 0
    for video, script in zip(videos, scripts):
        if script.speed == 0:
            raise ValueError("direction accuracy is defined only for moving scripts")
        found, centers = track_body(video)
        idx = np.nonzero(found)[0]
        if idx.size < 2 or found.mean() < MIN_TRACKED_FRACTION:
            excluded += 1
            continue
        net = centers[idx[-1]] - centers[idx[0]]
        if float(np.abs(net).max()) < 1e-9:
            excluded += 1
            continue
        used += 1
        hits += dominant_direction(net) == script.direction
    accuracy = hits / used if used else float("nan")
    return accuracy, used, excluded


@dataclass
class BoundaryReport:
    """Continuity diagnostics across clip boundaries of a long video."""

    boundary_jump: float
    direction_agreement: float
    within_clip_jump: float
    per_boundary: list[dict[str, Any]] = field(default_factory=list)


def _frame_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a.astype(np.float64) - b.astype(np.float64)).mean())


def boundary_consistency(long_video: PixelVideo, clip_len: int) -> BoundaryReport:
    """Boundary jump and direction agreement for a clip-concatenated video.

    jump: mean |last frame of clip k - first frame of clip k+1|;
    within_clip_jump is the matching adjacent-frame baseline inside clips.
    Direction agreement compares the dominant centroid direction over the two
    frames before each boundary with the two frames after it.
    """
    F = long_video.frames
    if clip_len < 1 or F % clip_len:
        raise ValueError(f"total frames {F} not a multiple of clip_len {clip_len}")
    n_clips = F // clip_len
    if n_clips < 2:
        return BoundaryReport(float("nan"), float("nan"), float("nan"), [])

    found, centers = track_body(long_video)
    jumps, agreements, rows = [], [], []
    within = [
        _frame_diff(long_video.data[k], long_video.data[k + 1])
        for c in range(n_clips)
        for k in range(c * clip_len, (c + 1) * clip_len - 1)
    ]
    for c in range(1, n_clips):
        b = c * clip_len
        jump = _frame_diff(long_video.data[b - 1], long_video.data[b])
        jumps.append(jump)
        agree = None
        if clip_len >= 3 and found[b - 3 : b].all() and found[b : b + 3].all():
            before = centers[b - 1] - centers[b - 3]
            after = centers[b + 2] - centers[b]
            if np.abs(before).max() > 1e-9 and np.abs(after).max() > 1e-9:
                agree = dominant_direction(before) == dominant_direction(after)
        if agree is not None:
            agreements.append(agree)
        rows.append({"boundary": c, "jump": jump, "direction_agree": agree})
    agreement = float(np.mean(agreements)) if agreements else float("nan")
    return BoundaryReport(float(np.mean(jumps)), agreement, float(np.mean(within)), rows)


def identity_drift(video: PixelVideo, reference: PixelVideo) -> float | None:
    """Mean distance between per-frame body color and the reference body color."""
    ref_found, ref_centers = track_body(reference)
    if not ref_found[0]:
        return None
    ref_color = _body_mean_color(reference.data[0])
    found, _ = track_body(video)
    dists = []
    for k in range(video.frames):
        if not found[k]:
            continue
        color = _body_mean_color(video.data[k])
        if color is not None:
            dists.append(float(np.linalg.norm(color - ref_color)))
    return float(np.mean(dists)) if dists else None


def _body_mean_color(frame: np.ndarray) -> np.ndarray | None:
    masks = [
        np.linalg.norm(frame - BODY_PALETTE[s][None, None], axis=-1) < COLOR_TOLERANCE
        for s in range(len(BODY_PALETTE))
    ]
    best = int(np.argmax([m.sum() for m in masks]))
    if masks[best].sum() == 0:
        return None
    return frame[masks[best]].mean(axis=0)


def permutation_null(videos: Sequence[PixelVideo], waves: Sequence[AudioWave]) -> float:
    """Mean |sync_score| over mismatched (video, audio) pairings."""
    scores = []
    n = len(videos)
    for i in range(n):
        s = sync_score(videos[i], waves[(i + 1) % n])
        if s is not None:
            scores.append(abs(s))
    if not scores:
        raise ValueError("no valid mismatched pairings")
    return float(np.mean(scores))


@dataclass
class MetricReport:
    """Aggregate evaluation result with a per-sample breakdown."""

    sync_corr: float
    direction_acc: float
    identity_drift: float
    boundary_jump: float
    null_sync: float | None = None
    per_sample: list[dict[str, Any]] = field(default_factory=list)

    def __post_init__(self) -> None:
        for name in ("sync_corr", "direction_acc"):
            v = getattr(self, name)
            if np.isfinite(v) and not -1.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [-1, 1], got {v}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sync_corr": self.sync_corr,
            "direction_acc": self.direction_acc,
            "identity_drift": self.identity_drift,
            "boundary_jump": self.boundary_jump,
            "null_sync": self.null_sync,
            "per_sample": self.per_sample,
        }

    def save(self, path: str | Path) -> None:
        write_json(path, self.to_dict())

    @staticmethod
    def load(path: str | Path) -> "MetricReport":
        d = read_json(path)
        return MetricReport(
            sync_corr=d["sync_corr"],
            direction_acc=d["direction_acc"],
            identity_drift=d["identity_drift"],
            boundary_jump=d["boundary_jump"],
            null_sync=d.get("null_sync"),
            per_sample=d.get("per_sample", []),
        )

    def summary_table(self) -> str:
        lines = [
            "metric            value",
            "----------------  ------",
            f"sync_corr         {self.sync_corr: .4f}",
            f"direction_acc     {self.direction_acc: .4f}",
            f"identity_drift    {self.identity_drift: .4f}",
            f"boundary_jump     {self.boundary_jump: .4f}",
        ]
        if self.null_sync is not None:
            lines.append(f"null_sync         {self.null_sync: .4f}")
        return "\n".join(lines) + "\n"
