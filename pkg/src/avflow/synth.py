"""Synthetic audio-visual corpus with exactly measurable conditioning.

Each sample renders a static blocky background, a solid-colored body square
that translates per a script (direction + speed, reflecting at canvas edges),
and a mouth bar inside the body whose height tracks a smooth per-frame audio
envelope; the waveform is a sine carrier amplitude-modulated by the same
envelope. The script drives all global motion and the audio drives all local
motion, so every conditioning pathway of the generator has a ground truth
that pixel-counting metrics can recover exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .audio import AudioWave
from .codec import PixelVideo
from .errors import DataError
from .storage import (
    load_tensor,
    load_wave,
    read_json,
    read_jsonl,
    save_tensor,
    save_wave,
    write_json,
    write_jsonl,
)

__all__ = [
    "DIRECTIONS",
    "Script",
    "Sample",
    "make_sample",
    "make_corpus",
    "load_sample",
    "track_body",
    "readback_mouth_height",
    "script_token_ids",
    "TEXT_VOCAB_SIZE",
]

DIRECTIONS = ("still", "left", "right", "up", "down")
_DIRECTION_VEC = {
    "still": (0, 0),
    "left": (0, -1),
    "right": (0, 1),
    "up": (-1, 0),
    "down": (1, 0),
}

BODY_SIZE = 20
MOUTH_WIDTH = 10
MOUTH_MAX_HEIGHT = 12
_MOUTH_X0 = 5  # body-local column of the mouth's left edge
_MOUTH_BOTTOM = 16  # body-local row just below the mouth

BODY_PALETTE = np.array(
    [
        [0.9, -0.7, -0.7],
        [-0.7, 0.9, -0.7],
        [-0.7, -0.7, 0.9],
        [0.9, 0.9, -0.7],
    ],
    dtype=np.float32,
)
MOUTH_COLOR = np.array([-1.0, -1.0, -1.0], dtype=np.float32)
_BG_LO, _BG_HI = -0.25, 0.45
_BG_CELL = 8
COLOR_TOLERANCE = 0.6

MAX_SPEED = 4
_SPEED_CHOICES = (1, 2, 3)

# Script token ids: directions then speeds 0..MAX_SPEED.
TEXT_VOCAB_SIZE = len(DIRECTIONS) + MAX_SPEED + 1


@dataclass(frozen=True)
class Script:
    """Global-motion instruction: direction, speed (px/frame), body style."""

    direction: str
    speed: int
    style_id: int

    def __post_init__(self) -> None:
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}, expected one of {DIRECTIONS}")
        if self.speed < 0 or self.speed > MAX_SPEED:
            raise ValueError(f"speed must lie in [0, {MAX_SPEED}], got {self.speed}")
        if self.direction == "still" and self.speed != 0:
            raise ValueError("still scripts must have speed 0")
        if self.direction != "still" and self.speed == 0:
            raise ValueError("moving scripts must have speed > 0")
        if not 0 <= self.style_id < len(BODY_PALETTE):
            raise ValueError(f"style_id must lie in [0, {len(BODY_PALETTE)}), got {self.style_id}")

    def to_dict(self) -> dict[str, Any]:
        return {"direction": self.direction, "speed": self.speed, "style_id": self.style_id}

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "Script":
        return Script(d["direction"], int(d["speed"]), int(d["style_id"]))


def script_token_ids(script: Script) -> np.ndarray:
    """Two-token script encoding: [direction token, speed token]."""
    return np.array(
        [DIRECTIONS.index(script.direction), len(DIRECTIONS) + script.speed], dtype=np.int64
    )


@dataclass
class Sample:
    video: PixelVideo
    wave: AudioWave
    script: Script
    envelope: np.ndarray
    seed: int
    start: tuple[int, int]
    carrier_hz: float


def _reflect(pos: int, limit: int) -> int:
    """Fold an unbounded coordinate into [0, limit] by edge reflection."""
    if limit == 0:
        return 0
    period = 2 * limit
    q = pos % period
    return q if q <= limit else period - q


def body_position(start: tuple[int, int], script: Script, frame: int, size: int) -> tuple[int, int]:
    """Top-left body corner at a frame, reflecting at canvas edges."""
    dy, dx = _DIRECTION_VEC[script.direction]
    limit = size - BODY_SIZE
    y = _reflect(start[0] + dy * script.speed * frame, limit)
    x = _reflect(start[1] + dx * script.speed * frame, limit)
    return y, x


def _render_frame(
    background: np.ndarray, pos: tuple[int, int], style_id: int, mouth_height: int
) -> np.ndarray:
    frame = background.copy()
    y, x = pos
    frame[y : y + BODY_SIZE, x : x + BODY_SIZE] = BODY_PALETTE[style_id]
    if mouth_height > 0:
        top = y + _MOUTH_BOTTOM - mouth_height
        frame[top : y + _MOUTH_BOTTOM, x + _MOUTH_X0 : x + _MOUTH_X0 + MOUTH_WIDTH] = MOUTH_COLOR
    return frame


def render_video(
    background: np.ndarray,
    script: Script,
    start: tuple[int, int],
    envelope: np.ndarray,
    fps: int,
) -> PixelVideo:
    """Render the deterministic frame sequence for a script and envelope."""
    size = background.shape[0]
    if BODY_SIZE > size:
        raise ValueError(f"body ({BODY_SIZE}px) larger than canvas ({size}px)")
    heights = mouth_heights(envelope)
    frames = [
        _render_frame(background, body_position(start, script, k, size), script.style_id, int(h))
        for k, h in enumerate(heights)
    ]
    return PixelVideo(np.stack(frames), fps=fps)


def mouth_heights(envelope: np.ndarray) -> np.ndarray:
    """Rendered mouth-bar heights: round(envelope * max height)."""
    env = np.asarray(envelope, dtype=np.float64)
    if env.min() < 0 or env.max() > 1:
        raise ValueError("envelope values must lie in [0, 1]")
    return np.round(env * MOUTH_MAX_HEIGHT).astype(np.int64)


def _make_background(rng: np.random.Generator, size: int) -> np.ndarray:
    cells = -(-size // _BG_CELL)
    colors = rng.uniform(_BG_LO, _BG_HI, size=(cells, cells, 3)).astype(np.float32)
    bg = np.repeat(np.repeat(colors, _BG_CELL, axis=0), _BG_CELL, axis=1)
    return bg[:size, :size]


def _make_envelope(rng: np.random.Generator, frames: int) -> np.ndarray:
    """Random per-frame envelope; its span (hence variance) varies per sample.

    Values are drawn independently per frame so mismatched audio/video pairs
    decorrelate even over short clips.
    """
    raw = rng.random(frames)
    span = raw.max() - raw.min()
    unit = (raw - raw.min()) / span if span > 1e-9 else np.zeros(frames)
    # span stays wide enough that mouth-height rounding cannot push the
    # envelope/readback correlation below 0.99
    lo = rng.uniform(0.0, 0.15)
    hi = rng.uniform(0.85, 1.0)
    return (lo + (hi - lo) * unit).astype(np.float64)


def _make_wave(
    envelope: np.ndarray, frames: int, fps: int, sample_rate: int, carrier_hz: float
) -> AudioWave:
    """Sine carrier amplitude-modulated by the per-frame envelope.

    The modulation is piecewise constant over each video frame's time span, so
    per-frame RMS is exactly proportional to the envelope value.
    """
    n = frames * sample_rate // fps
    t = np.arange(n) / sample_rate
    frame_of = np.minimum((t * fps).astype(np.int64), frames - 1)
    samples = envelope[frame_of] * np.sin(2 * math.pi * carrier_hz * t)
    return AudioWave(samples.astype(np.float32), sample_rate)


def _safe_start(
    rng: np.random.Generator, script: Script, frames: int, size: int
) -> tuple[int, int]:
    """Start position whose straight path stays in-frame for the whole clip."""
    limit = size - BODY_SIZE
    travel = script.speed * (frames - 1)
    dy, dx = _DIRECTION_VEC[script.direction]

    def axis_range(d: int) -> tuple[int, int]:
        if d > 0:
            return 0, max(limit - travel, 0)
        if d < 0:
            return min(travel, limit), limit
        return 0, limit

    y_lo, y_hi = axis_range(dy)
    x_lo, x_hi = axis_range(dx)
    return int(rng.integers(y_lo, y_hi + 1)), int(rng.integers(x_lo, x_hi + 1))


def make_sample(
    seed: int,
    script: Script,
    frames: int = 8,
    size: int = 64,
    fps: int = 8,
    sample_rate: int = 16000,
    envelope: np.ndarray | None = None,
) -> Sample:
    """Deterministically generate one audio-visual sample from a seed."""
    if BODY_SIZE > size:
        raise ValueError(f"body ({BODY_SIZE}px) larger than canvas ({size}px)")
    rng = np.random.default_rng(seed)
    background = _make_background(rng, size)
    start = _safe_start(rng, script, frames, size)
    # whole carrier periods per frame keep per-frame RMS exactly proportional
    # to the envelope
    carrier = float(rng.integers(19, 53) * fps)
    env = _make_envelope(rng, frames) if envelope is None else np.asarray(envelope, np.float64)
    if env.shape != (frames,):
        raise ValueError(f"envelope must have one value per frame ({frames}), got {env.shape}")
    video = render_video(background, script, start, env, fps)
    wave = _make_wave(env, frames, fps, sample_rate, carrier)
    return Sample(video, wave, script, env, seed, start, carrier)


_SPLIT_OFFSETS = {"train": 0, "val": 500_000, "test": 900_000}


def sample_seed(corpus_seed: int, split: str, index: int) -> int:
    if split not in _SPLIT_OFFSETS:
        raise ValueError(f"unknown split {split!r}, expected one of {sorted(_SPLIT_OFFSETS)}")
    return corpus_seed * 1_000_000 + _SPLIT_OFFSETS[split] + index


def _script_for_index(
    rng: np.random.Generator, index: int, speeds: tuple[int, ...] = _SPEED_CHOICES
) -> Script:
    direction = DIRECTIONS[index % len(DIRECTIONS)]
    speed = 0 if direction == "still" else int(rng.choice(speeds))
    style = int(rng.integers(0, len(BODY_PALETTE)))
    return Script(direction, speed, style)


def make_corpus(
    n: int,
    seed: int,
    split: str,
    out_dir: str | Path,
    frames: int = 8,
    size: int = 64,
    fps: int = 8,
    sample_rate: int = 16000,
    speeds: tuple[int, ...] = _SPEED_CHOICES,
) -> list[dict[str, Any]]:
    """Write n samples and a manifest under out_dir/split; returns the manifest.

    Direction labels are balanced by construction (round-robin) and sample
    seeds are disjoint across splits, so regeneration is byte-identical.
    """
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    root = Path(out_dir) / split
    root.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i in range(n):
        sseed = sample_seed(seed, split, i)
        script = _script_for_index(np.random.default_rng(sseed + 777), i, speeds)
        sample = make_sample(sseed, script, frames=frames, size=size, fps=fps, sample_rate=sample_rate)
        rel = f"{i:05d}"
        sdir = root / rel
        sdir.mkdir(exist_ok=True)
        try:
            save_tensor(sdir / "video.avt", sample.video.data, meta={"fps": fps})
            save_wave(sdir / "audio.wav", sample.wave.samples, sample_rate)
            write_json(
                sdir / "meta.json",
                {
                    "seed": sseed,
                    "script": script.to_dict(),
                    "envelope": [float(v) for v in sample.envelope],
                    "start": list(sample.start),
                    "carrier_hz": sample.carrier_hz,
                    "fps": fps,
                },
            )
        except OSError as exc:
            raise DataError(f"failed to write sample {rel}: {exc}") from exc
        manifest.append(
            {
                "id": rel,
                "dir": str(Path(split) / rel),
                "seed": sseed,
                "split": split,
                "script": script.to_dict(),
                "env_variance": float(np.var(sample.envelope)),
                "frames": frames,
                "height": size,
                "width": size,
                "fps": fps,
            }
        )
    write_jsonl(root / "manifest.jsonl", manifest)
    return manifest


def load_manifest(corpus_dir: str | Path, split: str) -> list[dict[str, Any]]:
    path = Path(corpus_dir) / split / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    return list(read_jsonl(path))


def load_sample(corpus_dir: str | Path, record: dict[str, Any]) -> Sample:
    sdir = Path(corpus_dir) / record["dir"]
    video_arr, vmeta = load_tensor(sdir / "video.avt")
    samples, rate = load_wave(sdir / "audio.wav")
    meta = read_json(sdir / "meta.json")
    script = Script.from_dict(meta["script"])
    return Sample(
        video=PixelVideo(video_arr, fps=int(vmeta.get("fps", meta["fps"]))),
        wave=AudioWave(samples, rate),
        script=script,
        envelope=np.asarray(meta["envelope"], dtype=np.float64),
        seed=int(meta["seed"]),
        start=(int(meta["start"][0]), int(meta["start"][1])),
        carrier_hz=float(meta["carrier_hz"]),
    )


def _classify(frame: np.ndarray, key: np.ndarray) -> np.ndarray:
    dist = np.linalg.norm(frame - key[None, None, :], axis=-1)
    return dist < COLOR_TOLERANCE


def track_body(video: PixelVideo) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame body detection via the known palette colors.

    Returns (found (F,), centers (F, 2) float row/col). The tracked mask is
    the union of body-colored and mouth-colored pixels inside the body's
    bounding box, so the centroid is mouth-height invariant.
    """
    F = video.frames
    found = np.zeros(F, dtype=bool)
    centers = np.full((F, 2), np.nan)
    for k in range(F):
        frame = video.data[k]
        masks = [_classify(frame, BODY_PALETTE[s]) for s in range(len(BODY_PALETTE))]
        counts = [m.sum() for m in masks]
        best = int(np.argmax(counts))
        body = masks[best]
        if counts[best] < BODY_SIZE * BODY_SIZE // 4:
            continue
        ys, xs = np.nonzero(body)
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        # a real body is a dense blob; scattered color matches are rejected
        if counts[best] / ((y1 - y0) * (x1 - x0)) < 0.4:
            continue
        mouth = _classify(frame, MOUTH_COLOR)
        region = np.zeros_like(body)
        region[y0:y1, x0:x1] = True
        full = body | (mouth & region)
        ys, xs = np.nonzero(full)
        centers[k] = (ys.mean(), xs.mean())
        found[k] = True
    return found, centers


def readback_mouth_height(
    video: PixelVideo, body_track: tuple[np.ndarray, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-counting mouth height per frame; exact on ground-truth renders.

    Returns (heights (F,) float, valid (F,) bool); frames without a tracked
    body are flagged invalid and skipped.
    """
    found, centers = body_track
    F = video.frames
    heights = np.zeros(F, dtype=np.float64)
    valid = found.copy()
    half = BODY_SIZE // 2
    for k in range(F):
        if not found[k]:
            continue
        cy, cx = centers[k]
        y0 = max(int(round(cy)) - half - 1, 0)
        x0 = max(int(round(cx)) - half - 1, 0)
        y1 = min(y0 + BODY_SIZE + 2, video.height)
        x1 = min(x0 + BODY_SIZE + 2, video.width)
        mouth = _classify(video.data[k, y0:y1, x0:x1], MOUTH_COLOR)
        heights[k] = mouth.sum() / MOUTH_WIDTH
    return heights, valid
