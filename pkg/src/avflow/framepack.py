"""Motion-history compression with age-dependent spatial pooling.

Recent latent frames keep full patch-token resolution while older frames are
average-pooled over progressively larger windows, bounding the token cost of
long histories. Pooling is linear and preserves each frame's token-feature
mean exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import LatentVideo
from .tokens import PatchConfig, Segment, TokenSequence, patchify

__all__ = ["REMAINDER", "PackSchedule", "MotionHistory", "pack", "token_count", "push"]

# Marker for "all remaining frames" in the last schedule level.
REMAINDER = None


@dataclass(frozen=True)
class PackSchedule:
    """Ordered (frame_count, spatial_pool) levels; level 0 holds the newest frames.

    frame_count may be REMAINDER (None) only in the last level; pools must be
    non-decreasing with age so older frames never cost more than newer ones.
    """

    levels: tuple[tuple[int | None, int], ...] = ((2, 1), (2, 2), (REMAINDER, 4))

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValueError("schedule must contain at least one level")
        pools = []
        for i, (count, pool) in enumerate(self.levels):
            if count is REMAINDER:
                if i != len(self.levels) - 1:
                    raise ValueError("REMAINDER is only allowed in the last level")
            elif count < 1:
                raise ValueError(f"level {i}: frame_count must be >= 1, got {count}")
            if pool < 1:
                raise ValueError(f"level {i}: spatial_pool must be >= 1, got {pool}")
            pools.append(pool)
        if any(b < a for a, b in zip(pools, pools[1:])):
            raise ValueError(f"spatial pools must be non-decreasing with age, got {pools}")

    def pool_for_age(self, age: int) -> int | None:
        """Pool factor for a frame `age` steps behind the newest (age 0 = newest).

        Returns None when the frame falls past a finite schedule (dropped).
        """
        offset = 0
        for count, pool in self.levels:
            if count is REMAINDER or age < offset + count:
                return pool
            offset += count
        return None


@dataclass
class MotionHistory:
    """Latent frames ordered oldest to newest, bounded by capacity."""

    capacity: int = 8
    frames: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {self.capacity}")
        self.frames = [np.asarray(f, dtype=np.float32) for f in self.frames]
        self._check_shapes(self.frames)
        if len(self.frames) > self.capacity:
            self.frames = self.frames[-self.capacity :]

    @staticmethod
    def _check_shapes(frames: list[np.ndarray]) -> None:
        shapes = {f.shape for f in frames}
        if len(shapes) > 1:
            raise ValueError(f"history frames must share one shape, got {sorted(shapes)}")
        for f in frames:
            if f.ndim != 3:
                raise ValueError(f"history frames must be (h, w, c), got {f.shape}")

    def __len__(self) -> int:
        return len(self.frames)

    def push(self, new_frames: list[np.ndarray] | np.ndarray) -> "MotionHistory":
        """Append frames newest-last, evicting the oldest beyond capacity."""
        if isinstance(new_frames, np.ndarray) and new_frames.ndim == 4:
            new_frames = list(new_frames)
        new_frames = [np.asarray(f, dtype=np.float32) for f in new_frames]
        self._check_shapes(self.frames + new_frames)
        self.frames.extend(new_frames)
        if len(self.frames) > self.capacity:
            del self.frames[: len(self.frames) - self.capacity]
        return self


def push(history: MotionHistory, new_frames: list[np.ndarray] | np.ndarray) -> MotionHistory:
    return history.push(new_frames)


def _pool_grid(tokens: np.ndarray, gh: int, gw: int, pool: int) -> np.ndarray:
    """Average-pool a (gh*gw, d) token grid over pool x pool windows."""
    d = tokens.shape[1]
    grid = tokens.reshape(gh, gw, d)
    grid = grid.reshape(gh // pool, pool, gw // pool, pool, d)
    return grid.mean(axis=(1, 3)).reshape(-1, d)


def pack(
    history: MotionHistory, schedule: PackSchedule, patch_cfg: PatchConfig
) -> TokenSequence:
    """Compress a motion history into MOTION tokens with negative frame coords.

    Frames are emitted oldest first; a frame of age a (0 = newest) contributes
    a (g/p)^2 pooled grid at frame coordinate -(a+1), with pooled spatial
    coordinates scaled back to patch-grid units.
    """
    if len(history) == 0:
        raise ValueError("cannot pack an empty history")
    parts = []
    n = len(history)
    for idx, frame in enumerate(history.frames):
        age = n - 1 - idx
        pool = schedule.pool_for_age(age)
        if pool is None:
            continue
        latent = LatentVideo(frame[None])
        seq = patchify(latent, patch_cfg)
        gh = frame.shape[0] // patch_cfg.ph
        gw = frame.shape[1] // patch_cfg.pw
        if gh % pool or gw % pool:
            raise ValueError(
                f"pool {pool} does not divide the {gh}x{gw} patch grid (frame age {age})"
            )
        pooled = _pool_grid(seq.tokens, gh, gw, pool)
        ri, ci = np.meshgrid(np.arange(gh // pool), np.arange(gw // pool), indexing="ij")
        positions = np.stack(
            [
                np.full(pooled.shape[0], -(age + 1), dtype=np.int64),
                ri.ravel() * pool,
                ci.ravel() * pool,
            ],
            axis=1,
        )
        parts.append((pooled, positions))
    if not parts:
        dim = history.frames[0].shape[2] * patch_cfg.pt * patch_cfg.ph * patch_cfg.pw
        return _empty_motion(dim)
    tokens = np.concatenate([p[0] for p in parts], axis=0)
    positions = np.concatenate([p[1] for p in parts], axis=0)
    segment = np.full(len(tokens), int(Segment.MOTION), dtype=np.int64)
    frame_index = np.full(len(tokens), -1, dtype=np.int64)
    return TokenSequence(tokens, positions, segment, frame_index)


def _empty_motion(dim: int) -> TokenSequence:
    return TokenSequence(
        np.zeros((0, dim), dtype=np.float32),
        np.zeros((0, 3), dtype=np.int64),
        np.zeros((0,), dtype=np.int64),
        np.zeros((0,), dtype=np.int64),
    )


def token_count(schedule: PackSchedule, n_frames: int, grid: tuple[int, int]) -> int:
    """Closed-form token count of :func:`pack` for n_frames on a patch grid."""
    if n_frames < 0:
        raise ValueError(f"n_frames must be >= 0, got {n_frames}")
    gh, gw = grid
    total = 0
    for age in range(n_frames):
        pool = schedule.pool_for_age(age)
        if pool is None:
            continue
        total += (gh // pool) * (gw // pool)
    return total
