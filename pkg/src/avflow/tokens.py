"""Patch tokenization, token budgeting, and sequence assembly.

A token sequence concatenates three segments in fixed order: the reference
image tokens, the packed motion-history tokens (optional), then the noisy
target tokens. Positions are (frame, row, col) in patch-grid units; target
frames count 0..f'-1 regardless of history so clip continuation never shifts
target coordinates, motion frames carry negative coordinates by age, and the
reference uses a reserved sentinel frame coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .codec import CodecConfig, LatentVideo

__all__ = [
    "Segment",
    "REFERENCE_FRAME_COORD",
    "PatchConfig",
    "TokenSequence",
    "BudgetPlan",
    "patchify",
    "unpatchify",
    "compute_token_count",
    "fit_to_budget",
    "assemble",
]

# Must stay outside the admissible motion-age range (ages are small negatives).
REFERENCE_FRAME_COORD = -64


class Segment(IntEnum):
    REFERENCE = 0
    MOTION = 1
    TARGET = 2


@dataclass(frozen=True)
class PatchConfig:
    """Patch sizes along (frame, row, col) of the latent grid."""

    pt: int = 1
    ph: int = 2
    pw: int = 2

    def __post_init__(self) -> None:
        if min(self.pt, self.ph, self.pw) < 1:
            raise ValueError(f"patch sizes must be >= 1, got ({self.pt}, {self.ph}, {self.pw})")


@dataclass
class TokenSequence:
    """Flattened patch tokens with positions, segment labels, and frame owners.

    frame_index gives the owning target latent-frame for TARGET tokens and is
    -1 elsewhere.
    """

    tokens: np.ndarray
    positions: np.ndarray
    segment: np.ndarray
    frame_index: np.ndarray

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.segment = np.asarray(self.segment, dtype=np.int64)
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64)
        n = self.tokens.shape[0]
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be (N, d), got {self.tokens.shape}")
        if self.positions.shape != (n, 3):
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.segment.shape != (n,) or self.frame_index.shape != (n,):
            raise ValueError("segment and frame_index must be length-N vectors")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def count(self, seg: Segment) -> int:
        return int((self.segment == int(seg)).sum())


def _patch_grid(latent_shape: tuple[int, int, int, int], cfg: PatchConfig) -> tuple[int, int, int]:
    f, h, w, _ = latent_shape
    problems = []
    if f % cfg.pt:
        problems.append(f"f={f} not divisible by pt={cfg.pt}")
    if h % cfg.ph:
        problems.append(f"h={h} not divisible by ph={cfg.ph}")
    if w % cfg.pw:
        problems.append(f"w={w} not divisible by pw={cfg.pw}")
    if problems:
        raise ValueError("cannot patchify latent: " + "; ".join(problems))
    return f // cfg.pt, h // cfg.ph, w // cfg.pw


def patchify(latent: LatentVideo, cfg: PatchConfig) -> TokenSequence:
    """Flatten a latent into patch tokens in frame-major raster order.

    Token dim is c*pt*ph*pw with the (pt, ph, pw, c) block flattened in that
    order. Tokens are labeled TARGET; :func:`assemble` relabels other segments.
    """
    f, h, w, c = latent.data.shape
    gf, gh, gw = _patch_grid(latent.data.shape, cfg)
    x = latent.data.reshape(gf, cfg.pt, gh, cfg.ph, gw, cfg.pw, c)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)
    tokens = x.reshape(gf * gh * gw, cfg.pt * cfg.ph * cfg.pw * c)
    fi, ri, ci = np.meshgrid(np.arange(gf), np.arange(gh), np.arange(gw), indexing="ij")
    positions = np.stack([fi.ravel(), ri.ravel(), ci.ravel()], axis=1)
    frame_index = positions[:, 0].copy()
    segment = np.full(len(tokens), int(Segment.TARGET), dtype=np.int64)
    return TokenSequence(np.ascontiguousarray(tokens), positions, segment, frame_index)


def unpatchify(
    seq: TokenSequence, cfg: PatchConfig, shape: tuple[int, int, int, int]
) -> LatentVideo:
    """Scatter tokens back onto the latent grid by their positions."""
    f, h, w, c = shape
    gf, gh, gw = _patch_grid(shape, cfg)
    d = cfg.pt * cfg.ph * cfg.pw * c
    if seq.dim != d:
        raise ValueError(f"token dim {seq.dim} inconsistent with shape {shape} and patch {cfg}")
    if len(seq) != gf * gh * gw:
        raise ValueError(f"token count {len(seq)} does not fill grid {gf}x{gh}x{gw}")
    pos = seq.positions
    if (pos < 0).any() or (pos >= [gf, gh, gw]).any():
        raise ValueError("token positions fall outside the latent grid")
    grid = np.zeros((gf, gh, gw, d), dtype=np.float32)
    grid[pos[:, 0], pos[:, 1], pos[:, 2]] = seq.tokens
    x = grid.reshape(gf, gh, gw, cfg.pt, cfg.ph, cfg.pw, c)
    x = x.transpose(0, 3, 1, 4, 2, 5, 6)
    return LatentVideo(np.ascontiguousarray(x.reshape(f, h, w, c)))


def compute_token_count(
    F: int, H: int, W: int, codec_cfg: CodecConfig, patch_cfg: PatchConfig
) -> int:
    """Post-patchify token count for a pixel-space resolution."""
    tf, sf = codec_cfg.temporal_factor, codec_cfg.spatial_factor
    problems = []
    if F % (tf * patch_cfg.pt):
        problems.append(f"F={F} not divisible by temporal_factor*pt={tf * patch_cfg.pt}")
    if H % (sf * patch_cfg.ph):
        problems.append(f"H={H} not divisible by spatial_factor*ph={sf * patch_cfg.ph}")
    if W % (sf * patch_cfg.pw):
        problems.append(f"W={W} not divisible by spatial_factor*pw={sf * patch_cfg.pw}")
    if problems:
        raise ValueError("inadmissible resolution: " + "; ".join(problems))
    return (F // (tf * patch_cfg.pt)) * (H // (sf * patch_cfg.ph)) * (W // (sf * patch_cfg.pw))


@dataclass(frozen=True)
class BudgetPlan:
    """Resize/crop plan produced by :func:`fit_to_budget`.

    target_height/width are the aspect-preserving resize dims; crop_box is
    (top, left, height, width) applied after the resize, or None.
    """

    target_height: int
    target_width: int
    crop_box: tuple[int, int, int, int] | None
    resulting_tokens: int

    @property
    def identity(self) -> bool:
        return self.crop_box is None

    def output_size(self) -> tuple[int, int]:
        if self.crop_box is None:
            return self.target_height, self.target_width
        return self.crop_box[2], self.crop_box[3]


def fit_to_budget(
    F: int,
    H: int,
    W: int,
    M: int,
    codec_cfg: CodecConfig,
    patch_cfg: PatchConfig,
) -> BudgetPlan:
    """Plan the smallest intervention bringing the token count to M or below.

    Inputs already within budget pass through untouched. Otherwise the video
    is downscaled along the exact aspect ratio to the largest size whose
    divisibility center-crop stays within budget; the crop removes less than
    one patch cell per dimension.
    """
    qh = codec_cfg.spatial_factor * patch_cfg.ph
    qw = codec_cfg.spatial_factor * patch_cfg.pw
    qt = codec_cfg.temporal_factor * patch_cfg.pt
    if F % qt:
        raise ValueError(f"F={F} not divisible by temporal_factor*pt={qt}")
    f_tokens = F // qt
    if H % qh == 0 and W % qw == 0:
        count = f_tokens * (H // qh) * (W // qw)
        if count <= M:
            return BudgetPlan(H, W, None, count)

    g = math.gcd(H, W)
    hr, wr = H // g, W // g

    def plan_at(k: int) -> tuple[int, int, int, int, int] | None:
        rh, rw = k * hr, k * wr
        a, b = rh // qh, rw // qw
        if a < 1 or b < 1:
            return None
        return rh, rw, a * qh, b * qw, f_tokens * a * b

    k_lo = max(-(-qh // hr), -(-qw // wr))  # smallest k with a full patch cell
    lo_plan = plan_at(k_lo)
    assert lo_plan is not None
    if lo_plan[4] > M:
        raise ValueError(
            f"budget M={M} below minimum achievable token count {lo_plan[4]} "
            f"for F={F} at aspect {hr}:{wr}"
        )

    lo, hi = k_lo, g
    while lo < hi:  # largest k whose cropped grid stays within budget
        mid = (lo + hi + 1) // 2
        p = plan_at(mid)
        if p is not None and p[4] <= M:
            lo = mid
        else:
            hi = mid - 1
    rh, rw, ch, cw, count = plan_at(lo)
    crop = None
    if (ch, cw) != (rh, rw):
        crop = ((rh - ch) // 2, (rw - cw) // 2, ch, cw)
    return BudgetPlan(rh, rw, crop, count)


def assemble(
    ref: TokenSequence,
    motion: TokenSequence | None,
    target: TokenSequence,
) -> TokenSequence:
    """Concatenate reference, motion (oldest first), and target tokens.

    The reference must come from a single-frame latent; its frame coordinate
    is replaced by the sentinel. Motion tokens must already carry negative
    frame coordinates (see framepack.pack). Target tokens keep patchify
    coordinates, so frame_index equals the target latent-frame index.
    """
    parts = [ref, target] if motion is None or len(motion) == 0 else [ref, motion, target]
    dims = {p.dim for p in parts}
    if len(dims) != 1:
        raise ValueError(f"feature-dim mismatch across segments: {sorted(dims)}")

    if (ref.positions[:, 0] != 0).any():
        raise ValueError("reference tokens must come from a single-frame latent")
    ref_pos = ref.positions.copy()
    ref_pos[:, 0] = REFERENCE_FRAME_COORD
    ref_seg = np.full(len(ref), int(Segment.REFERENCE), dtype=np.int64)
    ref_frames = np.full(len(ref), -1, dtype=np.int64)

    blocks = [(ref.tokens, ref_pos, ref_seg, ref_frames)]
    if motion is not None and len(motion) > 0:
        if (motion.positions[:, 0] >= 0).any():
            raise ValueError("motion tokens must carry strictly negative frame coordinates")
        if motion.positions[:, 0].min() <= REFERENCE_FRAME_COORD:
            raise ValueError("motion frame coordinates collide with the reference sentinel")
        mot_seg = np.full(len(motion), int(Segment.MOTION), dtype=np.int64)
        mot_frames = np.full(len(motion), -1, dtype=np.int64)
        blocks.append((motion.tokens, motion.positions, mot_seg, mot_frames))

    tgt_seg = np.full(len(target), int(Segment.TARGET), dtype=np.int64)
    blocks.append((target.tokens, target.positions, tgt_seg, target.positions[:, 0].copy()))

    tokens = np.concatenate([b[0] for b in blocks], axis=0)
    positions = np.concatenate([b[1] for b in blocks], axis=0)
    segment = np.concatenate([b[2] for b in blocks], axis=0)
    frame_index = np.concatenate([b[3] for b in blocks], axis=0)
    return TokenSequence(tokens, positions, segment, frame_index)
