"""Conditioned transformer that predicts flow velocities on target tokens.

The network runs full self-attention over the whole visual sequence
(reference, motion, target) with 3D rotary position encoding, injects the
script embedding through per-block cross-attention, injects the flow time
through learned scale/shift/gate modulation of each block's normalizations
(noisy target tokens are modulated with t, clean reference/motion tokens with
t=0), and injects audio through per-frame segmented cross-attention blocks:
the target tokens of latent frame i attend only to that frame's audio tokens.

Text and audio cross-attention output projections are zero-initialized, so a
freshly added conditioning pathway starts as an exact no-op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import AudioEncoder
from .tokens import Segment, TokenSequence

__all__ = [
    "ModelConfig",
    "Conditioning",
    "Denoiser",
    "cfg_velocity",
    "count_parameters",
]


@dataclass(frozen=True)
class ModelConfig:
    width: int = 128
    depth: int = 4
    heads: int = 4
    audio_block_every: int = 1
    text_vocab: int = 16
    text_dim: int = 48
    token_dim: int = 384
    ffn_mult: int = 4
    audio_layers: int = 3
    audio_bands: int = 40
    audio_hidden: int = 64
    param_seed: int = 0

    def __post_init__(self) -> None:
        if self.width % self.heads:
            raise ValueError(f"width {self.width} must be divisible by heads {self.heads}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.audio_block_every < 1:
            raise ValueError(f"audio_block_every must be >= 1, got {self.audio_block_every}")
        if (self.width // self.heads) % 2:
            raise ValueError("head dim must be even for rotary embedding")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class Conditioning:
    """Per-batch conditioning: aligned audio tokens, script token ids, time.

    audio is (B, f', t_a, width) or None; text_ids is (B, n_text) or None;
    t is (B,). audio_on / text_on are per-row flags used for classifier-free
    dropout at train time and guidance at inference; a False flag removes that
    pathway's residual for the row.
    """

    t: torch.Tensor
    audio: torch.Tensor | None = None
    text_ids: torch.Tensor | None = None
    audio_on: torch.Tensor | None = None
    text_on: torch.Tensor | None = None

    def resolved_flags(self, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        audio_on = self.audio_on
        if audio_on is None:
            audio_on = torch.full((batch,), self.audio is not None, dtype=torch.bool)
        text_on = self.text_on
        if text_on is None:
            text_on = torch.full((batch,), self.text_ids is not None, dtype=torch.bool)
        return audio_on, text_on

    def with_flags(self, audio_on: bool, text_on: bool) -> "Conditioning":
        batch = self.t.shape[0]
        return Conditioning(
            t=self.t,
            audio=self.audio,
            text_ids=self.text_ids,
            audio_on=torch.full((batch,), audio_on, dtype=torch.bool),
            text_on=torch.full((batch,), text_on, dtype=torch.bool),
        )


def _rope_axis_dims(head_dim: int) -> tuple[int, int, int]:
    third = head_dim // 3
    d_space = (third // 2) * 2
    return head_dim - 2 * d_space, d_space, d_space


def rope_angles(positions: torch.Tensor, head_dim: int, base: float = 10000.0) -> torch.Tensor:
    """(N, head_dim/2) rotation angles from integer (frame, row, col) coords."""
    dims = _rope_axis_dims(head_dim)
    parts = []
    for axis, da in enumerate(dims):
        half = da // 2
        freqs = base ** (-torch.arange(half, dtype=torch.float64) / max(half, 1))
        parts.append(positions[:, axis : axis + 1].to(torch.float64) * freqs[None, :])
    return torch.cat(parts, dim=1)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate (B, H, N, hd) features pairwise by precomputed cos/sin (N, hd/2)."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, d = x.shape
    return x.view(b, n, heads, d // heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, hd = x.shape
    return x.transpose(1, 2).reshape(b, n, h * hd)


def _attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)
    return weights @ v


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = apply_rope(_split_heads(q, self.heads), cos, sin)
        k = apply_rope(_split_heads(k, self.heads), cos, sin)
        v = _split_heads(v, self.heads)
        return self.out(_merge_heads(_attention(q, k, v)))


class CrossAttention(nn.Module):
    """Queries from visual tokens, keys/values from a conditioning sequence."""

    def __init__(self, width: int, kv_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(width)
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(kv_dim, width)
        self.v = nn.Linear(kv_dim, width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        q = _split_heads(self.q(self.norm(x)), self.heads)
        k = _split_heads(self.k(context), self.heads)
        v = _split_heads(self.v(context), self.heads)
        return self.out(_merge_heads(_attention(q, k, v)))


class FrameAudioAttention(nn.Module):
    """Per-frame segmented audio cross-attention over target tokens.

    Target tokens of latent frame i attend only to audio[:, i]; reference and
    motion tokens pass through unchanged. Frames are processed independently,
    so perturbing another frame's audio cannot touch this frame's output.
    """

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.attn = CrossAttention(width, width, heads)

    def forward(
        self,
        x: torch.Tensor,
        frame_slices: list[tuple[int, int]],
        audio: torch.Tensor,
        gate: torch.Tensor,
    ) -> torch.Tensor:
        if audio.shape[1] != len(frame_slices):
            raise ValueError(
                f"audio has {audio.shape[1]} frames, target sequence has {len(frame_slices)}"
            )
        first_target = frame_slices[0][0]
        pieces = [x[:, :first_target]]
        g = gate.to(x.dtype).view(-1, 1, 1)
        for i, (s, e) in enumerate(frame_slices):
            xs = x[:, s:e]
            pieces.append(xs + g * self.attn(xs, audio[:, i]))
        return torch.cat(pieces, dim=1)


class FeedForward(nn.Module):
    def __init__(self, width: int, mult: int):
        super().__init__()
        self.fc1 = nn.Linear(width, mult * width)
        self.fc2 = nn.Linear(mult * width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Self-attention + text cross-attention + FFN with time modulation."""

    def __init__(self, width: int, heads: int, text_dim: int, ffn_mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False)
        self.self_attn = SelfAttention(width, heads)
        self.text_attn = CrossAttention(width, text_dim, heads)
        self.ffn = FeedForward(width, ffn_mult)
        self.modulation = nn.Linear(width, 6 * width)

    def forward(
        self,
        x: torch.Tensor,
        mod_t: torch.Tensor,
        mod_0: torch.Tensor,
        target_mask: torch.Tensor,
        cos: torch.Tensor,
        sin: torch.Tensor,
        text_emb: torch.Tensor | None,
        text_gate: torch.Tensor,
    ) -> torch.Tensor:
        sel = torch.where(target_mask.view(1, -1, 1, 1), mod_t[:, None], mod_0[:, None])
        sh1, sc1, g1, sh2, sc2, g2 = sel.unbind(dim=2)
        x = x + g1 * self.self_attn(self.norm1(x) * (1 + sc1) + sh1, cos, sin)
        if text_emb is not None and bool(text_gate.any()):
            tg = text_gate.to(x.dtype).view(-1, 1, 1)
            x = x + tg * self.text_attn(x, text_emb)
        x = x + g2 * self.ffn(self.norm2(x) * (1 + sc2) + sh2)
        return x


def time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of continuous times in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.device)
    args = 1000.0 * t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Denoiser(nn.Module):
    """The full denoising network, audio encoder included as a submodule."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.input = nn.Linear(cfg.token_dim, cfg.width)
        self.segment_embed = nn.Embedding(3, cfg.width)
        self.text_embed = nn.Embedding(cfg.text_vocab, cfg.text_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.width, cfg.width), nn.SiLU(), nn.Linear(cfg.width, cfg.width)
        )
        self.blocks = nn.ModuleList(
            [Block(cfg.width, cfg.heads, cfg.text_dim, cfg.ffn_mult) for _ in range(cfg.depth)]
        )
        self.audio_attn = nn.ModuleList(
            [
                FrameAudioAttention(cfg.width, cfg.heads)
                if (i + 1) % cfg.audio_block_every == 0
                else None
                for i in range(cfg.depth)
            ]
        )
        self.audio_encoder = AudioEncoder(
            num_layers=cfg.audio_layers,
            in_channels=cfg.audio_bands,
            width=cfg.width,
            hidden=cfg.audio_hidden,
        )
        self.norm_out = nn.LayerNorm(cfg.width, elementwise_affine=False)
        self.final_modulation = nn.Linear(cfg.width, 2 * cfg.width)
        self.head = nn.Linear(cfg.width, cfg.token_dim)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Deterministic init from the config's parameter seed.

        Cross-attention output projections and all modulation layers start at
        zero so new conditioning pathways and block residuals begin as no-ops;
        the output head keeps a small random init so gradients reach upstream
        modules even before the backbone trains.
        """
        gen = torch.Generator().manual_seed(self.cfg.param_seed)

        def zero_init(name: str) -> bool:
            if "modulation" in name:
                return True
            if ".text_attn.out." in name:
                return True
            return name.startswith("audio_attn.") and ".out." in name

        for name, p in self.named_parameters():
            if zero_init(name) or name.endswith("bias") or "layer_logits" in name:
                nn.init.zeros_(p)
            elif p.dim() == 1:  # layer norm weights
                nn.init.ones_(p)
            else:
                with torch.no_grad():
                    p.copy_(torch.empty_like(p).normal_(0.0, 0.02, generator=gen))

    def _frame_slices(self, segment: torch.Tensor, frame_index: torch.Tensor) -> list[tuple[int, int]]:
        target = segment == int(Segment.TARGET)
        idx = torch.nonzero(target).flatten()
        if idx.numel() == 0:
            raise ValueError("sequence contains no target tokens")
        if int(idx[-1] - idx[0]) != idx.numel() - 1 or int(idx[-1]) != segment.numel() - 1:
            raise ValueError("target tokens must form the trailing contiguous block")
        first = int(idx[0])
        frames = frame_index[idx]
        vals, counts = torch.unique_consecutive(frames, return_counts=True)
        if not torch.equal(vals, torch.arange(vals.numel())):
            raise ValueError("target frames must be contiguous and ascending from 0")
        if not bool((counts == counts[0]).all()):
            raise ValueError("target frames must contribute equal token counts")
        ends = torch.cumsum(counts, dim=0) + first
        return [(int(e - c), int(e)) for e, c in zip(ends, counts)]

    def forward(
        self,
        tokens: torch.Tensor,
        positions: torch.Tensor,
        segment: torch.Tensor,
        frame_index: torch.Tensor,
        cond: Conditioning,
    ) -> torch.Tensor:
        """Predict velocities for TARGET tokens; returns (B, N_target, token_dim)."""
        if tokens.dim() != 3:
            raise ValueError(f"tokens must be (B, N, d), got {tuple(tokens.shape)}")
        batch = tokens.shape[0]
        slices = self._frame_slices(segment, frame_index)
        audio_on, text_on = cond.resolved_flags(batch)
        if cond.audio is not None and cond.audio.shape[1] != len(slices):
            raise ValueError(
                f"audio frame count {cond.audio.shape[1]} != target latent frames {len(slices)}"
            )

        angles = rope_angles(positions, self.cfg.width // self.cfg.heads).to(tokens.dtype)
        cos, sin = torch.cos(angles), torch.sin(angles)
        target_mask = segment == int(Segment.TARGET)

        x = self.input(tokens) + self.segment_embed(segment)[None]
        tvec = self.time_mlp(time_embedding(cond.t, self.cfg.width).to(tokens.dtype))
        zvec = self.time_mlp(time_embedding(torch.zeros_like(cond.t), self.cfg.width).to(tokens.dtype))
        text_emb = None
        if cond.text_ids is not None and bool(text_on.any()):
            text_emb = self.text_embed(cond.text_ids)

        for block, audio_block in zip(self.blocks, self.audio_attn):
            mod_t = block.modulation(F.silu(tvec)).view(batch, 6, self.cfg.width)
            mod_0 = block.modulation(F.silu(zvec)).view(batch, 6, self.cfg.width)
            x = block(x, mod_t, mod_0, target_mask, cos, sin, text_emb, text_on)
            if audio_block is not None and cond.audio is not None and bool(audio_on.any()):
                x = audio_block(x, slices, cond.audio, audio_on)

        first_target = slices[0][0]
        h = self.norm_out(x[:, first_target:])
        shift, scale = self.final_modulation(F.silu(tvec)).chunk(2, dim=-1)
        h = h * (1 + scale[:, None]) + shift[:, None]
        return self.head(h)

    def forward_sequence(self, seq: TokenSequence, cond: Conditioning) -> torch.Tensor:
        """Single-sample convenience wrapper around :meth:`forward`."""
        p = next(self.parameters())
        out = self.forward(
            torch.as_tensor(seq.tokens, dtype=p.dtype)[None],
            torch.as_tensor(seq.positions),
            torch.as_tensor(seq.segment),
            torch.as_tensor(seq.frame_index),
            cond,
        )
        return out[0]

    def audio_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if _is_audio_param(n)]


def _is_audio_param(name: str) -> bool:
    return name.startswith("audio_encoder.") or ".audio_attn" in name or name.startswith(
        "audio_attn."
    )


def count_parameters(cfg: ModelConfig) -> int:
    """Total parameter count for a config."""
    return sum(p.numel() for p in Denoiser(cfg).parameters())


def cfg_velocity(
    model: Denoiser,
    tokens: torch.Tensor,
    positions: torch.Tensor,
    segment: torch.Tensor,
    frame_index: torch.Tensor,
    cond: Conditioning,
    s_audio: float,
    s_text: float,
) -> torch.Tensor:
    """Dual-scale classifier-free guidance over text then audio.

    v = v_uncond + s_text*(v_text - v_uncond) + s_audio*(v_text+audio - v_text);
    the exact (0,0) and (1,1) cases collapse to a single forward pass.
    """
    if s_audio < 0 or s_text < 0:
        raise ValueError(f"guidance scales must be >= 0, got ({s_audio}, {s_text})")

    def fwd(c: Conditioning) -> torch.Tensor:
        return model.forward(tokens, positions, segment, frame_index, c)

    if s_audio == 0.0 and s_text == 0.0:
        return fwd(cond.with_flags(False, False))
    if s_audio == 1.0 and s_text == 1.0:
        return fwd(cond.with_flags(True, True))

    v_u = fwd(cond.with_flags(False, False))
    v_t = fwd(cond.with_flags(False, True))
    v = v_u + s_text * (v_t - v_u)
    if s_audio != 0.0:
        v_ta = fwd(cond.with_flags(True, True))
        v = v + s_audio * (v_ta - v_t)
    return v
