"""Training loop (staged), clip inference, and long-video generation.

Training minimizes the MSE between predicted and true velocities on target
tokens. A batch pairs each sample's reference latent, optional motion-history
latents, noisy target latents, aligned audio, and script tokens; stages
restrict which parameters update. All stochastic draws come from one numpy
generator whose bit state is checkpointed, so resumed runs reproduce the
continuous run bit-exactly.
"""

from __future__ import annotations

import fnmatch
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
from scipy.stats import binomtest

from . import flow
from .audio import AudioWave, align_to_latent, extract_features, AudioFeatureConfig
from .checkpoint import load_arrays, save_arrays, state_arrays, load_state_arrays
from .codec import CodecConfig, LatentVideo, PixelVideo, decode, encode, encode_reference
from .config import RunConfig, StageConfig
from .errors import DataError, NumericError
from .evaluate import (
    BoundaryReport,
    MetricReport,
    boundary_consistency,
    direction_accuracy,
    identity_drift,
    permutation_null,
    sync_score,
)
from .framepack import MotionHistory, pack
from .model import Conditioning, Denoiser, cfg_velocity
from .storage import append_jsonl, read_jsonl
from .synth import DIRECTIONS, Script, load_manifest, load_sample, make_sample, script_token_ids
from .tokens import TokenSequence, assemble, patchify, unpatchify

__all__ = [
    "ClipContext",
    "CorpusData",
    "load_corpus",
    "prepare_batch",
    "train_step",
    "run_stages",
    "generate_clip",
    "generate_long",
    "evaluate_model",
    "history_ablation",
]


@dataclass
class ClipContext:
    """Carry-over state threading continuity through long-video generation."""

    history: MotionHistory
    ref_latent: np.ndarray | None = None
    frame_offset: int = 0


@dataclass
class CorpusData:
    """In-memory training view of one corpus split."""

    latents: np.ndarray  # (n, f, h, w, c)
    ref_latents: np.ndarray  # (n, 1, h, w, c), encode_reference of pixel frame 0
    layered_audio: np.ndarray  # (n, L, T, c_a)
    text_ids: np.ndarray  # (n, 2)
    env_variance: np.ndarray  # (n,)
    records: list[dict[str, Any]]
    fps: int

    def __len__(self) -> int:
        return self.latents.shape[0]

    def filtered_indices(self, data_filter: str) -> np.ndarray:
        if data_filter == "all":
            return np.arange(len(self))
        if data_filter == "top_env_variance":
            cut = np.quantile(self.env_variance, 0.75)
            idx = np.nonzero(self.env_variance >= cut)[0]
            return idx if idx.size else np.arange(len(self))
        raise ValueError(f"unknown data filter {data_filter!r}")


def load_corpus(corpus_dir: str | Path, split: str, cfg: RunConfig) -> CorpusData:
    """Load a split and precompute latents, layered audio, and script tokens."""
    records = load_manifest(corpus_dir, split)
    latents, refs, audio_feats, text_ids, env_var = [], [], [], [], []
    fcfg = audio_feature_config(cfg)
    for rec in records:
        sample = load_sample(corpus_dir, rec)
        latents.append(encode(sample.video, cfg.codec).data)
        ref_image = PixelVideo(sample.video.data[:1], fps=sample.video.fps)
        refs.append(encode_reference(ref_image, cfg.codec).data)
        audio_feats.append(extract_features(sample.wave, fcfg).data)
        text_ids.append(script_token_ids(sample.script))
        env_var.append(float(np.var(sample.envelope)))
    return CorpusData(
        latents=np.stack(latents),
        ref_latents=np.stack(refs),
        layered_audio=np.stack(audio_feats),
        text_ids=np.stack(text_ids),
        env_variance=np.asarray(env_var),
        records=records,
        fps=int(records[0]["fps"]),
    )


def audio_feature_config(cfg: RunConfig) -> AudioFeatureConfig:
    return AudioFeatureConfig(
        sample_rate=cfg.raw["audio"]["sample_rate"],
        feature_rate=cfg.raw["audio"]["feature_rate"],
        bands=cfg.model.audio_bands,
        layers=cfg.model.audio_layers,
    )


@dataclass
class Batch:
    """One training batch; positions/segments are shared across rows."""

    tokens: torch.Tensor
    positions: torch.Tensor
    segment: torch.Tensor
    frame_index: torch.Tensor
    layered_audio: torch.Tensor
    text_ids: torch.Tensor
    t: torch.Tensor
    audio_on: torch.Tensor
    text_on: torch.Tensor
    target_velocity: torch.Tensor
    f_target: int
    frame_offset: int
    x0_tokens: torch.Tensor | None = None
    eps_tokens: torch.Tensor | None = None


def _sample_sequence(
    cfg: RunConfig,
    ref_latent: np.ndarray,
    history_latents: np.ndarray | None,
    x_t_latent: np.ndarray,
) -> TokenSequence:
    ref = patchify(LatentVideo(ref_latent), cfg.patch)
    motion = None
    if history_latents is not None and len(history_latents) > 0:
        history = MotionHistory(capacity=cfg.capacity, frames=list(history_latents))
        motion = pack(history, cfg.schedule, cfg.patch)
    target = patchify(LatentVideo(x_t_latent), cfg.patch)
    return assemble(ref, motion, target)


def prepare_batch(
    corpus: CorpusData,
    cfg: RunConfig,
    stage: StageConfig,
    rng: np.random.Generator,
    capture: bool = False,
) -> Batch:
    """Draw and assemble one batch.

    Draw order (fixed for reproducibility): sample indices, history coin,
    times, noise, audio dropout, text dropout. The history coin is shared by
    the whole batch so sequence shapes stay uniform.
    """
    pool = corpus.filtered_indices(stage.data_filter)
    B = stage.batch_size
    idx = pool[rng.integers(0, pool.size, B)]
    hist = cfg.capacity if rng.random() < stage.motion_prob else 0
    f_clip = cfg.clip_latent_frames
    t = rng.random(B)
    eps = rng.standard_normal((B, f_clip) + corpus.latents.shape[2:]).astype(np.float32)
    audio_on = rng.random(B) >= stage.dropout_audio
    text_on = rng.random(B) >= stage.dropout_text

    tokens_rows, target_rows, x0_rows, eps_rows = [], [], [], []
    shared: TokenSequence | None = None
    for b in range(B):
        latent = corpus.latents[idx[b]]
        x0 = latent[hist : hist + f_clip]
        x_t = flow.interpolate(x0, eps[b], float(t[b])).astype(np.float32)
        seq = _sample_sequence(
            cfg, corpus.ref_latents[idx[b]], latent[:hist] if hist else None, x_t
        )
        if shared is None:
            shared = seq
        tokens_rows.append(seq.tokens)
        v_seq = patchify(LatentVideo(flow.velocity_target(x0, eps[b])), cfg.patch)
        target_rows.append(v_seq.tokens)
        if capture:
            x0_rows.append(patchify(LatentVideo(x0), cfg.patch).tokens)
            eps_rows.append(patchify(LatentVideo(eps[b]), cfg.patch).tokens)

    assert shared is not None
    return Batch(
        tokens=torch.from_numpy(np.stack(tokens_rows)),
        positions=torch.from_numpy(shared.positions),
        segment=torch.from_numpy(shared.segment),
        frame_index=torch.from_numpy(shared.frame_index),
        layered_audio=torch.from_numpy(corpus.layered_audio[idx]),
        text_ids=torch.from_numpy(corpus.text_ids[idx]),
        t=torch.from_numpy(t),
        audio_on=torch.from_numpy(audio_on),
        text_on=torch.from_numpy(text_on),
        target_velocity=torch.from_numpy(np.stack(target_rows)),
        f_target=f_clip,
        frame_offset=hist,
        x0_tokens=torch.from_numpy(np.stack(x0_rows)) if capture else None,
        eps_tokens=torch.from_numpy(np.stack(eps_rows)) if capture else None,
    )


def _aligned_audio(model: Denoiser, cfg: RunConfig, layered: torch.Tensor, f_target: int, frame_offset: int, fps: int) -> torch.Tensor:
    compressed = model.audio_encoder(layered)
    return align_to_latent(
        compressed,
        f_target,
        cfg.audio_tokens_per_frame,
        feature_rate=cfg.raw["audio"]["feature_rate"],
        stride_total=model.audio_encoder.stride_total,
        fps=fps,
        temporal_factor=cfg.codec.temporal_factor,
        frame_offset=frame_offset,
    )


@dataclass
class StepResult:
    loss: float
    batch: Batch | None = None


def trainable_parameters(model: Denoiser, patterns: Sequence[str]) -> list[tuple[str, torch.nn.Parameter]]:
    """Resolve a stage's trainable set; 'all'/'audio' or fnmatch patterns."""
    named = list(model.named_parameters())
    if "all" in patterns:
        return named
    selected = []
    audio_names = set(model.audio_parameter_names())
    for name, p in named:
        if "audio" in patterns and name in audio_names:
            selected.append((name, p))
        elif any(fnmatch.fnmatch(name, pat) for pat in patterns if pat not in ("audio",)):
            selected.append((name, p))
    if not selected:
        raise ValueError(f"trainable patterns {patterns} match no parameters")
    return selected


def train_step(
    model: Denoiser,
    batch: Batch,
    stage: StageConfig,
    optimizer: torch.optim.Optimizer,
    cfg: RunConfig,
    fps: int,
) -> StepResult:
    """One optimization step; returns the scalar loss."""
    optimizer.zero_grad(set_to_none=True)
    aligned = _aligned_audio(model, cfg, batch.layered_audio, batch.f_target, batch.frame_offset, fps)
    cond = Conditioning(
        t=batch.t,
        audio=aligned,
        text_ids=batch.text_ids,
        audio_on=batch.audio_on,
        text_on=batch.text_on,
    )
    pred = model(batch.tokens, batch.positions, batch.segment, batch.frame_index, cond)
    loss = torch.mean((pred - batch.target_velocity) ** 2)
    loss_val = float(loss.detach())
    if not np.isfinite(loss_val):
        raise NumericError(
            f"non-finite training loss (stage {stage.name}); "
            f"t range [{float(batch.t.min()):.4f}, {float(batch.t.max()):.4f}]"
        )
    loss.backward()
    optimizer.step()
    return StepResult(loss=loss_val)


def _build_optimizer(model: Denoiser, stage: StageConfig) -> tuple[torch.optim.Optimizer, list[str]]:
    named = trainable_parameters(model, stage.trainable)
    opt = torch.optim.AdamW(
        [p for _, p in named], lr=stage.learning_rate, weight_decay=stage.weight_decay
    )
    return opt, [n for n, _ in named]


def _optimizer_arrays(optimizer: torch.optim.Optimizer, names: list[str]) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    params = optimizer.param_groups[0]["params"]
    for name, p in zip(names, params):
        state = optimizer.state.get(p)
        if not state:
            continue
        arrays[f"adam/exp_avg/{name}"] = state["exp_avg"].numpy()
        arrays[f"adam/exp_avg_sq/{name}"] = state["exp_avg_sq"].numpy()
        arrays[f"adam/step/{name}"] = np.asarray(state["step"].numpy())
    return arrays


def _restore_optimizer(
    optimizer: torch.optim.Optimizer, names: list[str], arrays: dict[str, np.ndarray]
) -> None:
    params = optimizer.param_groups[0]["params"]
    for name, p in zip(names, params):
        key = f"adam/exp_avg/{name}"
        if key not in arrays:
            continue
        optimizer.state[p] = {
            "step": torch.from_numpy(np.ascontiguousarray(arrays[f"adam/step/{name}"])),
            "exp_avg": torch.from_numpy(np.ascontiguousarray(arrays[key])),
            "exp_avg_sq": torch.from_numpy(np.ascontiguousarray(arrays[f"adam/exp_avg_sq/{name}"])),
        }


def _rng_state_to_jsonable(rng: np.random.Generator) -> dict[str, Any]:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: int(v) for k, v in state["state"].items()},
        "has_uint32": int(state.get("has_uint32", 0)),
        "uinteger": int(state.get("uinteger", 0)),
    }


def _rng_from_jsonable(payload: dict[str, Any]) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": payload["bit_generator"],
        "state": {k: int(v) for k, v in payload["state"].items()},
        "has_uint32": payload["has_uint32"],
        "uinteger": payload["uinteger"],
    }
    return rng


def parameter_checksum(model: Denoiser, names: Sequence[str] | None = None) -> str:
    """SHA-256 over the byte content of (a subset of) model parameters."""
    digest = hashlib.sha256()
    wanted = set(names) if names is not None else None
    for name, p in sorted(model.named_parameters()):
        if wanted is not None and name not in wanted:
            continue
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_training_checkpoint(
    path: str | Path,
    model: Denoiser,
    optimizer: torch.optim.Optimizer | None,
    trained_names: list[str],
    rng: np.random.Generator,
    stage_index: int,
    step_in_stage: int,
    global_step: int,
    cfg: RunConfig,
) -> None:
    arrays = state_arrays(model)
    if optimizer is not None:
        arrays.update(_optimizer_arrays(optimizer, trained_names))
    extra = {
        "model_config": model.cfg.to_dict(),
        "stage_index": stage_index,
        "step_in_stage": step_in_stage,
        "global_step": global_step,
        "rng_state": _rng_state_to_jsonable(rng),
        "run_config": cfg.raw,
    }
    save_arrays(path, arrays, extra)


def load_training_checkpoint(path: str | Path, model: Denoiser) -> dict[str, Any]:
    """Load parameters into `model`; returns header extra + raw arrays."""
    arrays, extra = load_arrays(path)
    if extra.get("model_config") != model.cfg.to_dict():
        raise DataError(f"{path}: checkpoint model config does not match the run config")
    load_state_arrays(model, arrays)
    extra["_arrays"] = arrays
    return extra


def run_stages(
    cfg: RunConfig,
    corpus_dir: str | Path,
    workdir: str | Path,
    resume: bool = False,
    log_hook: Callable[[dict[str, Any]], None] | None = None,
) -> dict[str, Any]:
    """Run the configured training stages; writes checkpoints and a loss log.

    Returns a summary with checkpoint paths and per-stage mean losses. With
    resume=True the latest checkpoint restarts the interrupted stage at its
    recorded step with identical RNG and optimizer state.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    log_path = workdir / "loss_log.jsonl"
    corpus = load_corpus(corpus_dir, "train", cfg)
    model = Denoiser(cfg.model)
    rng = np.random.default_rng(cfg.train_seed)
    stage_index, step_in_stage, global_step = 0, 0, 0
    resume_arrays: dict[str, np.ndarray] | None = None

    latest = workdir / "latest.ckpt"
    if resume:
        if not latest.exists():
            raise DataError(f"cannot resume: {latest} does not exist")
        extra = load_training_checkpoint(latest, model)
        rng = _rng_from_jsonable(extra["rng_state"])
        stage_index = int(extra["stage_index"])
        step_in_stage = int(extra["step_in_stage"])
        global_step = int(extra["global_step"])
        resume_arrays = extra["_arrays"]
    elif latest.exists() or log_path.exists():
        raise DataError(f"{workdir} already holds a run; pass resume or use a fresh directory")

    summary: dict[str, Any] = {"stages": [], "checkpoints": []}
    for si in range(stage_index, len(cfg.stages)):
        stage = cfg.stages[si]
        optimizer, trained_names = _build_optimizer(model, stage)
        if resume_arrays is not None:
            _restore_optimizer(optimizer, trained_names, resume_arrays)
            resume_arrays = None
        losses = []
        for step in range(step_in_stage, stage.steps):
            t0 = time.monotonic()
            batch = prepare_batch(corpus, cfg, stage, rng)
            result = train_step(model, batch, stage, optimizer, cfg, corpus.fps)
            global_step += 1
            losses.append(result.loss)
            record = {
                "step": global_step,
                "stage": stage.name,
                "stage_step": step + 1,
                "loss": result.loss,
                "lr": stage.learning_rate,
                "wall_time": time.monotonic() - t0,
            }
            append_jsonl(log_path, record)
            if log_hook:
                log_hook(record)
            if (step + 1) % cfg.checkpoint_every == 0 and (step + 1) < stage.steps:
                save_training_checkpoint(
                    latest, model, optimizer, trained_names, rng, si, step + 1, global_step, cfg
                )
        step_in_stage = 0
        ckpt = workdir / f"stage{si + 1}.ckpt"
        save_training_checkpoint(
            ckpt, model, optimizer, trained_names, rng, si + 1, 0, global_step, cfg
        )
        save_training_checkpoint(
            latest, model, optimizer, trained_names, rng, si + 1, 0, global_step, cfg
        )
        summary["stages"].append({"name": stage.name, "mean_loss": float(np.mean(losses)) if losses else None})
        summary["checkpoints"].append(str(ckpt))
    summary["loss_log"] = str(log_path)
    summary["global_step"] = global_step
    return summary


def smoothed_losses(log_path: str | Path, window: int = 100) -> list[float]:
    """Window-mean losses from a loss log, in step order."""
    losses = [rec["loss"] for rec in read_jsonl(log_path)]
    return [float(np.mean(losses[i : i + window])) for i in range(0, len(losses) - window + 1, window)]


def generate_clip(
    model: Denoiser,
    ref_image: PixelVideo,
    wave: AudioWave,
    script: Script,
    ctx: ClipContext,
    sampler_cfg: flow.SamplerConfig,
    cfg: RunConfig,
    rng: np.random.Generator,
) -> tuple[PixelVideo, ClipContext]:
    """Generate one clip conditioned on reference, history, audio, and script.

    The context supplies the motion history and the absolute frame offset used
    for audio alignment; generated latents are pushed back into the history.
    """
    fps = int(ref_image.fps)
    f_clip = cfg.clip_latent_frames
    tf = cfg.codec.temporal_factor
    need = (ctx.frame_offset + f_clip) * tf / fps
    if wave.duration + 1e-9 < need:
        raise ValueError(
            f"audio too short: {wave.duration:.3f}s < {need:.3f}s required for this clip"
        )
    if ctx.ref_latent is None:
        ctx.ref_latent = encode_reference(ref_image, cfg.codec).data

    ref_seq = patchify(LatentVideo(ctx.ref_latent), cfg.patch)
    motion_seq = pack(ctx.history, cfg.schedule, cfg.patch) if len(ctx.history) else None
    h, w, c = ctx.ref_latent.shape[1:]
    noise = rng.standard_normal((f_clip, h, w, c)).astype(np.float32)
    noise_seq = patchify(LatentVideo(noise), cfg.patch)
    seq = assemble(ref_seq, motion_seq, noise_seq)

    n_prefix = len(seq) - len(noise_seq)
    positions = torch.from_numpy(seq.positions)
    segment = torch.from_numpy(seq.segment)
    frame_index = torch.from_numpy(seq.frame_index)
    prefix = torch.from_numpy(seq.tokens[:n_prefix])
    text = torch.from_numpy(script_token_ids(script))[None]

    with torch.no_grad():
        layered = torch.from_numpy(extract_features(wave, audio_feature_config(cfg)).data)
        aligned = _aligned_audio(model, cfg, layered[None], f_clip, ctx.frame_offset, fps)

        def velocity_fn(x_tokens: torch.Tensor, t: float, _cond: Any) -> torch.Tensor:
            full = torch.cat([prefix, x_tokens], dim=0)[None]
            cond = Conditioning(t=torch.tensor([t]), audio=aligned, text_ids=text)
            v = cfg_velocity(
                model, full, positions, segment, frame_index, cond,
                cfg.guidance_audio, cfg.guidance_text,
            )
            return v[0]

        x0_tokens = flow.generate(
            velocity_fn, torch.from_numpy(noise_seq.tokens), sampler_cfg
        )

    out_seq = TokenSequence(
        x0_tokens.numpy(), noise_seq.positions, noise_seq.segment, noise_seq.frame_index
    )
    latent = unpatchify(out_seq, cfg.patch, (f_clip, h, w, c))
    clipped = np.clip(latent.data, -1.0, 1.0)
    video = decode(LatentVideo(clipped), cfg.codec, fps=fps)
    ctx.history.push(list(clipped))
    ctx.frame_offset += f_clip
    return video, ctx


def generate_long(
    model: Denoiser,
    ref_image: PixelVideo,
    wave: AudioWave,
    script: Script,
    n_clips: int,
    sampler_cfg: flow.SamplerConfig,
    cfg: RunConfig,
    seed: int,
    use_history: bool = True,
) -> tuple[PixelVideo, BoundaryReport]:
    """Generate n_clips clips threading the context; returns the concatenated
    video with per-boundary continuity diagnostics.

    use_history=False clears the motion history between clips (ablation arm);
    the audio frame offset still advances so alignment stays correct.
    """
    if n_clips < 1:
        raise ValueError(f"n_clips must be >= 1, got {n_clips}")
    rng = np.random.default_rng(seed)
    ctx = ClipContext(history=MotionHistory(capacity=cfg.capacity))
    chunks = []
    for k in range(n_clips):
        if not use_history:
            ctx.history = MotionHistory(capacity=cfg.capacity)
        try:
            clip, ctx = generate_clip(model, ref_image, wave, script, ctx, sampler_cfg, cfg, rng)
        except Exception as exc:
            raise NumericError(f"clip {k} failed: {exc}") from exc
        chunks.append(clip.data)
    video = PixelVideo(np.concatenate(chunks, axis=0), fps=ref_image.fps)
    report = boundary_consistency(video, cfg.clip_frames)
    return video, report


def evaluate_model(
    model: Denoiser,
    cfg: RunConfig,
    corpus_dir: str | Path,
    split: str = "val",
    n_samples: int | None = None,
    seed: int | None = None,
    sampler_cfg: flow.SamplerConfig | None = None,
) -> MetricReport:
    """Held-out protocol: regenerate each sample's video from its reference
    frame, audio, and script, then score sync/direction/identity/boundaries.

    Untrackable generations count as zero sync, not as exclusions.
    """
    records = load_manifest(corpus_dir, split)
    n = min(n_samples or cfg.eval_n_samples, len(records))
    seed = cfg.eval_seed if seed is None else seed
    sampler_cfg = sampler_cfg or cfg.sampler
    rows = []
    gen_videos, waves, moving_videos, moving_scripts = [], [], [], []
    jumps, drifts, syncs = [], [], []
    for i, rec in enumerate(records[:n]):
        sample = load_sample(corpus_dir, rec)
        ref = PixelVideo(sample.video.data[:1], fps=sample.video.fps)
        n_clips = sample.video.frames // cfg.clip_frames
        video, report = generate_long(
            model, ref, sample.wave, sample.script, n_clips, sampler_cfg, cfg, seed + i
        )
        s = sync_score(video, sample.wave)
        sync_val = 0.0 if s is None else s
        syncs.append(sync_val)
        drift = identity_drift(video, ref)
        if drift is not None:
            drifts.append(drift)
        if np.isfinite(report.boundary_jump):
            jumps.append(report.boundary_jump)
        gen_videos.append(video)
        waves.append(sample.wave)
        if sample.script.speed > 0:
            moving_videos.append(video)
            moving_scripts.append(sample.script)
        rows.append(
            {
                "id": rec["id"],
                "sync": sync_val,
                "sync_flagged": s is None,
                "identity_drift": drift,
                "boundary_jump": report.boundary_jump,
                "direction": sample.script.direction,
                "speed": sample.script.speed,
            }
        )
    acc, used, excluded = direction_accuracy(moving_videos, moving_scripts)
    null = None
    if len(gen_videos) >= 2:
        try:
            null = permutation_null(gen_videos, waves)
        except ValueError:
            null = None  # every pairing flagged (untrackable generations)
    return MetricReport(
        sync_corr=float(np.mean(syncs)) if syncs else float("nan"),
        direction_acc=acc,
        identity_drift=float(np.mean(drifts)) if drifts else float("nan"),
        boundary_jump=float(np.mean(jumps)) if jumps else float("nan"),
        null_sync=null,
        per_sample=rows,
    )


@dataclass
class AblationResult:
    """Per-seed with/without-history comparison plus sign-test p-values."""

    rows: list[dict[str, Any]] = field(default_factory=list)
    mean_jump_with: float = float("nan")
    mean_jump_without: float = float("nan")
    mean_agree_with: float = float("nan")
    mean_agree_without: float = float("nan")
    p_jump: float = 1.0
    p_agree: float = 1.0


def _sign_test(wins: int, losses: int) -> float:
    n = wins + losses
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)


def history_ablation(
    model: Denoiser,
    cfg: RunConfig,
    n_seeds: int = 20,
    n_clips: int = 4,
    base_seed: int = 9000,
    sampler_cfg: flow.SamplerConfig | None = None,
) -> AblationResult:
    """Compare long-video continuity with the clip context threaded vs
    cleared between clips, over fresh synthetic inputs."""
    sampler_cfg = sampler_cfg or cfg.sampler
    rows = []
    jw, jo, aw, ao = [], [], [], []
    moving = [d for d in DIRECTIONS if d != "still"]
    frames_total = n_clips * cfg.clip_frames
    for s in range(n_seeds):
        rng = np.random.default_rng(base_seed + s)
        direction = moving[s % len(moving)]
        script = Script(direction, int(rng.integers(1, 3)), int(rng.integers(0, 4)))
        sample = make_sample(
            base_seed + s, script, frames=frames_total,
            size=cfg.corpus["height"], fps=cfg.corpus["fps"],
        )
        ref = PixelVideo(sample.video.data[:1], fps=sample.video.fps)
        _, rep_with = generate_long(
            model, ref, sample.wave, script, n_clips, sampler_cfg, cfg, base_seed + s,
            use_history=True,
        )
        _, rep_without = generate_long(
            model, ref, sample.wave, script, n_clips, sampler_cfg, cfg, base_seed + s,
            use_history=False,
        )
        rows.append(
            {
                "seed": base_seed + s,
                "jump_with": rep_with.boundary_jump,
                "jump_without": rep_without.boundary_jump,
                "agree_with": rep_with.direction_agreement,
                "agree_without": rep_without.direction_agreement,
            }
        )
        jw.append(rep_with.boundary_jump)
        jo.append(rep_without.boundary_jump)
        if np.isfinite(rep_with.direction_agreement) and np.isfinite(rep_without.direction_agreement):
            aw.append(rep_with.direction_agreement)
            ao.append(rep_without.direction_agreement)

    jump_wins = sum(a < b for a, b in zip(jw, jo))
    jump_losses = sum(a > b for a, b in zip(jw, jo))
    agree_wins = sum(a > b for a, b in zip(aw, ao))
    agree_losses = sum(a < b for a, b in zip(aw, ao))
    return AblationResult(
        rows=rows,
        mean_jump_with=float(np.mean(jw)),
        mean_jump_without=float(np.mean(jo)),
        mean_agree_with=float(np.mean(aw)) if aw else float("nan"),
        mean_agree_without=float(np.mean(ao)) if ao else float("nan"),
        p_jump=_sign_test(jump_wins, jump_losses),
        p_agree=_sign_test(agree_wins, agree_losses),
    )
