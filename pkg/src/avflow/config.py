"""Run configuration: one structured document validated before any work starts.

Unknown keys are rejected and every value is checked against the owning
module's invariants; all problems are reported at once. The effective config
(after CLI overrides) is echoed verbatim into every output directory so runs
can be reproduced from the echo alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .codec import CodecConfig
from .errors import ConfigError
from .flow import SamplerConfig
from .framepack import PackSchedule
from .model import ModelConfig
from .synth import TEXT_VOCAB_SIZE
from .tokens import PatchConfig, compute_token_count

__all__ = ["StageConfig", "RunConfig", "load_config", "default_config_dict", "apply_overrides"]

ENV_CONFIG_VAR = "AVFLOW_CONFIG"


@dataclass(frozen=True)
class StageConfig:
    """One training stage: step budget, learning rate, and trainable subset."""

    name: str
    steps: int
    learning_rate: float
    batch_size: int = 8
    trainable: tuple[str, ...] = ("all",)
    dropout_audio: float = 0.1
    dropout_text: float = 0.1
    data_filter: str = "all"
    motion_prob: float = 0.5
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"stage {self.name}: steps must be >= 1, got {self.steps}")
        if self.learning_rate <= 0:
            raise ValueError(f"stage {self.name}: learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError(f"stage {self.name}: batch_size must be >= 1")
        if not self.trainable:
            raise ValueError(f"stage {self.name}: trainable set must be non-empty")
        for r in (self.dropout_audio, self.dropout_text, self.motion_prob):
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"stage {self.name}: rates must lie in [0, 1]")
        if self.data_filter not in ("all", "top_env_variance"):
            raise ValueError(
                f"stage {self.name}: unknown data_filter {self.data_filter!r} "
                "(expected 'all' or 'top_env_variance')"
            )


def default_config_dict() -> dict[str, Any]:
    """Built-in defaults for the desk-scale end-to-end run."""
    return {
        "codec": {"temporal_factor": 2, "spatial_factor": 4},
        "patch": {"pt": 1, "ph": 2, "pw": 2},
        "budget": {"max_tokens": 1024},
        "framepack": {"schedule": [[2, 1], [2, 2], [None, 4]], "capacity": 2},
        "model": {
            "width": 128,
            "depth": 4,
            "heads": 4,
            "audio_block_every": 1,
            "text_vocab": 16,
            "text_dim": 48,
            "ffn_mult": 4,
            "param_seed": 0,
        },
        "audio": {
            "sample_rate": 16000,
            "feature_rate": 50,
            "bands": 40,
            "layers": 3,
            "hidden": 64,
            "tokens_per_frame": 4,
        },
        "corpus": {
            "train_n": 500,
            "val_n": 50,
            "frames": 8,
            "height": 64,
            "width": 64,
            "fps": 8,
            "seed": 1,
            # held-out samples are longer and slow-moving so sync nulls have
            # enough effective length and paths never reflect mid-clip
            "val_frames": 24,
            "val_max_speed": 1,
        },
        "clip": {"frames": 4},
        "stages": [
            {
                "name": "audio_warmup",
                "steps": 300,
                "learning_rate": 3.0e-4,
                "batch_size": 8,
                "trainable": ["audio"],
            },
            {
                "name": "full",
                "steps": 2600,
                "learning_rate": 3.0e-4,
                "batch_size": 8,
                "trainable": ["all"],
            },
            {
                "name": "finetune",
                "steps": 400,
                "learning_rate": 1.0e-4,
                "batch_size": 8,
                "trainable": ["all"],
                "data_filter": "top_env_variance",
            },
        ],
        "sampler": {"num_steps": 16, "seed": 77, "guidance_audio": 1.0, "guidance_text": 1.0},
        "train": {"seed": 5, "checkpoint_every": 200},
        "eval": {"n_samples": 50, "seed": 123},
        "paths": {"corpus_dir": "corpus", "train_dir": "train"},
    }


class _Checker:
    """Collects every config problem so they are reported in one error."""

    def __init__(self) -> None:
        self.problems: list[str] = []

    def section(self, raw: dict[str, Any], name: str, allowed: dict[str, Any]) -> dict[str, Any]:
        got = raw.get(name, {})
        if not isinstance(got, dict):
            self.problems.append(f"{name}: expected a mapping, got {type(got).__name__}")
            got = {}
        for key in got:
            if key not in allowed:
                self.problems.append(f"{name}.{key}: unknown key")
        merged = dict(allowed)
        merged.update({k: v for k, v in got.items() if k in allowed})
        return merged

    def build(self, what: str, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValueError, TypeError) as exc:
            self.problems.append(f"{what}: {exc}")
            return None

    def finish(self) -> None:
        if self.problems:
            raise ConfigError(
                "invalid configuration:\n  " + "\n  ".join(sorted(self.problems))
            )


@dataclass
class RunConfig:
    """Validated run configuration plus the raw dict for echoing."""

    codec: CodecConfig
    patch: PatchConfig
    max_tokens: int
    schedule: PackSchedule
    capacity: int
    model: ModelConfig
    audio_tokens_per_frame: int
    corpus: dict[str, int]
    clip_frames: int
    stages: list[StageConfig]
    sampler: SamplerConfig
    sampler_seed: int
    guidance_audio: float
    guidance_text: float
    train_seed: int
    checkpoint_every: int
    eval_n_samples: int
    eval_seed: int
    paths: dict[str, str]
    raw: dict[str, Any] = field(repr=False, default_factory=dict)

    @property
    def token_dim(self) -> int:
        return self.codec.latent_channels * self.patch.pt * self.patch.ph * self.patch.pw

    @property
    def clip_latent_frames(self) -> int:
        return self.clip_frames // self.codec.temporal_factor

    @property
    def latent_grid(self) -> tuple[int, int]:
        h = self.corpus["height"] // self.codec.spatial_factor // self.patch.ph
        w = self.corpus["width"] // self.codec.spatial_factor // self.patch.pw
        return h, w

    def echo(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.raw, fh, sort_keys=True, default_flow_style=None)


def _merge_raw(raw: dict[str, Any]) -> dict[str, Any]:
    base = default_config_dict()
    merged: dict[str, Any] = {}
    for key in base:
        if key == "stages":
            merged[key] = raw.get(key, base[key])
        elif isinstance(base[key], dict):
            sub = dict(base[key])
            sub.update(raw.get(key, {}) if isinstance(raw.get(key, {}), dict) else {})
            merged[key] = sub
        else:
            merged[key] = raw.get(key, base[key])
    for key in raw:
        if key not in base:
            merged[key] = raw[key]  # left for the checker to flag
    return merged


def build_config(raw: dict[str, Any]) -> RunConfig:
    """Validate a raw mapping into a RunConfig; raises ConfigError listing
    every offending key at once."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    ck = _Checker()
    defaults = default_config_dict()
    for key in raw:
        if key not in defaults:
            ck.problems.append(f"{key}: unknown section")
    raw = _merge_raw(raw)

    codec_d = ck.section(raw, "codec", defaults["codec"])
    patch_d = ck.section(raw, "patch", defaults["patch"])
    budget_d = ck.section(raw, "budget", defaults["budget"])
    fp_d = ck.section(raw, "framepack", defaults["framepack"])
    model_d = ck.section(raw, "model", defaults["model"])
    audio_d = ck.section(raw, "audio", defaults["audio"])
    corpus_d = ck.section(raw, "corpus", defaults["corpus"])
    clip_d = ck.section(raw, "clip", defaults["clip"])
    sampler_d = ck.section(raw, "sampler", defaults["sampler"])
    train_d = ck.section(raw, "train", defaults["train"])
    eval_d = ck.section(raw, "eval", defaults["eval"])
    paths_d = ck.section(raw, "paths", defaults["paths"])

    codec = ck.build("codec", CodecConfig, **codec_d)
    patch = ck.build("patch", PatchConfig, **patch_d)
    schedule = ck.build(
        "framepack.schedule",
        lambda lv: PackSchedule(tuple((None if c is None else int(c), int(p)) for c, p in lv)),
        fp_d["schedule"],
    )
    capacity = int(fp_d["capacity"])
    if capacity < 1:
        ck.problems.append(f"framepack.capacity: must be >= 1, got {capacity}")

    token_dim = None
    if codec and patch:
        token_dim = codec.latent_channels * patch.pt * patch.ph * patch.pw
    model_cfg = None
    if token_dim is not None:
        model_cfg = ck.build(
            "model",
            ModelConfig,
            token_dim=token_dim,
            audio_layers=int(audio_d["layers"]),
            audio_bands=int(audio_d["bands"]),
            audio_hidden=int(audio_d["hidden"]),
            **model_d,
        )
    if model_cfg and model_cfg.text_vocab < TEXT_VOCAB_SIZE:
        ck.problems.append(
            f"model.text_vocab: must cover the script vocabulary ({TEXT_VOCAB_SIZE}), "
            f"got {model_cfg.text_vocab}"
        )
    if audio_d["sample_rate"] % audio_d["feature_rate"]:
        ck.problems.append("audio.feature_rate: must divide audio.sample_rate")
    if int(audio_d["tokens_per_frame"]) < 1:
        ck.problems.append("audio.tokens_per_frame: must be >= 1")

    stages_raw = raw.get("stages", [])
    stages: list[StageConfig] = []
    if not isinstance(stages_raw, list) or not stages_raw:
        ck.problems.append("stages: must be a non-empty list")
    else:
        stage_keys = {
            "name", "steps", "learning_rate", "batch_size", "trainable",
            "dropout_audio", "dropout_text", "data_filter", "motion_prob", "weight_decay",
        }
        for i, st in enumerate(stages_raw):
            for key in st:
                if key not in stage_keys:
                    ck.problems.append(f"stages[{i}].{key}: unknown key")
            kw = {k: v for k, v in st.items() if k in stage_keys}
            if "trainable" in kw:
                kw["trainable"] = tuple(kw["trainable"])
            built = ck.build(f"stages[{i}]", StageConfig, **kw)
            if built:
                stages.append(built)

    sampler = ck.build("sampler", SamplerConfig, num_steps=int(sampler_d["num_steps"]))
    for key in ("guidance_audio", "guidance_text"):
        if float(sampler_d[key]) < 0:
            ck.problems.append(f"sampler.{key}: must be >= 0")

    corpus = {k: int(corpus_d[k]) for k in corpus_d}
    clip_frames = int(clip_d["frames"])
    if codec and patch:
        try:
            count = compute_token_count(
                corpus["frames"], corpus["height"], corpus["width"], codec, patch
            )
            if count > int(budget_d["max_tokens"]):
                ck.problems.append(
                    f"corpus: resolution yields {count} tokens, over budget "
                    f"{budget_d['max_tokens']}"
                )
        except ValueError as exc:
            ck.problems.append(f"corpus: {exc}")
        if clip_frames % codec.temporal_factor:
            ck.problems.append(
                f"clip.frames: must be divisible by codec.temporal_factor "
                f"({codec.temporal_factor}), got {clip_frames}"
            )
        else:
            total_latent = corpus["frames"] // codec.temporal_factor
            if capacity + clip_frames // codec.temporal_factor > total_latent:
                ck.problems.append(
                    "framepack.capacity + clip latent frames must fit inside one "
                    f"corpus sample ({total_latent} latent frames)"
                )
        if corpus["val_frames"] % codec.temporal_factor:
            ck.problems.append(
                f"corpus.val_frames: must be divisible by codec.temporal_factor, "
                f"got {corpus['val_frames']}"
            )
        if corpus["val_frames"] % clip_frames:
            ck.problems.append(
                f"corpus.val_frames: must be a multiple of clip.frames, "
                f"got {corpus['val_frames']} vs {clip_frames}"
            )
    if corpus["train_n"] < 1 or corpus["val_n"] < 1:
        ck.problems.append("corpus: train_n and val_n must be >= 1")

    ck.finish()
    return RunConfig(
        codec=codec,
        patch=patch,
        max_tokens=int(budget_d["max_tokens"]),
        schedule=schedule,
        capacity=capacity,
        model=model_cfg,
        audio_tokens_per_frame=int(audio_d["tokens_per_frame"]),
        corpus=corpus,
        clip_frames=clip_frames,
        stages=stages,
        sampler=sampler,
        sampler_seed=int(sampler_d["seed"]),
        guidance_audio=float(sampler_d["guidance_audio"]),
        guidance_text=float(sampler_d["guidance_text"]),
        train_seed=int(train_d["seed"]),
        checkpoint_every=int(train_d["checkpoint_every"]),
        eval_n_samples=int(eval_d["n_samples"]),
        eval_seed=int(eval_d["seed"]),
        paths={k: str(v) for k, v in paths_d.items()},
        raw=raw,
    )


def load_config(path: str | Path | None = None) -> RunConfig:
    """Load and validate a YAML config; falls back to AVFLOW_CONFIG, then to
    built-in defaults when no file is given."""
    if path is None:
        path = os.environ.get(ENV_CONFIG_VAR)
    if path is None:
        return build_config({})
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with open(p, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return build_config(raw)


def apply_overrides(raw: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Apply dotted-path overrides (e.g. sampler.num_steps) onto a raw dict."""
    out = dict(raw)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = out
        for part in parts[:-1]:
            nxt = dict(node.get(part, {}))
            node[part] = nxt
            node = nxt
        node[parts[-1]] = value
    return out
