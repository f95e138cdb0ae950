"""Command-line entry point: synth, train, generate, eval, pack-audit.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
Failures print a single machine-parsable line to stderr. Every command echoes
the effective config (file + flag overrides) into its output directory.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from . import engine, plotting
from .checkpoint import load_model
from .codec import PixelVideo
from .config import RunConfig, apply_overrides, build_config, load_config
from .errors import ConfigError, DataError, NumericError
from .flow import SamplerConfig
from .storage import load_tensor, load_wave, read_jsonl, save_tensor, write_json
from .audio import AudioWave
from .synth import Script, make_corpus
from .tokens import compute_token_count, fit_to_budget
from .framepack import token_count as pack_token_count

_FIG_METADATA = {"Software": "avflow"}


def _fail(code: int, klass: str, exc: BaseException) -> int:
    msg = " ".join(str(exc).split())
    print(f"AVFLOW_ERROR class={klass} msg={msg}", file=sys.stderr)
    return code


def _load_cfg(args: argparse.Namespace, overrides: dict[str, Any]) -> RunConfig:
    cfg = load_config(args.config)
    if overrides:
        return build_config(apply_overrides(cfg.raw, overrides))
    return cfg


def _echo(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.echo(out_dir / "config_echo.yaml")


def _resolution(text: str) -> tuple[int, int, int]:
    try:
        f, h, w = (int(v) for v in text.lower().split("x"))
        return f, h, w
    except Exception as exc:
        raise ConfigError(f"bad resolution {text!r}, expected FxHxW") from exc


def _parse_script(text: str) -> Script:
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ConfigError(f"bad script {text!r}, expected direction:speed[:style]")
    style = int(parts[2]) if len(parts) == 3 else 0
    return Script(parts[0], int(parts[1]), style)


def _load_ref_image(path: str, fps: int) -> PixelVideo:
    p = Path(path)
    if not p.exists():
        raise DataError(f"reference image not found: {p}")
    if p.suffix == ".avt":
        arr, _ = load_tensor(p)
        if arr.ndim == 4:
            arr = arr[:1]
        else:
            arr = arr[None]
        return PixelVideo(arr.astype(np.float32), fps=fps)
    img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32)
    return PixelVideo((img / 127.5 - 1.0)[None], fps=fps)


def _write_frames(video: PixelVideo, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    data = np.clip((video.data + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    for k in range(video.frames):
        Image.fromarray(data[k]).save(out_dir / f"frame_{k:05d}.png")


def _default_checkpoint(cfg: RunConfig) -> Path:
    return Path(cfg.paths["train_dir"]) / f"stage{len(cfg.stages)}.ckpt"


def cmd_synth(args: argparse.Namespace) -> int:
    overrides: dict[str, Any] = {}
    if args.n is not None:
        overrides["corpus.train_n"] = args.n
    cfg = _load_cfg(args, overrides)
    out = Path(args.out or cfg.paths["corpus_dir"])
    _echo(cfg, out)
    c = cfg.corpus
    val_speeds = tuple(range(1, c["val_max_speed"] + 1))
    plans = (
        ("train", c["train_n"], c["frames"], (1, 2, 3)),
        ("val", c["val_n"], c["val_frames"], val_speeds),
    )
    for split, n, frames, speeds in plans:
        manifest = make_corpus(
            n, c["seed"], split, out,
            frames=frames, size=c["height"], fps=c["fps"], speeds=speeds,
        )
        print(f"wrote {len(manifest)} {split} samples under {out / split}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args, {})
    workdir = Path(args.out or cfg.paths["train_dir"])
    corpus_dir = Path(args.corpus or cfg.paths["corpus_dir"])
    _echo(cfg, workdir)
    summary = engine.run_stages(cfg, corpus_dir, workdir, resume=args.resume)
    records = list(read_jsonl(summary["loss_log"]))
    plotting.plot_loss_curve(records, workdir / "loss_curve.png")
    write_json(workdir / "train_summary.json", summary)
    for st in summary["stages"]:
        print(f"stage {st['name']}: mean loss {st['mean_loss']:.6f}")
    print(f"checkpoints: {', '.join(summary['checkpoints'])}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    overrides: dict[str, Any] = {}
    if args.steps is not None:
        overrides["sampler.num_steps"] = args.steps
    if args.seed is not None:
        overrides["sampler.seed"] = args.seed
    cfg = _load_cfg(args, overrides)
    out = Path(args.out)
    _echo(cfg, out)

    ckpt_path = Path(args.checkpoint) if args.checkpoint else _default_checkpoint(cfg)
    if not ckpt_path.exists():
        raise DataError(f"checkpoint not found: {ckpt_path}")
    model, _ = load_model(ckpt_path, expected_cfg=cfg.model)

    fps = cfg.corpus["fps"]
    ref = _load_ref_image(args.ref, fps)
    samples, rate = load_wave(args.audio)
    wave = AudioWave(samples, rate)
    script = _parse_script(args.script)
    sampler = SamplerConfig(num_steps=cfg.sampler.num_steps)

    video, report = engine.generate_long(
        model, ref, wave, script, args.clips, sampler, cfg, cfg.sampler_seed
    )
    save_tensor(out / "video.avt", video.data, meta={"fps": fps})
    _write_frames(video, out / "frames")
    write_json(
        out / "continuity.json",
        {
            "boundary_jump": report.boundary_jump,
            "direction_agreement": report.direction_agreement,
            "within_clip_jump": report.within_clip_jump,
            "per_boundary": report.per_boundary,
        },
    )
    if report.per_boundary:
        plotting.plot_boundary_diagnostics(report.per_boundary, out / "continuity.png")
    print(f"generated {video.frames} frames -> {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args, {})
    out = Path(args.out)
    _echo(cfg, out)
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    split = manifest_path.parent.name
    corpus_dir = manifest_path.parent.parent

    ckpt_path = Path(args.checkpoint) if args.checkpoint else _default_checkpoint(cfg)
    if not ckpt_path.exists():
        raise DataError(f"checkpoint not found: {ckpt_path}")
    model, _ = load_model(ckpt_path, expected_cfg=cfg.model)

    report = engine.evaluate_model(model, cfg, corpus_dir, split=split)
    report.save(out / "report.json")
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=[
                "id", "sync", "sync_flagged", "identity_drift",
                "boundary_jump", "direction", "speed",
            ],
        )
        writer.writeheader()
        writer.writerows(report.per_sample)
    with open(out / "summary.txt", "w", encoding="utf-8") as fh:
        fh.write(report.summary_table())
    plotting.plot_eval_report(report.per_sample, out / "eval_report.png")
    print(report.summary_table(), end="")
    return 0


def cmd_pack_audit(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args, {})
    out = Path(args.out)
    _echo(cfg, out)
    rows = []
    for text in args.resolutions.split(","):
        F, H, W = _resolution(text.strip())
        plan = fit_to_budget(F, H, W, cfg.max_tokens, cfg.codec, cfg.patch)
        try:
            raw_tokens = compute_token_count(F, H, W, cfg.codec, cfg.patch)
        except ValueError:
            raw_tokens = None
        oh, ow = plan.output_size()
        rows.append(
            {
                "resolution": f"{F}x{H}x{W}",
                "raw_tokens": raw_tokens if raw_tokens is not None else -1,
                "budget": cfg.max_tokens,
                "plan": "identity" if plan.identity and raw_tokens == plan.resulting_tokens
                else f"resize {plan.target_height}x{plan.target_width} crop {oh}x{ow}",
                "resulting_tokens": plan.resulting_tokens,
            }
        )
    header = f"{'resolution':>14} {'raw':>7} {'budget':>7} {'tokens':>7}  plan"
    print(header)
    for r in rows:
        print(
            f"{r['resolution']:>14} {r['raw_tokens']:>7} {r['budget']:>7} "
            f"{r['resulting_tokens']:>7}  {r['resulting_tokens']} <= {r['budget']}: {r['plan']}"
        )
    with open(out / "pack_audit.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    plotting.plot_pack_audit(rows, out / "pack_audit.png")

    grid = cfg.latent_grid
    level_rows = []
    for n_frames in range(0, cfg.capacity + 1):
        level_rows.append(
            {
                "history_frames": n_frames,
                "motion_tokens": pack_token_count(cfg.schedule, n_frames, grid),
            }
        )
    print(f"\nmotion history token table (grid {grid[0]}x{grid[1]}):")
    for r in level_rows:
        print(f"  {r['history_frames']:>2} frames -> {r['motion_tokens']:>5} tokens")
    with open(out / "framepack_levels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["history_frames", "motion_tokens"])
        writer.writeheader()
        writer.writerows(level_rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avflow",
        description="Audio-driven latent video generation testbed",
    )
    parser.add_argument("--config", default=None, help="YAML config path (or $AVFLOW_CONFIG)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--n", type=int, default=None, help="override corpus.train_n")
    p.add_argument("--out", default=None, help="corpus output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the staged training loop")
    p.add_argument("--resume", action="store_true", help="resume from latest.ckpt")
    p.add_argument("--out", default=None, help="training output directory")
    p.add_argument("--corpus", default=None, help="corpus directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate a (long) video from a checkpoint")
    p.add_argument("--ref", required=True, help="reference image (.png or .avt)")
    p.add_argument("--audio", required=True, help="driving audio (.wav)")
    p.add_argument("--script", required=True, help="direction:speed[:style]")
    p.add_argument("--clips", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="override sampler.seed")
    p.add_argument("--steps", type=int, default=None, help="override sampler.num_steps")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", required=True, help="path to <corpus>/<split>/manifest.jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pack-audit", help="token budget and history packing tables")
    p.add_argument("--resolutions", required=True, help="comma-separated FxHxW list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack_audit)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(2, "config", exc)
    except NumericError as exc:
        return _fail(4, "numeric", exc)
    except (DataError, FileNotFoundError, OSError) as exc:
        return _fail(3, "data", exc)
    except ValueError as exc:
        return _fail(3, "data", exc)


if __name__ == "__main__":
    sys.exit(main())
