"""Command-line entry points.

Commands: make-toy-data, convert-camus, train, sample, evaluate.
Exit codes: 0 success, 1 validation error, 2 runtime failure.
Every command echoes its fully resolved configuration and a code fingerprint
into the output directory it writes.
"""

import argparse
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from . import metrics as metrics_mod
from . import report as report_mod
from .cascade import StageBundle, cascade_sample
from .config import RunConfig, code_fingerprint, load_run_config, write_run_stamp
from .diffusion import build_schedule
from .errors import (CheckpointError, ConfigurationError, ContractViolation,
                     DatasetError, EchodiffError)
from .sampling import SamplerConfig, derive_seed, sample_video, write_video_dir
from .semantics import one_hot_labels
from .training import load_checkpoint, latest_checkpoint, model_from_checkpoint, run_training


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config value")


def _resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if getattr(args, "variant", None):
        overrides.append(f"train.variant={args.variant}")
    if getattr(args, "condition_mode", None):
        overrides.append(f"train.condition_mode={args.condition_mode}")
        overrides.append(f"model.condition_mode={args.condition_mode}")
    if getattr(args, "frames", None):
        overrides.append(f"train.frames={args.frames}")
        overrides.append(f"sample.frames={args.frames}")
    if getattr(args, "data", None):
        overrides.append(f"data.root={args.data}")
    return load_run_config(args.config, overrides)


def cmd_make_toy_data(args) -> int:
    out = Path(args.out)
    root = data_mod.toy_generate(args.patients, args.frames, args.size, args.seed, out)
    (root / "toy_manifest.txt").write_text(
        f"patients={args.patients} frames={args.frames} size={args.size} "
        f"seed={args.seed}\ncode_fingerprint={code_fingerprint()}\n")
    print(f"wrote {args.patients} patients (K={args.frames}, {args.size}x{args.size}) to {root}")
    return 0


def cmd_convert_camus(args) -> int:
    n = data_mod.convert_camus(args.src, args.out, size=args.size)
    if n == 0:
        raise DatasetError(f"no convertible 2CH patients found under {args.src}")
    print(f"converted {n} patients to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    cfg.validate(require_max_steps=True)
    out_dir = Path(args.out)
    resume = None
    if args.resume:
        resume = latest_checkpoint(out_dir)
        if resume is None:
            raise ConfigurationError(f"--resume given but no checkpoint found under {out_dir}")
    write_run_stamp(cfg, out_dir)
    print(f"resolved config (T={cfg.schedule.T}, lr={cfg.train.learning_rate}, "
          f"batch={cfg.train.batch_size}, variant={cfg.train.variant}, "
          f"mode={cfg.train.condition_mode}, K={cfg.train.frames})")
    if args.dry_run:
        print("dry run: configuration valid, not training")
        return 0
    records = data_mod.load_dataset(cfg.data.root)
    if not records:
        raise DatasetError(f"no records under {cfg.data.root}")
    split = data_mod.patient_split(records, cfg.data.split_ratios, cfg.data.split_seed)
    sched = build_schedule(cfg.schedule.T, cfg.schedule.kind,
                           cfg.schedule.beta_start, cfg.schedule.beta_end)
    final = run_training(cfg.train, cfg.model, sched, records, split, out_dir,
                         resume_from=resume)
    report_mod.render_loss_curve(out_dir / "metrics.jsonl", out_dir / "loss_curve.png")
    print(f"final checkpoint: {final}")
    return 0


def _load_label_condition(path: Path):
    if not path.exists():
        raise DatasetError(f"label map file not found: {path}")
    label = np.asarray(Image.open(path), dtype=np.int64)
    return one_hot_labels(torch.from_numpy(label))


def cmd_sample(args) -> int:
    cfg = _resolve_config(args)
    if args.guidance_scale is not None:
        cfg.sample.guidance_scale = args.guidance_scale
    if args.seed is not None:
        cfg.sample.seed = args.seed
    cfg.validate()
    cond = _load_label_condition(Path(args.label_map))
    out_dir = Path(args.out)
    write_run_stamp(cfg, out_dir)
    print(f"guidance scale s={cfg.sample.guidance_scale}")

    payload = load_checkpoint(args.checkpoint)
    net, sched = model_from_checkpoint(payload)
    base_fp = payload["fingerprint"]
    sr_bits = {}
    if args.cascade:
        if not args.sr_checkpoint:
            raise ConfigurationError("--cascade requires --sr-checkpoint")
        sr_payload = load_checkpoint(args.sr_checkpoint)
        sr_net, sr_sched = model_from_checkpoint(sr_payload)
        sr_bits = {"sr_checkpoint_fingerprint": sr_payload["fingerprint"],
                   "base_checkpoint_fingerprint": base_fp,
                   "base_hw": cfg.cascade.base_hw, "target_hw": cfg.cascade.target_hw}

    for i in range(args.n):
        seed = derive_seed(cfg.sample.seed, 0, i)
        samp = SamplerConfig(guidance_scale=cfg.sample.guidance_scale,
                             clip_denoised=cfg.sample.clip_denoised,
                             seed=seed, frames=cfg.sample.frames)
        if args.cascade:
            base = StageBundle(net=net, sched=sched, sampler=samp)
            sr = StageBundle(net=sr_net, sched=sr_sched, sampler=samp)
            video = cascade_sample(cond, base, sr, cfg.cascade)
            manifest = {"stage": "cascade", **sr_bits}
        else:
            video = sample_video(cond, net, sched, samp)
            manifest = {"stage": "ddpm", "checkpoint_fingerprint": base_fp}
        manifest.update({"map_id": Path(args.label_map).stem, "seed": seed,
                         "guidance_scale": cfg.sample.guidance_scale, "T": sched.T})
        vdir = write_video_dir(video, out_dir / f"sample_{i:03d}", manifest, preview=True)
        report_mod.render_frame_strip(video, vdir / "frame_strip.png", every=4)
        print(f"wrote {vdir}")
    return 0


def _build_extractors(cfg: RunConfig):
    if cfg.metrics.extractor == "toy":
        return metrics_mod.ToyFrameExtractor(), metrics_mod.ToyVideoExtractor()
    return (metrics_mod.TorchScriptFrameExtractor(cfg.metrics.frame_backbone),
            metrics_mod.TorchScriptVideoExtractor(cfg.metrics.video_backbone))


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    if args.extractor:
        cfg.metrics.extractor = args.extractor
    if args.n_per_map:
        cfg.metrics.n_per_map = args.n_per_map
    cfg.validate()
    out_dir = Path(args.out)
    write_run_stamp(cfg, out_dir)

    records = data_mod.load_dataset(cfg.data.root)
    if not records:
        raise DatasetError(f"no records under {cfg.data.root}")
    split = data_mod.patient_split(records, cfg.data.split_ratios, cfg.data.split_seed)
    by_id = {r.patient_id: r for r in records}
    test_records = [by_id[pid] for pid in split.test]

    payload = load_checkpoint(args.checkpoint)
    net, sched = model_from_checkpoint(payload)
    k = cfg.sample.frames
    conditions = [(r.patient_id, data_mod.record_condition(r)) for r in test_records]
    real_videos = {r.patient_id: data_mod.resample_frames(r, k) for r in test_records}
    frame_ex, video_ex = _build_extractors(cfg)

    report, generated = metrics_mod.evaluate_suite(
        net, sched, conditions, real_videos,
        n_per_map=cfg.metrics.n_per_map, sampler_cfg=cfg.sample,
        frame_extractor=frame_ex, video_extractor=video_ex,
        config_fingerprint=cfg.fingerprint(),
        condition_mode=payload["net_config"].get("condition_mode", "spade"),
        model_name="DDPM")
    (out_dir / "report.json").write_text(report.to_json())
    report_mod.save_metrics_tsv(report, out_dir / "table.tsv")
    report_mod.render_metrics_figure(report, out_dir / "metrics.png")
    if generated:
        report_mod.render_frame_strip(generated[0][1], out_dir / "example_frames.png", every=4)
    table = metrics_mod.report_table(report)
    print(table)
    if not report.is_finite():
        print("error: non-finite metric values", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echodiff",
        description="Semantic-map-conditioned diffusion for echocardiography video synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data", help="generate a synthetic desk-scale dataset")
    p.add_argument("--patients", type=int, default=10)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_toy_data)

    p = sub.add_parser("convert-camus", help="convert a CAMUS mhd/raw export")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=cmd_convert_camus)

    p = sub.add_parser("train", help="train a diffusion model")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="dataset root (overrides data.root)")
    p.add_argument("--variant", choices=["ddpm", "cascade_base", "cascade_sr"], default=None)
    p.add_argument("--condition-mode", choices=["spade", "concat"], default=None)
    p.add_argument("--frames", type=int, choices=[16, 24], default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample videos from a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label-map", required=True, help="ED label image with class ids 0..3")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--guidance-scale", type=float, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--cascade", action="store_true")
    p.add_argument("--sr-checkpoint", default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="run the FID/FVD/SSIM evaluation suite")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--extractor", choices=["toy", "standard"], default=None)
    p.add_argument("--n-per-map", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ContractViolation, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EchodiffError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
