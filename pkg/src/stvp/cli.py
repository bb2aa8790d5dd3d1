"""Command-line entry point.

Subcommands: gen-data (synthetic moving-shape sequences), train, eval,
predict, analyze. Exit codes: 0 success, 2 for rejected arguments or
malformed files, 3 for numeric or I/O failures at runtime.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .adversarial import Discriminator
from .autoencoder import Predictor
from .complexity import analyze_stgru_unit
from .config import RunConfig, load_run_config, save_resolved_config
from .data import export_png, generate_moving_shapes, load_manifest, \
    load_sequence, write_frames
from .errors import FormatError, NumericError, ValidationError
from .metrics import evaluate
from .trainer import SequenceDataset, Trainer, build_from_checkpoint, \
    load_checkpoint, rollout


def cmd_gen_data(args):
    if args.size % 32:
        raise ValidationError(f"--size {args.size} is not divisible by 32")
    manifest = generate_moving_shapes(
        args.out, num_sequences=args.sequences, frames=args.frames,
        height=args.size, width=args.size, num_shapes=args.shapes,
        seed=args.seed, split=args.split)
    print(f"wrote {len(manifest.entries)} sequences under {args.out}")
    return 0


def cmd_train(args):
    run_cfg = load_run_config(args.config) if args.config else RunConfig()
    manifest = load_manifest(args.data)
    if not manifest.entries:
        raise ValidationError(f"dataset at {args.data} lists no sequences")
    entry = manifest.entries[0]
    if entry.C != run_cfg.model.frame_channels:
        raise ValidationError(
            f"model.channels={run_cfg.model.frame_channels} but dataset frames "
            f"have {entry.C} channels")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_resolved_config(run_cfg, out / "config.json")

    torch.manual_seed(run_cfg.train.seed)
    model = Predictor(run_cfg.model)
    disc = None
    if run_cfg.train.gamma1 > 0 or run_cfg.train.gamma2 > 0:
        disc = Discriminator(entry.C, run_cfg.model.hidden, entry.H, entry.W,
                             depth=run_cfg.model.disc_depth)

    window = run_cfg.train.input_horizon + run_cfg.train.predict_horizon_train
    dataset = SequenceDataset(manifest, window, stride=run_cfg.data.window_stride)
    trainer = Trainer(model, run_cfg.train, disc=disc)

    def report(step, bundle):
        if step % args.log_every == 0 or step == run_cfg.train.steps:
            print(f"step {step}: total {bundle.total:.6f} mse {bundle.mse:.6f} "
                  f"gan_P {bundle.gan_P:.4f} gan_D {bundle.gan_D:.4f} "
                  f"lp {bundle.lp:.6f}")
        return False

    history = trainer.fit(dataset, run_dir=out, callback=report)
    if history:
        print(f"finished {trainer.step} steps, final total {history[-1].total:.6f}")
    else:
        print("no training steps configured; resolved config written")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    model, disc = build_from_checkpoint(ckpt)
    model.eval()
    manifest = load_manifest(args.data)
    horizon = args.horizon or ckpt.train_config.predict_horizon_test
    report = evaluate(model, manifest, ckpt.train_config.input_horizon,
                      horizon, disc=disc)
    out = Path(args.out)
    report.save_csv(out / "metrics.csv")
    for t, agg in report.per_t().items():
        print(f"t={t}: mse {agg['mse']:.6f} psnr {agg['psnr']:.3f} "
              f"ssim {agg['ssim']:.4f} feat_dist {agg['feat_dist']:.6g}")
    overall = report.overall()
    print(f"overall: mse {overall['mse']:.6f} psnr {overall['psnr']:.3f} "
          f"ssim {overall['ssim']:.4f}")
    print(f"metrics written to {out / 'metrics.csv'}")
    return 0


def cmd_predict(args):
    ckpt = load_checkpoint(args.checkpoint)
    model, _ = build_from_checkpoint(ckpt)
    model.eval()
    seq = load_sequence(args.input)
    n = ckpt.train_config.input_horizon
    if seq.frames.shape[0] < n:
        raise ValidationError(
            f"{args.input} has {seq.frames.shape[0]} frames, "
            f"need {n} for context")
    horizon = args.horizon or ckpt.train_config.predict_horizon_test
    context = torch.from_numpy(seq.frames[:n]).unsqueeze(0)
    preds = rollout(model, context, horizon)[0].clamp(0.0, 1.0).numpy()
    preds = np.ascontiguousarray(preds, dtype=np.float32)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "predicted.seq"
    write_frames(path, preds)
    print(f"wrote {horizon} predicted frames to {path}")
    if args.png:
        paths = export_png(preds, out / "png", prefix="pred")
        print(f"wrote {len(paths)} PNG frames under {out / 'png'}")
    return 0


def cmd_analyze(args):
    report = analyze_stgru_unit(channels=args.hidden, kernel=args.kernel,
                                map_size=args.map_size, bias=args.bias)
    out = Path(args.out)
    path = report.save_json(out / "complexity.json")
    print(f"recurrent cell: {args.hidden} channels, kernel {args.kernel}, "
          f"{args.map_size}x{args.map_size} feature map")
    print(f"parameters: {report.params:,}")
    print(f"conv MACs per sample: {report.macs:,} ({report.macs / 1e9:.3f} G)")
    print("assumptions:")
    for line in report.assumptions:
        print(f"  - {line}")
    print(f"report written to {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stvp", description="video prediction with stacked "
        "spatiotemporal recurrent cells")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a moving-shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=50)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--size", type=int, default=64,
                   help="frame height and width, multiple of 32")
    p.add_argument("--shapes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a generated dataset")
    p.add_argument("--config", help="run config JSON; defaults used if omitted")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score rollouts over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="roll out one sequence file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="sequence file")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--png", action="store_true", help="also export PNG frames")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("analyze", help="parameter and MAC accounting of one cell")
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--kernel", type=int, default=5)
    p.add_argument("--map-size", type=int, default=16)
    p.add_argument("--bias", action="store_true")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
