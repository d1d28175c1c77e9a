"""Command-line entry points wiring all modules into reproducible runs.

Subcommands: synth, mine, tune, segment, eval, oracle. Every run writes a
manifest.json into its output directory echoing the fully resolved
configuration, and all randomness flows from one --seed (or the OVSEG_SEED
environment variable when the flag is omitted). Exit codes: 0 success,
2 configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__, mining, pipeline, synth, tuning
from .dataset import SegmentationDataset
from .encoder import EncoderConfig, EncoderState, init_weights, load_state, save_state

DEFAULT_SEED = 0

CLI_MODES = {
    "mpt": "mpt",
    "ft": "ft",
    "ft-then-mpt": "ft_then_mpt",
    "mpt-then-ft": "mpt_then_ft",
    "simul": "ft_plus_mpt",
}


class CliError(Exception):
    """Configuration problem: bad flag combination or missing input."""


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("OVSEG_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise CliError(f"OVSEG_SEED must be an integer, got {env!r}") from exc
    return DEFAULT_SEED


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} directory not found: {p}")
    return p


def _write_manifest(out_dir, payload: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_or_init_state(checkpoint, seed: int) -> EncoderState:
    if checkpoint is not None:
        root = _require_dir(checkpoint, "checkpoint")
        return load_state(root)
    config = EncoderConfig()
    return EncoderState(config, init_weights(config, seed))


def cmd_synth(args) -> int:
    seed = _resolve_seed(args)
    config = synth.SynthConfig(
        count=args.count, image_size=args.image_size, num_classes=args.classes,
        min_shapes=args.min_shapes, max_shapes=args.max_shapes,
        proposal_jitter=args.jitter, clutter=args.clutter,
        captions_per_image=args.captions_per_image,
        with_embeddings=not args.no_embeddings,
        embedding_noise=args.embedding_noise, seed=seed)
    manifest = synth.generate(args.out, config)
    _write_manifest(args.out, {"command": "synth", "seed": seed, "jobs": args.jobs,
                               "config": manifest})
    print(f"wrote {config.count} scenes to {args.out}")
    return 0


def cmd_mine(args) -> int:
    seed = _resolve_seed(args)
    dataset = SegmentationDataset(_require_dir(args.dataset, "dataset"))
    state = _load_or_init_state(args.checkpoint, seed)
    _, stats = mining.mine_dataset(
        dataset, state, out_dir=args.out,
        captions_per_image=args.captions_per_image,
        use_gt_masks=args.use_gt_masks, use_gt_classes=args.use_gt_classes,
        min_score=args.min_score, jobs=args.jobs)
    _write_manifest(args.out, {
        "command": "mine", "seed": seed, "jobs": args.jobs,
        "dataset": str(args.dataset), "checkpoint": args.checkpoint,
        "captions_per_image": args.captions_per_image,
        "use_gt_masks": args.use_gt_masks, "use_gt_classes": args.use_gt_classes,
        "min_score": args.min_score, "stats": stats})
    print(f"mined {stats['pairs']} pairs ({stats['unique_nouns']} unique nouns)"
          f" -> {args.out}")
    return 0


def cmd_tune(args) -> int:
    seed = _resolve_seed(args)
    dataset = SegmentationDataset(_require_dir(args.dataset, "dataset"))
    pairs_dir = _require_dir(args.pairs, "pairs")
    pairs_path = pairs_dir / "pairs.jsonl"
    if not pairs_path.is_file():
        raise CliError(f"no pairs.jsonl in {pairs_dir}")
    stats_path = pairs_dir / "stats.json"
    mask_source = "proposals"
    if stats_path.is_file():
        stats = json.loads(stats_path.read_text(encoding="utf-8"))
        mask_source = stats.get("mask_source", "proposals")

    mode = CLI_MODES[args.mode]
    overrides = {"mode": mode, "seed": seed}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.tau is not None:
        overrides["tau"] = args.tau
    if args.prompt_depth is not None:
        overrides["prompt_depth"] = args.prompt_depth
    config = tuning.make_config(args.preset, **overrides)

    init_state = None
    encoder_config = None
    if args.init is not None:
        init_state = load_state(_require_dir(args.init, "initial checkpoint"))
    else:
        encoder_config = EncoderConfig()

    mined = mining.load_pairs_jsonl(pairs_path)
    if not mined:
        raise CliError(f"pairs file is empty: {pairs_path}")
    enc_cfg = init_state.config if init_state is not None else encoder_config
    crop_pairs = mining.build_crop_pairs(dataset, mined, enc_cfg.image_size,
                                         enc_cfg.patch_size, mask_source=mask_source)

    out = Path(args.out)
    result = tuning.train(crop_pairs, config, encoder_config=encoder_config,
                          init_state=init_state, log_path=out / "metrics.jsonl")
    save_state(out / "checkpoint", result.state)
    _write_manifest(out, {
        "command": "tune", "seed": seed, "jobs": args.jobs,
        "dataset": str(args.dataset), "pairs": str(args.pairs),
        "mask_source": mask_source, "preset": args.preset, "mode": args.mode,
        "train": {"mode": config.mode, "epochs": config.epochs,
                  "batch_size": config.batch_size, "tau": config.tau,
                  "mpt_lr": config.mpt_lr, "mpt_weight_decay": config.mpt_weight_decay,
                  "ft_lr": config.ft_lr, "ft_weight_decay": config.ft_weight_decay,
                  "schedule": config.schedule, "prompt_depth": config.prompt_depth},
        "encoder": result.state.config.to_dict(),
        "final": result.metrics[-1] if result.metrics else None})
    last = result.metrics[-1] if result.metrics else {}
    print(f"tuned mode={args.mode} top1={last.get('top1', float('nan')):.3f}"
          f" -> {out / 'checkpoint'}")
    return 0


def cmd_segment(args) -> int:
    seed = _resolve_seed(args)
    dataset = _require_dir(args.dataset, "dataset")
    state = _load_or_init_state(args.checkpoint, seed)
    info = pipeline.segment_dataset(dataset, state, args.ensemble_lambda, args.out,
                                    tau=args.tau, keep_background=args.keep_background,
                                    jobs=args.jobs)
    _write_manifest(args.out, {
        "command": "segment", "seed": seed, "jobs": args.jobs,
        "dataset": str(args.dataset), "checkpoint": args.checkpoint, **info})
    print(f"segmented {info['images']} images (lambda={info['lambda']}) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    seed = _resolve_seed(args)
    dataset = _require_dir(args.dataset, "dataset")
    pred = _require_dir(args.pred, "prediction")
    seen_names = None
    if args.seen_list is not None:
        seen_path = Path(args.seen_list)
        if not seen_path.is_file():
            raise CliError(f"seen-list file not found: {seen_path}")
        seen_names = [line.strip() for line in
                      seen_path.read_text(encoding="utf-8").splitlines() if line.strip()]
    report = pipeline.evaluate_predictions(dataset, pred, seen_names=seen_names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, {"command": "eval", "seed": seed, "jobs": args.jobs,
                          "dataset": str(args.dataset), "pred": str(args.pred),
                          "seen_list": args.seen_list, "miou": report.miou})
    print(f"mIoU {report.miou:.4f} (seen {report.seen_miou}, unseen {report.unseen_miou})")
    return 0


def cmd_oracle(args) -> int:
    seed = _resolve_seed(args)
    dataset = _require_dir(args.dataset, "dataset")
    if args.which == "mask":
        state = _load_or_init_state(args.checkpoint, seed)
        report = pipeline.oracle_mask_analysis(dataset, state, jobs=args.jobs)
    else:
        report = pipeline.oracle_class_analysis(dataset, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, {"command": "oracle", "which": args.which, "seed": seed,
                          "jobs": args.jobs, "dataset": str(args.dataset),
                          "checkpoint": args.checkpoint, "miou": report.miou})
    print(f"oracle-{args.which} mIoU {report.miou:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovseg",
        description="Desk-scale open-vocabulary segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"ovseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="root seed for all randomness (default: $OVSEG_SEED or 0)")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker threads for per-image stages (default: 1)")
        p.add_argument("--out", required=True, help="output directory")
        p.formatter_class = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic shapes dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--count", type=int, default=100, help="number of scenes")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--classes", type=int, default=8,
                   help=f"shape classes to use (max {len(synth.SHAPE_NAMES)})")
    p.add_argument("--min-shapes", type=int, default=1)
    p.add_argument("--max-shapes", type=int, default=3)
    p.add_argument("--jitter", type=int, default=0,
                   help="proposal mask shift in pixels (0: proposals equal GT)")
    p.add_argument("--clutter", type=int, default=0,
                   help="distractor blobs per backdrop")
    p.add_argument("--captions-per-image", type=int, default=1)
    p.add_argument("--no-embeddings", action="store_true",
                   help="omit synthetic proposal embeddings (forces lambda=1 downstream)")
    p.add_argument("--embedding-noise", type=float, default=0.3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mine", help="mine mask-category pairs",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="encoder checkpoint for matching (default: fresh baseline)")
    p.add_argument("--captions-per-image", type=int, default=1)
    p.add_argument("--use-gt-masks", action="store_true")
    p.add_argument("--use-gt-classes", action="store_true")
    p.add_argument("--min-score", type=float, default=None,
                   help="drop pairs below this similarity (default: keep all)")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("tune", help="finetune the encoder on mined pairs",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--pairs", required=True, help="mine output directory")
    p.add_argument("--mode", choices=sorted(CLI_MODES), default="mpt")
    p.add_argument("--preset", choices=sorted(tuning.PRESETS), default="desk")
    p.add_argument("--prompt-depth", type=int, default=None,
                   help="prompted layer count (default: encoder config)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("segment", help="two-stage inference over a dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--lambda", dest="ensemble_lambda", type=float, default=0.7,
                   help="ensemble weight between branches")
    p.add_argument("--tau", type=float, default=None,
                   help="softmax temperature (default: encoder config)")
    p.add_argument("--keep-background", action="store_true",
                   help="crop without masking out background pixels")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score predictions against ground truth",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--pred", required=True, help="segment output directory")
    p.add_argument("--seen-list", default=None,
                   help="file with one seen class name per line (default: vocab flags)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="bottleneck analyses with oracle components",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--which", choices=("mask", "class"), required=True,
                   help="mask: GT masks + encoder; class: proposals + GT labels")
    p.add_argument("--checkpoint", default=None,
                   help="encoder checkpoint for --which mask")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
