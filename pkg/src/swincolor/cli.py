"""Command-line entry point: train, colorize, evaluate, selftest.

Exit codes follow the usual scripting contract: 0 on success, 1 on a runtime
failure (unreadable checkpoint, diverged run, I/O error), 2 on a usage or
configuration error (unknown key, bad value, missing data directory).

Every training-configuration field is exposed as a ``--<field>`` flag on the
subcommands that build a config; flag values override the ``--config`` file,
which overrides profile and built-in defaults.
"""

import argparse
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import colorspace, config, pipeline, selftest


def _add_config_flags(parser):
    parser.add_argument("--config", metavar="FILE", default=None,
                        help="key=value config file (fields named after TrainConfig)")
    parser.add_argument("--profile", choices=tuple(config.PROFILES), default=None,
                        help="named preset applied before file/flag overrides")
    group = parser.add_argument_group("config overrides (win over --config values)")
    for name, kind in config.field_types().items():
        kind_name = kind if isinstance(kind, str) else kind.__name__
        group.add_argument(f"--{name}", metavar=kind_name.upper(), default=None,
                           help=f"override {name}")


def _config_from_args(args):
    """Fold defaults <- profile <- config file <- flags into a TrainConfig."""
    file_map = config.parse_config_file(args.config) if args.config else None
    flag_map = {
        name: value
        for name in config.field_types()
        if (value := getattr(args, name)) is not None
    }
    if args.profile is not None:
        flag_map["profile"] = args.profile
    return config.build_config(file_map, flag_map)


def cmd_train(args):
    data_dir = Path(args.data_dir)
    if not data_dir.is_dir():
        print(f"error: data directory not found: {data_dir}", file=sys.stderr)
        return 2
    cfg = _config_from_args(args)
    final_path, _ = pipeline.train(cfg, data_dir, args.out_dir, resume=args.resume)
    print(f"training finished; final checkpoint: {final_path}")
    return 0


def cmd_colorize(args):
    generator, backbone, stored = pipeline.load_generator(args.checkpoint)
    source = colorspace.read_png(args.input)
    result = pipeline.colorize_image(generator, backbone, stored, source, args.seed)
    colorspace.write_png(result, args.output)
    print(f"wrote {args.output} ({result.width}x{result.height})")
    return 0


def cmd_evaluate(args):
    manifest = ckpt.load_manifest(args.checkpoint)
    if "config" not in manifest:
        raise ckpt.CheckpointError("checkpoint is missing its 'config' record")
    file_map = config.parse_config_file(args.config) if args.config else None
    flag_map = {
        name: value
        for name in config.field_types()
        if (value := getattr(args, name)) is not None
    }
    if args.profile is not None:
        flag_map["profile"] = args.profile
    cfg = config.build_config(manifest["config"], file_map, flag_map)

    dataset = pipeline.load_dataset(args.data_dir, args.split, cfg)
    report = pipeline.evaluate(args.checkpoint, dataset, cfg)

    report_dir = Path(args.report_dir) if args.report_dir else Path(args.checkpoint).parent
    report_dir.mkdir(parents=True, exist_ok=True)
    csv_path = report_dir / "metrics.csv"
    json_path = report_dir / "metrics.json"
    report.write_csv(csv_path)
    report.write_json(json_path, delta_mode=args.delta_mode)
    for name, value in report.means(delta_mode=args.delta_mode).items():
        print(f"{name}: {value}")
    print(f"wrote {csv_path} and {json_path} ({len(report.rows)} images)")
    return 0


def cmd_selftest(args):
    return selftest.run(inject_fault=args.inject_fault)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="swincolor",
        description="Train, run, and verify the swin-bottleneck image colorizer.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_train = sub.add_parser("train", help="train a colorizer on a directory of images")
    p_train.add_argument("data_dir", help="image directory (a VOC layout is auto-detected)")
    p_train.add_argument("out_dir", help="destination for checkpoints and the loss log")
    p_train.add_argument("--resume", metavar="CKPT", default=None,
                         help="continue a run from this checkpoint")
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_col = sub.add_parser("colorize", help="colorize one grayscale-or-color PNG")
    p_col.add_argument("checkpoint", help="trained checkpoint file")
    p_col.add_argument("input", help="source PNG (its lightness plane is used)")
    p_col.add_argument("output", help="destination PNG, written at the source dimensions")
    p_col.add_argument("--seed", type=int, default=0,
                       help="noise seed; different seeds give different colorizations")
    p_col.set_defaults(func=cmd_colorize)

    p_eval = sub.add_parser("evaluate", help="score a checkpoint against held-out images")
    p_eval.add_argument("checkpoint", help="trained checkpoint file")
    p_eval.add_argument("data_dir", help="image directory to draw the evaluation split from")
    p_eval.add_argument("--split", choices=("test", "train", "all"), default="test",
                        help="which split of data_dir to score (default: test)")
    p_eval.add_argument("--report-dir", dest="report_dir", metavar="DIR", default=None,
                        help="where metrics.csv/metrics.json go (default: checkpoint's directory)")
    p_eval.add_argument("--delta-mode", dest="delta_mode",
                        choices=("per_image", "corpus"), default="per_image",
                        help="colorfulness-delta aggregation for the summary")
    _add_config_flags(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    p_self = sub.add_parser("selftest", help="run the fast invariant suite")
    p_self.add_argument("--inject-fault", action="store_true",
                        help="corrupt the conv backward pass to prove the suite catches it")
    p_self.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits itself: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except pipeline.DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (ckpt.CheckpointError, pipeline.TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
