"""Command-line surface.

One binary, one shared config path: `--config file.json` plus `--set
key=value` overrides that mirror config keys (values parsed as JSON where
possible). Unknown keys fail loudly. Failures exit nonzero and print a
machine-readable JSON error object to stderr.

Commands: gen-data, train-codec, train-fst, encode, decode, eval, bdrate,
ablate, diag.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

from . import pipeline
from .config import ExperimentConfig, config_from_dict, load_config
from .errors import ConfigError, VfcError
from .evaluate import RateTaskCurve, bd_rate


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig.toy()
    if args.set:
        merged = cfg.to_dict()
        for item in args.set:
            key, value = _parse_override(item)
            if key not in merged:
                raise ConfigError(f"unknown config key {key!r} in --set")
            merged[key] = value
        cfg = config_from_dict(merged)
    return cfg


def _read_curve(path: str) -> RateTaskCurve:
    points = []
    model_id = "curve"
    with open(path) as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            model_id = row.get("model_id", model_id)
            points.append((float(row["bpp"]), float(row["score"])))
    if not points:
        raise ConfigError(f"curve file {path} holds no points")
    return RateTaskCurve(model_id=model_id, points=points)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vfcodec",
        description="Desk-scale video feature codec with per-task feature transforms")
    parser.add_argument("--config", help="JSON config file (defaults to the toy preset)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (JSON-parsed value)")
    parser.add_argument("--out-root", help="output root (overrides config/VFCODEC_OUT_ROOT)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate datasets and the frozen toy networks")

    p = sub.add_parser("train-codec", help="train the feature codec at one rate point")
    p.add_argument("--lambda-rate", type=float, required=True)
    p.add_argument("--variant", default="full")
    p.add_argument("--reuse", action="store_true")

    p = sub.add_parser("train-fst", help="train a feature space transform")
    p.add_argument("--variant", default="full")
    p.add_argument("--reuse", action="store_true")

    p = sub.add_parser("encode", help="encode one sequence directory to a bitstream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-recon")

    p = sub.add_parser("decode", help="decode a bitstream to reconstructed features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="rate-task curves for a trained variant")
    p.add_argument("--variant", default="full")

    p = sub.add_parser("bdrate", help="BD-rate between two curve CSVs")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    p.add_argument("--variants", nargs="*", default=list(pipeline.ALL_ABLATIONS))
    p.add_argument("--reuse", action="store_true")

    p = sub.add_parser("diag", help="diagnostic dumps for a trained variant")
    p.add_argument("--variant", default="full")
    p.add_argument("--sequence")
    return parser


def run(args) -> int:
    cfg = resolve_config(args)
    root = pipeline.out_root(cfg, args.out_root)

    if args.command == "gen-data":
        made = pipeline.gen_data(cfg, root)
        print(json.dumps({"train": len(made["train"]),
                          "test_seeds": sorted(made["test"])}))
        return 0

    if args.command == "train-codec":
        world = pipeline.get_world(cfg, root)
        path = pipeline.stage_train_codec(cfg, root, world, args.lambda_rate,
                                          args.variant, reuse=args.reuse)
        print(json.dumps({"checkpoint": path}))
        return 0

    if args.command == "train-fst":
        world = pipeline.get_world(cfg, root)
        path = pipeline.stage_train_fst(cfg, root, world, args.variant, reuse=args.reuse)
        print(json.dumps({"fst": path}))
        return 0

    if args.command == "encode":
        world = pipeline.get_world(cfg, root)
        info = pipeline.encode_command(cfg, root, world, args.checkpoint,
                                       args.sequence, args.out, args.dump_recon)
        print(json.dumps(info))
        return 0

    if args.command == "decode":
        world = pipeline.get_world(cfg, root)
        info = pipeline.decode_command(cfg, root, world, args.checkpoint,
                                       args.stream, args.out)
        print(json.dumps(info))
        return 0

    if args.command == "eval":
        world = pipeline.get_world(cfg, root)
        pooled, per_seed = pipeline.build_curves(cfg, root, world, args.variant)
        print(json.dumps({"variant": args.variant, "points": pooled.points}))
        return 0

    if args.command == "bdrate":
        value = bd_rate(_read_curve(args.anchor), _read_curve(args.test))
        print(json.dumps({"bd_rate_percent": value}))
        return 0

    if args.command == "ablate":
        world = pipeline.get_world(cfg, root)
        rows = pipeline.run_ablation(cfg, root, world, tuple(args.variants),
                                     reuse=args.reuse)
        print(json.dumps({"rows": [[n, b] for n, b, _ in rows]}))
        return 0

    if args.command == "diag":
        world = pipeline.get_world(cfg, root)
        info = pipeline.run_diagnostics(cfg, root, world, args.variant, args.sequence)
        print(json.dumps({"frames": len(info["cascade"])}))
        return 0

    raise ConfigError(f"unhandled command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except VfcError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    except OSError as exc:
        json.dump({"error": "OSError", "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
