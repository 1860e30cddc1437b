"""Command line entry point.

    llmser <stage> --config FILE [--set key=value]...
    llmser run     --config FILE [--no-arv ...]
    llmser sweep   --config FILE --param dct.beta --values 0.1,0.3,0.5
    llmser synth   --out DIR [--seed N]

Exit codes: 0 success, 1 stage failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, dump_config, load_config, parse_override
from .pipeline import STAGES, StageError, format_comparison, run_pipeline, run_stage, run_sweep

ABLATIONS = ("no-ccg", "no-snf", "no-arv", "no-rcs", "no-reason", "no-wd")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML or JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value (dotted key), repeatable")
    for flag in ABLATIONS:
        p.add_argument(f"--{flag}", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="llmser", description="LLM-guided sequence augmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _common(p)
        if stage in ("train", "evaluate"):
            p.add_argument("--mode", choices=("none", "llmser"))
    _common(sub.add_parser("run", help="all stages for baseline and LLMSeR, plus a comparison"))
    p = sub.add_parser("sweep", help="rerun the pipeline over values of one config key")
    _common(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma separated")
    p = sub.add_parser("synth", help="write a synthetic corpus and a config that uses it")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", type=int, default=200)
    return parser


def _config(args):
    overrides = list(args.overrides)
    for flag in ABLATIONS:
        if getattr(args, flag.replace("-", "_")):
            overrides.append(f"ablation.{flag.replace('-', '_')}=true")
    if getattr(args, "mode", None):
        overrides.append(f"mode={args.mode}")
    return load_config(args.config, overrides)


def _synth(args) -> int:
    from .synthetic import SyntheticConfig, generate_world

    out = Path(args.out)
    world = generate_world(SyntheticConfig(n_users=args.users, seed=args.seed))
    world.write(out / "data")
    doc = {
        "data": {"interactions": "data/interactions.jsonl", "items": "data/items.jsonl"},
        "backbone": {"epochs": 100, "learning_rate": 0.003, "embedding_dim": 32, "dropout": 0.2},
        "sia": {"pool_size": 20, "num_pseudo": 5},
        "arv": {"reason_pool_size": 10},
        "llm": {"provider": "mock-oracle", "truth_path": "data/world.json"},
        "seed": args.seed,
        "output_dir": str(out / "run"),
    }
    import yaml

    (out / "config.yaml").write_text(yaml.safe_dump(doc, sort_keys=False))
    print(f"wrote {out / 'data'} and {out / 'config.yaml'}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth":
        return _synth(args)
    try:
        cfg = _config(args)
        if args.command == "sweep":
            values = [parse_override(f"v={v}")[1] for v in args.values.split(",")]
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "run":
            Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
            dump_config(cfg, Path(cfg.output_dir) / "config.resolved.yaml")
            baseline, llmser = run_pipeline(cfg)
            print(format_comparison(baseline, llmser))
        elif args.command == "sweep":
            print(run_sweep(cfg, args.param, values))
        else:
            for name, path in run_stage(args.command, cfg).items():
                print(f"{name}: {path}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        where = f" (manifest: {exc.manifest})" if exc.manifest else ""
        print(f"stage failed: {exc}{where}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"stage failed: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
