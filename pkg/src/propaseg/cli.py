"""Command line entry points: simulate, ablate-decoder, prepare-demo, serve."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .harness import ExperimentConfig, run_decoder_ablation, run_experiment


def _load_experiment_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        return ExperimentConfig.from_json(json.load(fh))


def cmd_simulate(args) -> int:
    cfg = _load_experiment_config(args.config)
    summary = run_experiment(cfg, args.out)
    print(f"wrote {args.out}/aggregate.csv ({len(summary['rows'])} rows)")
    for failure in summary["folds_failed"]:
        print(f"fold {failure['fold']} FAILED: {failure['error']}", file=sys.stderr)
    return 1 if summary["folds_failed"] else 0


def cmd_ablate(args) -> int:
    cfg = _load_experiment_config(args.config)
    levels = tuple(int(x) for x in args.levels.split(","))
    cfg = ExperimentConfig.from_json({**cfg.to_json(), "tap_levels": list(levels)})
    summary = run_decoder_ablation(cfg, args.out)
    for level in sorted(summary["levels"], key=int):
        r = summary["levels"][level]
        print(f"tap level {level}: DSC {r['mean']:.4f} +- {r['std']:.4f} ({r['folds']} folds)")
    return 1 if summary["failed"] else 0


def cmd_prepare_demo(args) -> int:
    from .demo import prepare_demo

    paths = prepare_demo(args.out, seed=args.seed, dims=tuple(args.dims))
    print(json.dumps(paths, indent=2))
    return 0


def cmd_serve(args) -> int:
    import dataclasses

    import uvicorn

    from .service import create_app, load_service_config

    cfg = load_service_config(args.config)
    overrides = {}
    if args.port is not None:
        overrides["port"] = args.port
    if args.model_dir is not None:
        overrides["model_dir"] = args.model_dir
    if args.store_dir is not None:
        overrides["store_dir"] = args.store_dir
    if args.ui_dir is not None:
        overrides["ui_dir"] = args.ui_dir
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    app = create_app(cfg)
    uvicorn.run(app, host=args.host, port=cfg.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="propaseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the k-fold simulated-editing benchmark")
    p.add_argument("--config", help="experiment config JSON", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ablate-decoder", help="sweep decoder tap levels")
    p.add_argument("--levels", default="1,2,3", help="comma-separated tap levels")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("prepare-demo", help="train small demo models and a demo phantom")
    p.add_argument("--out", required=True, help="demo directory (models/ + data)")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--dims", type=int, nargs=3, default=(24, 32, 32))
    p.set_defaults(func=cmd_prepare_demo)

    p = sub.add_parser("serve", help="start the HTTP API")
    p.add_argument("--config", default=None, help="service config JSON")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--model-dir", default=None)
    p.add_argument("--store-dir", default=None)
    p.add_argument("--ui-dir", default=None, help="serve a built frontend at /ui")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
