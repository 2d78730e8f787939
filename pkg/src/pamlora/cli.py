"""Command line entry point: ``pamlora run|verify|plotdata|merge``.

Exit codes: 0 success, 1 config error, 2 run failure, 3 verification mismatch.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, ContractError

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_VERIFY = 0, 1, 2, 3


def _cmd_run(args) -> int:
    from .config import parse_config
    from .experiment import run_experiment

    cfg = parse_config(args.config)
    changes = {}
    if args.output_dir:
        changes["output_dir"] = args.output_dir
    if args.fwt_paper_literal:
        changes["fwt_paper_literal"] = True
    if changes:
        cfg = cfg.with_(**changes)
    manifest = run_experiment(cfg, workers=args.workers)
    failed = [r for r in manifest["runs"] if r["status"] != "ok"]
    for r in manifest["runs"]:
        print(f"{r['status']:6s} {r['path']}" + (f"  {r['error']}" if r["status"] != "ok" else ""))
    print(f"manifest: {Path(cfg.output_dir) / 'manifest.json'}")
    return EXIT_RUN if failed else EXIT_OK


def _cmd_verify(args) -> int:
    from .experiment import verify

    try:
        problems = verify(args.manifest, tol=args.tol)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    for p in problems:
        print(p)
    print("ok" if not problems else f"{len(problems)} mismatch(es)")
    return EXIT_VERIFY if problems else EXIT_OK


def _cmd_plotdata(args) -> int:
    from .experiment import emit_plot_data

    text = emit_plot_data(args.manifest, args.kind)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_merge(args) -> int:
    from .merging import MergeStrategy, merge_adapters, merge_report
    from .model import load_adapter, save_adapter

    strategy = MergeStrategy(args.strategy, density=args.density, lam=args.lam)
    g, w = load_adapter(args.ckpt_g), load_adapter(args.ckpt_w)
    merged = merge_adapters(g, w, strategy)
    save_adapter(merged, args.out)
    report = merge_report(g.flatten(), w.flatten(), merged.flatten(), strategy)
    print(json.dumps({"out": str(args.out), **report}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pamlora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every (order, seed) pair of a config")
    run.add_argument("config", help="YAML config file")
    run.add_argument("--output-dir", help="override output_dir from the config")
    run.add_argument("--workers", type=int, default=1, help="parallel runs (default 1)")
    run.add_argument("--fwt-paper-literal", action="store_true",
                     help="FWT summed over tasks 2..T-1 instead of 2..T")
    run.set_defaults(func=_cmd_run)

    ver = sub.add_parser("verify", help="recompute metrics and summary from stored matrices")
    ver.add_argument("manifest", help="manifest.json or its directory")
    ver.add_argument("--tol", type=float, default=1e-12)
    ver.set_defaults(func=_cmd_verify)

    plot = sub.add_parser("plotdata", help="emit plot-ready CSV")
    plot.add_argument("manifest", nargs="+", help="one or more manifests")
    plot.add_argument("--kind", required=True,
                      choices=["forgetting_over_time", "acc_by_order", "ablation_sweep"])
    plot.add_argument("--out", help="write to file instead of stdout")
    plot.set_defaults(func=_cmd_plotdata)

    merge = sub.add_parser("merge", help="merge two adapter checkpoints")
    merge.add_argument("ckpt_g", help="global adapter checkpoint")
    merge.add_argument("ckpt_w", help="task adapter checkpoint")
    merge.add_argument("--strategy", required=True, choices=["average", "ties", "tall", "magmax"])
    merge.add_argument("--density", type=float, default=0.9, help="TIES keep fraction")
    merge.add_argument("--lam", type=float, default=0.1, help="TALL mask threshold")
    merge.add_argument("--out", default="merged.lora")
    merge.set_defaults(func=_cmd_merge)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if args.command == "merge" else EXIT_RUN
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if args.command in ("run", "merge") else EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
