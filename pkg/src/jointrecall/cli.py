"""Command line: jointrecall {gen, verify-theory, train, bench, report}."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import JointRecallError


def _load_json(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def cmd_gen(args) -> int:
    from .task_gen import DatasetConfig, generate_dataset

    cfg = _load_json(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.count is not None:
        cfg["count"] = args.count
    cfg.pop("path", None)
    out = generate_dataset(DatasetConfig(**cfg), args.out, shard=args.shard)
    print(out)
    return 0


def cmd_verify(args) -> int:
    from .theory import run_theory_suite

    report = run_theory_suite(max_n=args.max_n, instances=args.instances, seed=args.seed or 0)
    text = json.dumps(report.to_json(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    failed = [c.name for c in report.checks if not c.passed]
    print(f"{len(report.checks) - len(failed)}/{len(report.checks)} theory checks passed", file=sys.stderr)
    return 0 if not failed else 1


def cmd_train(args) -> int:
    from .bench import ARCHITECTURES
    from .neural.train import TrainConfig, model_config_for, save_checkpoint, train

    cfg = _load_json(args.config)
    model = dict(cfg.get("model", {}))
    arch = cfg.get("arch")
    if args.arch:
        arch = args.arch
    if arch:
        if arch not in ARCHITECTURES:
            print(f"error: unknown architecture {arch!r}", file=sys.stderr)
            return 1
        model = {**model, **ARCHITECTURES[arch]}
    tcfg = dict(cfg.get("train", {}))
    if args.seed is not None:
        tcfg["seed"] = args.seed
        model["seed"] = args.seed
    if args.steps is not None:
        tcfg["steps"] = args.steps
    tc = TrainConfig(**tcfg)
    mc = model_config_for(tc.data, **model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(mc, tc, metrics_path=out / "metrics.jsonl", log_fn=lambda row: print(json.dumps(row), flush=True))
    save_checkpoint(result.model, out / "model.npz")
    (out / "config.json").write_text(json.dumps({"model": mc.to_json(), "train": tc.to_json()}, indent=2) + "\n")
    return 0


def cmd_bench(args) -> int:
    from .bench import GridSpec, emit_report, run_grid

    grid = GridSpec.load(args.grid)
    if args.seed is not None:
        grid.seeds = [args.seed]
    out = Path(args.out)
    ledger = Path(args.ledger) if args.ledger else out.with_name(out.name + ".ledger")

    def progress(cell, cached):
        tag = "cached" if cached else cell.status
        print(f"{cell.arch} lr={cell.lr:g} seed={cell.seed} acc={cell.accuracy:.4f} [{tag}]", flush=True)

    report = run_grid(grid, ledger, jobs=args.jobs, progress=progress)
    fmt = args.format or ("csv" if out.suffix == ".csv" else "markdown" if out.suffix == ".md" else "json")
    emit_report(report, fmt, out)
    return 0


def cmd_report(args) -> int:
    from .bench import emit_report, load_report

    src = args.input or args.config
    if src is None:
        print("error: report needs --in <report.json|csv>", file=sys.stderr)
        return 2
    text = emit_report(load_report(src), args.format or "markdown", args.out)
    if not args.out:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointrecall", description="Joint recall tasks, sparse attention and hybrid SSMs.")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen", help="generate a joint-recall dataset")
    g.add_argument("--config", help="JSON dataset config (w, low, high, value_size, count, seed)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--shard", type=int, default=0)
    g.set_defaults(fn=cmd_gen)

    v = sub.add_parser("verify-theory", help="run the executable theory checks")
    v.add_argument("--max-n", type=int, default=4)
    v.add_argument("--instances", type=int, default=200)
    v.add_argument("--seed", type=int)
    v.add_argument("--out")
    v.set_defaults(fn=cmd_verify)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", help='JSON with optional "arch", "model" and "train" sections')
    t.add_argument("--arch")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(fn=cmd_train)

    b = sub.add_parser("bench", help="run an arch x lr x seed grid")
    b.add_argument("--grid", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--format", choices=["csv", "markdown", "md", "json"])
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--seed", type=int, help="run a single seed instead of the grid's list")
    b.add_argument("--ledger", help="ledger directory (default: <out>.ledger)")
    b.set_defaults(fn=cmd_bench)

    r = sub.add_parser("report", help="render a benchmark report")
    r.add_argument("--in", dest="input")
    r.add_argument("--config", help=argparse.SUPPRESS)
    r.add_argument("--format", choices=["csv", "markdown", "md", "json"])
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (JointRecallError, OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
