"""``complab`` command line: analyze, train, ablate, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import experiments as X
from .analyzer import AnalysisError, analyze
from .data import DATA_ENV, synthetic_cifar
from .infoloss import layer_info_report
from .model import BuildError, build_model
from .netspec import SpecError, load_spec


def _limits(deterministic: bool):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not deterministic:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def cmd_analyze(args) -> int:
    try:
        spec = load_spec(args.spec)
        report = analyze(spec)
    except SpecError as exc:
        print(f"{args.spec}: {exc}", file=sys.stderr)
        return 2
    except (BuildError, AnalysisError) as exc:
        print(f"{args.spec}: {exc}", file=sys.stderr)
        return 2
    info = None
    if args.info:
        model = build_model(spec, np.random.default_rng(args.seed))
        batch = synthetic_cifar(args.info_batch, seed=args.seed).images.astype(np.float32) / 255.0
        h, w, _ = spec.input_shape
        info = layer_info_report(model, batch[:, :h, :w, :], seed=args.seed)
    if args.json:
        out = report.to_dict()
        if info is not None:
            out["info"] = json.loads(info.to_json())
        print(json.dumps(out, indent=2))
    else:
        print(report.to_table())
        if info is not None:
            print()
            print(info.to_table())
    if args.strict and report.errors:
        return 1
    return 0


def cmd_train(args) -> int:
    run = X.load_runfile(args.runfile)
    if args.synthetic:
        run.dataset = "synthetic"
    elif run.dataset != "synthetic" and not Path(run.dataset).is_dir():
        print(f"dataset directory {run.dataset} not found (use --synthetic or set {DATA_ENV})", file=sys.stderr)
        return 2
    if args.output:
        run.output = args.output
    with _limits(args.deterministic):
        mlog, summary = X.execute(run)
    print(json.dumps({k: v for k, v in summary.items() if k != "config"}, indent=2))
    print(f"wrote {Path(run.output) / 'metrics.csv'}")
    return 0


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def cmd_ablate(args) -> int:
    dataset = "synthetic" if args.synthetic else (args.data or X.default_dataset())
    if args.scale == "tiny" and dataset != "synthetic":
        print("tiny scale is synthetic-only; switching to synthetic data", file=sys.stderr)
        dataset = "synthetic"
    if dataset == "synthetic" and not args.synthetic and args.scale != "tiny":
        print(f"no CIFAR-10 directory given (--data or {DATA_ENV}); pass --synthetic to run on generated data",
              file=sys.stderr)
        return 2
    if args.name == "directions":
        return _directions(args, dataset)
    with _limits(args.deterministic):
        result = X.run_ablation(args.name, scale=args.scale, seeds=args.seeds, dataset=dataset,
                                out_root=args.out, parallel_seeds=args.parallel_seeds, epochs=args.epochs)
    print(json.dumps(result.to_dict(), indent=2) if args.json else result.to_markdown())
    return 1 if any(r.failures for r in result.rows) else 0


def _directions(args, dataset) -> int:
    """Run the five ordering comparisons; exit 0 when at least four hold and no run is weak."""
    results = {}
    with _limits(args.deterministic):
        for name in dict.fromkeys(d.ablation for d in X.DIRECTIONS):
            results[name] = X.run_ablation(name, scale=args.scale, seeds=args.seeds, dataset=dataset,
                                           out_root=args.out, parallel_seeds=args.parallel_seeds,
                                           epochs=args.epochs)
    checks = X.check_directions(results)
    accs = [a for res in results.values() for r in res.rows for a in r.accs]
    failed = any(r.failures for res in results.values() for r in res.rows)
    for c in checks:
        fmt = lambda v: "FAILED" if v is None else f"{100 * v:.2f}%"
        print(f"{'holds ' if c.holds else 'broken'}  {c.text:<36} {fmt(c.better_acc)} vs {fmt(c.worse_acc)}")
    held = sum(c.holds for c in checks)
    low = min(accs, default=0.0)
    print(f"{held}/{len(checks)} orderings hold; lowest single-run test accuracy {100 * low:.2f}%")
    return 0 if held >= 4 and low > X.MIN_RUN_ACC and not failed else 1


def cmd_report(args) -> int:
    rows = X.collect_summaries(args.results_dir)
    text = render = X.render_report(rows, "csv" if args.csv else "markdown")
    if args.json:
        render = json.dumps(rows, indent=2) + "\n"
    sys.stdout.write(render if args.json else text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="complab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="verb", required=True)

    a = sub.add_parser("analyze", help="shapes, parameters, receptive fields and lints of a network")
    a.add_argument("spec", help="builtin design name or path to a .net file")
    a.add_argument("--json", action="store_true")
    a.add_argument("--strict", action="store_true", help="exit 1 if any error lint fires")
    a.add_argument("--info", action="store_true", help="add per-reduction information estimates")
    a.add_argument("--info-batch", type=int, default=64)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("train", help="train one run described by a run file")
    t.add_argument("runfile")
    t.add_argument("--synthetic", action="store_true", help="use generated data instead of CIFAR-10")
    t.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
    t.add_argument("--output", help="override the run file's output directory")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("ablate", help="run one of the named ablations over several seeds")
    b.add_argument("name", choices=sorted(X.ABLATIONS) + ["directions"],
                   help="an ablation table, or 'directions' for the five ordering checks")
    b.add_argument("--scale", choices=sorted(X.SCALES), default="small")
    b.add_argument("--seeds", type=_seeds, default=[1, 2, 3])
    b.add_argument("--synthetic", action="store_true")
    b.add_argument("--data", help=f"CIFAR-10 binary directory (default ${DATA_ENV})")
    b.add_argument("--out", default="results")
    b.add_argument("--epochs", type=int, help="override the scale's epoch count")
    b.add_argument("--parallel-seeds", type=int, default=1)
    b.add_argument("--deterministic", action="store_true")
    b.add_argument("--json", action="store_true")
    b.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="tabulate every run summary under a directory")
    r.add_argument("results_dir")
    r.add_argument("--csv", action="store_true")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SpecError, BuildError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
