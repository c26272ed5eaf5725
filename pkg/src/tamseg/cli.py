"""Command-line interface: gen, train, eval, ablate, gradcheck, cost.

Exit codes: 0 success, 1 validation/usage error, 2 runtime or numeric
failure. Thread counts are pinned to 1 before numpy loads so reruns of a
command with the same flags and seed reproduce result files byte for byte.
"""

from __future__ import annotations

import argparse
import os
import sys

# must happen before numpy's first import anywhere in the process
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .errors import NumericError, ShapeError, UndefinedMetricError, ValidationError


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _csv_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _parse_channels(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in _csv_list(text))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tamseg",
                description="motion-enhanced segmentation experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="dataset directory to create")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--t", type=int, default=3, help="frames per sequence")
    g.add_argument("--size", type=int, default=64, help="square image extent")
    g.add_argument("--tier", default="medium", choices=("good", "medium", "poor"))
    g.add_argument("--dropout-target", default="unannotated",
                   choices=("unannotated", "annotated", "all", "none"),
                   help="which frames dropout patches hit")
    g.add_argument("--train-cases", type=int, default=8)
    g.add_argument("--val-cases", type=int, default=2)
    g.add_argument("--test-cases", type=int, default=4)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--config", default="C1", help="C1..C11")
    t.add_argument("--t", type=int, default=2, help="frames fed per sequence")
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--d-embed", type=int, default=None)
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--batch-size", type=int, default=1)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--levels", type=int, default=5)
    t.add_argument("--channels", type=_parse_channels,
                   default=(16, 32, 64, 128, 256),
                   help="comma-separated widths, one per level")
    t.add_argument("--eval-every", type=int, default=25)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", help="checkpoint bundle directory")
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself (reporting path check)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one experiment axis")
    a.add_argument("--axis", required=True,
                   choices=("config", "heads", "frames", "tier"))
    a.add_argument("--values", required=True, type=_csv_list,
                   help="comma-separated cell values")
    a.add_argument("--seeds", type=_csv_list, default=["0"],
                   help="comma-separated run seeds shared across cells")
    a.add_argument("--seed", type=int, default=0,
                   help="base seed for dataset generation")
    a.add_argument("--workdir", required=True)
    a.add_argument("--config", default="C1")
    a.add_argument("--t", type=int, default=2)
    a.add_argument("--heads", type=int, default=4)
    a.add_argument("--steps", type=int, default=60)
    a.add_argument("--lr", type=float, default=1e-3)
    a.add_argument("--size", type=int, default=32)
    a.add_argument("--tier", default="medium")
    a.add_argument("--levels", type=int, default=5)
    a.add_argument("--channels", type=_parse_channels,
                   default=(8, 16, 32, 64, 128))
    a.add_argument("--train-cases", type=int, default=4)
    a.add_argument("--val-cases", type=int, default=1)
    a.add_argument("--test-cases", type=int, default=2)
    a.add_argument("--dropout-target", default="unannotated",
                   choices=("unannotated", "annotated", "all", "none"))
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    c.add_argument("--scope", required=True, choices=("ops", "tam", "end2end"))
    c.add_argument("--seeds", type=int, default=None,
                   help="number of seeds (defaults per scope)")
    c.set_defaults(func=cmd_gradcheck)

    k = sub.add_parser("cost", help="closed-form MAC/FLOP/parameter report")
    k.add_argument("--configs", type=_csv_list, default=["C1", "C2", "C3"])
    k.add_argument("--size", type=int, default=64)
    k.add_argument("--t", type=int, default=2)
    k.add_argument("--levels", type=int, default=5)
    k.add_argument("--channels", type=_parse_channels,
                   default=(16, 32, 64, 128, 256))
    k.add_argument("--heads", type=int, default=4)
    k.add_argument("--json", dest="json_out", default=None,
                   help="also write the reports as JSON to this path")
    k.set_defaults(func=cmd_cost)
    return p


def cmd_gen(args) -> int:
    from .experiments import make_dataset
    make_dataset(args.out, seed=args.seed, size=args.size, frames=args.t,
                 tier=args.tier,
                 counts={"train": args.train_cases, "val": args.val_cases,
                         "test": args.test_cases},
                 dropout_target=args.dropout_target)
    print(f"dataset written to {args.out}")
    return 0


def _experiment_config(args, dataset: str, outdir: str):
    from .experiments import ExperimentConfig
    return ExperimentConfig(
        config_id=args.config, frames=args.t, heads=args.heads,
        d_embed=getattr(args, "d_embed", None), steps=args.steps,
        batch_size=getattr(args, "batch_size", 1), lr=args.lr, seed=args.seed,
        dataset=dataset, tier=getattr(args, "tier", "medium"), outdir=outdir,
        levels=args.levels, channels=args.channels,
        eval_every=getattr(args, "eval_every", 25))


def cmd_train(args) -> int:
    from .experiments import train
    cfg = _experiment_config(args, args.dataset, args.out)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    summary = train(cfg, log=log)
    print(f"final loss {summary['final_loss']:.4f} "
          f"(initial {summary['initial_loss']:.4f}); outputs in {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .experiments import evaluate
    if not args.oracle and not args.checkpoint:
        raise ValidationError("--checkpoint is required unless --oracle is set")
    result = evaluate(args.checkpoint, args.dataset, args.out,
                      split=args.split, oracle=args.oracle)
    for label, entry in result["aggregate"]["classes"].items():
        hd = entry["hd_mm_mean"]
        print(f"class {label}: dsc {entry['dsc_mean']:.4f}"
              + (f", hd {hd:.3f} mm" if hd is not None else "")
              + (f", undefined {entry['undefined']}" if entry["undefined"] else ""))
    return 0


def cmd_ablate(args) -> int:
    from .experiments import ablate
    # ablate assigns per-cell dataset/outdir paths under --workdir
    base = _experiment_config(args, dataset="", outdir="")
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    rows = ablate(args.axis, args.values, base,
                  seeds=[int(s) for s in args.seeds], workdir=args.workdir,
                  size=args.size,
                  dataset_counts={"train": args.train_cases,
                                  "val": args.val_cases,
                                  "test": args.test_cases},
                  dropout_target=args.dropout_target, log=log)
    for r in rows:
        hd = "" if r["hd_mm"] is None else f" hd {r['hd_mm']:.3f}"
        print(f"{r['axis']}={r['value']} seed={r['seed']}: "
              f"dsc {r['dsc']:.4f}{hd} flops {r['flops']}")
    print(f"results in {args.workdir}/results.csv")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    kwargs = {}
    if args.seeds is not None:
        kwargs["seeds"] = range(args.seeds)
    results = run_suite(args.scope, **kwargs)
    failed = [r for r in results if not r.passed]
    for r in sorted(results, key=lambda r: -r.max_rel_error):
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4} {r.name:<20} max rel err {r.max_rel_error:.3e} "
              f"(tol {r.tolerance:g})")
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed")
        return 2
    print(f"all {len(results)} checks passed")
    return 0


def cmd_cost(args) -> int:
    from .costs import compare_architectures, configuration_report
    from .tnsr import write_json
    from .unet import BackboneConfig
    base = BackboneConfig(levels=args.levels, channels=args.channels,
                          heads=args.heads)
    spatial = (args.size, args.size)
    reports = []
    for cid in args.configs:
        rep = configuration_report(cid, base, spatial, args.t)
        reports.append(rep)
        print(rep.to_text())
    if len(args.configs) > 1:
        print(compare_architectures(args.configs, base, spatial, args.t))
    if args.json_out:
        write_json(args.json_out, {"reports": [r.to_json_dict() for r in reports]})
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ValidationError, ShapeError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        path = getattr(exc, "filename", None)
        where = f" ({path})" if path else ""
        print(f"i/o failure: {exc}{where}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
