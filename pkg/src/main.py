"""
psconv command-line entry point

Commands
--------
check       randomized equivalence, degenerate, adjoint and finite-difference
            suites; exit 1 and print the failing case seed on any violation.
bench       time the reference/masked/rearranged/dilated/standard strategies.
count       exact parameter and MAC counts for the ResNet-family zoo.
analyze     scale-allocation proportions of a .psta weight archive.
train-demo  train the toy scale-classification model and save its weights.
lattice     print a dilation matrix as CSV.

Usage
-----
  python -m src.main check --cases 1000 --seed 42 --tol 1e-9
  python -m src.main bench --shape 8,64,56,56 --repeats 5 --out bench.json --csv bench.csv
  python -m src.main count --arch resnet50 --variant psconv
  python -m src.main train-demo --steps 200 --lr 0.05 --seed 1 --out weights.psta
  python -m src.main analyze --weights weights.psta --out allocation

Reports go to stdout (or ``--out``), logs to stderr.  Exit codes: 0 success,
1 verification failure, 2 IO/config/usage error, 3 numerical divergence.
"""

import argparse
import logging
from typing import List, Optional, Tuple

from dotenv import load_dotenv

from . import bench, demo_trainer, reports, verify
from .analysis import CSV_FIELDS as ALLOCATION_FIELDS
from .analysis import AllocationError, allocation_report, lattices_for_archive
from .config import Config
from .conv_engine import ConvError
from .io_format import ArchiveError, load_archive, save_archive
from .kernel_lattice import (
    Construction,
    DilationPattern,
    LatticeError,
    apply_rearrangement,
    build_lattice,
    rearrangement,
)
from .model_zoo import VARIANTS, ARCHITECTURES, UnknownArchError, count_flops, get_arch
from .tensor_core import ShapeError

load_dotenv()

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s  %(levelname)-8s  %(name)s  %(message)s",
    datefmt="%Y-%m-%dT%H:%M:%S",
)
logger = logging.getLogger("psconv")

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_IO = 2
EXIT_DIVERGED = 3

COUNT_FIELDS = ("name", "kind", "stage", "block", "dilation", "params", "macs", "out_h", "out_w")


# ── argument helpers ──────────────────────────────────────────────────────────

def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"seeds must be >= 0, got {value}")
    return value


def _shape(text: str) -> Tuple[int, int, int, int]:
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"shape must be N,C,H,W, got {text!r}")
    return tuple(_positive_int(p) for p in parts)  # type: ignore[return-value]


def _resolution(text: str) -> Tuple[int, int]:
    parts = [p for p in text.lower().split("x") if p.strip()]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"input must be S or HxW, got {text!r}")
    return _positive_int(parts[0]), _positive_int(parts[1])


def build_parser(cfg: Config) -> argparse.ArgumentParser:
    from . import __version__

    parser = argparse.ArgumentParser(
        prog="psconv",
        description="Poly-scale convolution kernels: verification, benchmarks, counts and analysis.",
    )
    parser.add_argument("-V", "--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    check = sub.add_parser("check", help="Run the randomized correctness suites")
    check.add_argument("--cases", type=_positive_int, default=100, metavar="N",
                       help="Equivalence cases to run (default: 100)")
    check.add_argument("--seed", type=_seed, default=cfg.seed, metavar="S",
                       help=f"Run seed (default: PSCONV_SEED or {cfg.seed})")
    check.add_argument("--tol", type=float, default=1e-9, metavar="T",
                       help="Max-abs tolerance for strategy equivalence (default: 1e-9)")
    check.add_argument("--replay", type=_seed, default=None, metavar="CASE_SEED",
                       help="Re-run the single equivalence case with this case seed")
    check.add_argument("--threads", type=_positive_int, default=cfg.threads, metavar="N")
    check.add_argument("--out", default=None, metavar="PATH", help="Write the JSON report here")

    b = sub.add_parser("bench", help="Time the convolution strategies")
    b.add_argument("--config", default=None, metavar="PATH", help="JSON file of benchmark settings")
    b.add_argument("--shape", type=_shape, default=None, metavar="N,C,H,W",
                   help="Input shape (default: 200,64,56,56)")
    b.add_argument("--cout", type=_positive_int, default=None, metavar="C")
    b.add_argument("--k", type=_positive_int, default=None, metavar="K")
    b.add_argument("--stride", type=_positive_int, default=None)
    b.add_argument("--groups", type=_positive_int, default=None)
    b.add_argument("--pattern", default=None, metavar="RATES",
                   help="Comma list or preset name (default: PSCONV_PATTERN)")
    b.add_argument("--dilation", type=_positive_int, default=None, metavar="D",
                   help="Rate of the 'dilated' strategy (default: 2)")
    b.add_argument("--strategies", default=None, metavar="LIST",
                   help=f"Comma list from {','.join(bench.BENCH_STRATEGIES)}")
    b.add_argument("--repeats", type=_positive_int, default=None)
    b.add_argument("--warmup", type=int, default=None)
    b.add_argument("--threads", type=_positive_int, default=None, metavar="N")
    b.add_argument("--seed", type=_seed, default=None, metavar="S")
    b.add_argument("--out", default=None, metavar="PATH", help="Write the JSON report here")
    b.add_argument("--csv", default=None, metavar="PATH", help="Also write a CSV table here")

    count = sub.add_parser("count", help="Exact parameter and MAC counts")
    count.add_argument("--arch", required=True, metavar="NAME",
                       help=f"One of {', '.join(ARCHITECTURES)}")
    count.add_argument("--variant", choices=VARIANTS, default="standard")
    count.add_argument("--input", type=_resolution, default=None, metavar="S|HxW",
                       help="Input resolution (default: 224, or 32 for the CIFAR networks)")
    count.add_argument("--per-layer", default=None, metavar="PATH",
                       help="Write the per-layer CSV breakdown here")
    count.add_argument("--out", default=None, metavar="PATH")

    analyze = sub.add_parser("analyze", help="Scale-allocation proportions of a weight archive")
    analyze.add_argument("--weights", required=True, metavar="FILE.psta")
    analyze.add_argument("--pattern", default=cfg.pattern, metavar="RATES")
    analyze.add_argument("--groups", type=_positive_int, default=1)
    analyze.add_argument("--out", default=None, metavar="PREFIX",
                         help="Write PREFIX.csv and PREFIX.json (default: JSON to stdout)")

    train = sub.add_parser("train-demo", help="Train the toy scale-classification model")
    train.add_argument("--steps", type=_positive_int, default=200)
    train.add_argument("--lr", type=float, default=0.05)
    train.add_argument("--batches-per-epoch", type=_positive_int, default=6, metavar="N",
                       help="Fixed batches cycled through every epoch")
    train.add_argument("--seed", type=_seed, default=cfg.seed, metavar="S")
    train.add_argument("--pattern", default=cfg.pattern, metavar="RATES")
    train.add_argument("--uniform", action="store_true", help="Use d=1 lattices instead of psconv")
    train.add_argument("--threads", type=_positive_int, default=cfg.threads, metavar="N")
    train.add_argument("--out", required=True, metavar="FILE.psta", help="Final weights archive")
    train.add_argument("--log", default=None, metavar="PATH",
                       help="Per-step loss CSV (default: stdout)")
    train.add_argument("--summary", default=None, metavar="PATH", help="JSON run summary")

    lattice = sub.add_parser("lattice", help="Print a dilation matrix as CSV")
    lattice.add_argument("--construction", choices=[c.value for c in Construction], default="psconv")
    lattice.add_argument("--cout", type=_positive_int, required=True)
    lattice.add_argument("--cin", type=_positive_int, required=True)
    lattice.add_argument("--groups", type=_positive_int, default=1)
    lattice.add_argument("--pattern", default=cfg.pattern, metavar="RATES")
    lattice.add_argument("--rearranged", action="store_true",
                         help="Print rows and columns in residue-class order")
    lattice.add_argument("--out", default=None, metavar="PATH")
    return parser


# ── commands ──────────────────────────────────────────────────────────────────

def cmd_check(args: argparse.Namespace) -> int:
    if args.replay is not None:
        report = verify.replay(args.replay, args.tol, args.threads)
    else:
        report = verify.run_check(args.cases, args.seed, args.tol, args.threads)
    reports.write_json(report.to_dict(), args.out)
    if report.passed:
        logger.info("All suites passed")
        return EXIT_OK
    for suite in report.suites:
        if not suite.passed:
            logger.error("Suite %s FAILED: max error %.3e (tol %.1e); reproduce with --replay %s",
                         suite.name, suite.max_error, suite.tol, suite.failing_case_seed)
    return EXIT_VERIFY


def bench_config(args: argparse.Namespace, cfg: Config) -> bench.BenchConfig:
    """defaults < environment < --config JSON < explicit flags."""
    base = bench.BenchConfig(
        pattern=cfg.pattern, repeats=cfg.bench_repeats, warmup=cfg.bench_warmup,
        threads=cfg.threads, seed=cfg.seed,
    )
    if args.config:
        base = bench.BenchConfig.from_json(args.config, base)
    strategies = tuple(s.strip() for s in args.strategies.split(",") if s.strip()) if args.strategies else None
    return base.with_overrides({
        "shape": args.shape, "cout": args.cout, "k": args.k, "stride": args.stride,
        "groups": args.groups, "pattern": args.pattern, "dilation": args.dilation,
        "strategies": strategies, "repeats": args.repeats, "warmup": args.warmup,
        "threads": args.threads, "seed": args.seed,
    })


def cmd_bench(args: argparse.Namespace, cfg: Config) -> int:
    report = bench.run_benchmark(bench_config(args, cfg))
    reports.write_json(report.to_dict(), args.out)
    if args.csv:
        reports.write_csv(report.rows(), bench.CSV_FIELDS, args.csv)
    return EXIT_OK


def cmd_count(args: argparse.Namespace) -> int:
    arch = get_arch(args.arch, args.variant, args.input)
    report = count_flops(arch)
    logger.info("%s/%s @ %dx%d: %s params, %.3f GFLOPs",
                arch.name, arch.variant, arch.input_hw[0], arch.input_hw[1],
                f"{report.total_params:,}", report.gflops)
    reports.write_json(report.to_dict(), args.out)
    if args.per_layer:
        reports.write_csv((layer.to_row() for layer in report.layers), COUNT_FIELDS, args.per_layer)
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    archive = load_archive(args.weights)
    pattern = DilationPattern.parse(args.pattern)
    report = allocation_report(archive, lattices_for_archive(archive, pattern, args.groups))
    if args.out:
        reports.write_csv(report.rows(), ALLOCATION_FIELDS, f"{args.out}.csv")
        reports.write_json(report.to_dict(), f"{args.out}.json")
    else:
        reports.write_json(report.to_dict())
    return EXIT_OK


def cmd_train_demo(args: argparse.Namespace) -> int:
    result = demo_trainer.train(
        args.steps, args.lr, args.seed,
        pattern=DilationPattern.parse(args.pattern),
        uniform=args.uniform,
        threads=args.threads,
        batches_per_epoch=args.batches_per_epoch,
    )
    save_archive(args.out, result.model.archive_tensors())
    reports.write_csv(result.log_rows(), demo_trainer.LOG_FIELDS, args.log)
    if args.summary:
        reports.write_json(result.summary(), args.summary)
    logger.info("Loss %.4f → %.4f over %d steps", result.losses[0], result.losses[-1], len(result.losses))
    return EXIT_OK


def cmd_lattice(args: argparse.Namespace) -> int:
    D = build_lattice(args.construction, args.cout, args.cin, DilationPattern.parse(args.pattern), args.groups)
    if args.rearranged:
        rows = apply_rearrangement(D, rearrangement(D))
        text = "\n".join(",".join(str(int(v)) for v in row) for row in rows) + "\n"
    else:
        text = D.to_csv()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        logger.info("Wrote %dx%d lattice to %s", D.shape[0], D.shape[1], args.out)
    else:
        print(text, end="")
    return EXIT_OK


def run(args: argparse.Namespace, cfg: Config) -> int:
    command = args.command
    try:
        if command == "check":
            return cmd_check(args)
        if command == "bench":
            return cmd_bench(args, cfg)
        if command == "count":
            return cmd_count(args)
        if command == "analyze":
            return cmd_analyze(args)
        if command == "train-demo":
            return cmd_train_demo(args)
        return cmd_lattice(args)
    except demo_trainer.DivergenceError as exc:
        logger.error("Training diverged at step %d: %s", exc.step, exc)
        return EXIT_DIVERGED
    except ArchiveError as exc:
        logger.error("Archive error (code %d): %s", exc.code, exc)
        return EXIT_IO
    except UnknownArchError as exc:
        logger.error("%s", exc.args[0] if exc.args else exc)
        return EXIT_IO
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    except (bench.BenchConfigError, LatticeError, ConvError, AllocationError, ShapeError, ValueError, TypeError) as exc:
        logger.error("%s", exc)
        return EXIT_IO


def main(argv: Optional[List[str]] = None) -> None:
    try:
        cfg = Config.from_env()
    except EnvironmentError as exc:
        logger.error("Configuration error: %s", exc)
        raise SystemExit(EXIT_IO) from exc
    logging.getLogger().setLevel(cfg.log_level_value)

    args = build_parser(cfg).parse_args(argv)
    from . import __version__
    logger.debug("psconv v%s  command=%s  threads=%s", __version__, args.command, getattr(args, "threads", None))

    code = run(args, cfg)
    if code != EXIT_OK:
        raise SystemExit(code)


if __name__ == "__main__":
    main()
