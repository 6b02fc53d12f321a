"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (bad flags, config, data), 2 run aborted.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import SynthConfig, generate_synthetic, load_jsonl, write_jsonl
from .errors import DegenerateGroupError, DomainError, GPSVIError, NaNLossError, TapeError
from .nn import atomic_write, dumps, read_json

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2

# errors that mean the inputs were wrong rather than that the run broke
INVALID_INPUT = (ValueError, KeyError, FileNotFoundError, IsADirectoryError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gpsvi", description="GPSVI CTR lab: data generation, training, evaluation, reports.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a synthetic population as JSONL")
    g.add_argument("--config", required=True, help="synthetic population JSON")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True, help="output .jsonl path")

    t = sub.add_parser("train", help="train from a run config and write checkpoint + metrics")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("evaluate", help="segment-wise AUC of a checkpoint on a JSONL dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--head-quantile", type=float, default=0.25)
    e.add_argument("--mc-samples", type=int, default=0, help="average this many sampled scores (0: mean path)")

    r = sub.add_parser("report", help="variance-by-length or mask-sensitivity CSV")
    r.add_argument("kind", choices=["variance", "sensitivity"])
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--head-quantile", type=float, default=0.25)

    b = sub.add_parser("benchmark", help="attn vs gpsvi and its ablations on synthetic data")
    b.add_argument("--seeds", type=int, default=5)
    b.add_argument("--out", required=True)
    b.add_argument("--config", help="synthetic population JSON (defaults if omitted)")

    sub.add_parser("selftest", help="run the oracle suites")
    return p


def _synth_config(path) -> SynthConfig:
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return SynthConfig.from_json(doc)


def cmd_generate(args) -> int:
    ds = generate_synthetic(_synth_config(args.config), args.seed)
    write_jsonl(ds, args.out)
    print(f"wrote {len(ds)} records to {args.out} (sha256 {ds.provenance['hash'][:12]})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import RunConfig, train

    cfg = RunConfig.from_json(read_json(args.config)).with_env_seed()
    metrics = train(cfg, args.out)
    auc = metrics["auc"]
    print(" ".join(f"{k}={_fmt(auc[k]['mean'])}" for k in ("all", "head", "tail")))
    return EXIT_OK


def _fmt(x) -> str:
    return "absent" if x is None else f"{x:.4f}"


def cmd_evaluate(args) -> int:
    from .train import evaluate_model, load_model

    model = load_model(args.checkpoint)
    ds = load_jsonl(args.data, vocab=model.vocab)
    report = evaluate_model(model, ds, args.head_quantile, args.mc_samples)
    out = Path(args.out)
    atomic_write(out / "metrics.json", dumps(report) + "\n")
    print(" ".join(f"{k}={_fmt(v)}" for k, v in report["auc"].items()))
    return EXIT_OK


def cmd_report(args) -> int:
    from .reports import (mask_sensitivity, variance_report, variance_trend, write_sensitivity_csv,
                          write_variance_csv)
    from .train import load_model

    model = load_model(args.checkpoint)
    ds = load_jsonl(args.data, vocab=model.vocab)
    out = Path(args.out)
    if args.kind == "variance":
        rows = variance_report(model, ds)
        write_variance_csv(rows, out / "variance_report.csv")
        print(f"{len(rows)} bins, spearman(bin, sigma) = {variance_trend(rows):.3f}")
    else:
        sens = mask_sensitivity(model, ds, head_quantile=args.head_quantile)
        write_sensitivity_csv(sens, out / "sensitivity.csv")
        print(f"tail |diff| mean {sens['tail'].mean():.4f}, head |diff| mean {sens['head'].mean():.4f}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    from .bench import run_benchmark

    synth = _synth_config(args.config) if args.config else None
    result = run_benchmark(range(args.seeds), synth=synth, out_dir=args.out,
                           progress=lambda r: print(f"seed {r.seed} {r.arm:13s} " + " ".join(
                               f"{k}={_fmt(v)}" for k, v in r.auc.items()), flush=True))
    for arm, d in result.summary()["delta_vs_attn"].items():
        print(f"{arm} - attn: " + " ".join(f"{k}={v:+.4f}" for k, v in d.items()))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_ABORT


COMMANDS = {
    "generate-data": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "benchmark": cmd_benchmark,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:
        # --help exits 0 through argparse
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NaNLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        if exc.dump is not None:
            print(dumps(exc.dump), file=sys.stderr)
        return EXIT_ABORT
    except (DomainError, TapeError, DegenerateGroupError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except INVALID_INPUT as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (GPSVIError, OSError, ArithmeticError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
