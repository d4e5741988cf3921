"""``covadapt`` command line: generate, pretrain, train, evaluate, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .adapters import ConfigurationError
from .io import DataError
from .metrics import AggregationError
from .nn import TrainingError
from .synthgen import GenerationError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="covadapt", description="Covariate adapters for a toy token-quantized forecaster.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, dataset=False, variant=False):
        sp.add_argument("--config", help="experiment config JSON (defaults used when omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if dataset:
            sp.add_argument("--dataset", action="append", help="dataset id (repeatable; default: all in config)")
        if variant:
            sp.add_argument("--variant", action="append", help="variant name (repeatable; default: config variants)")

    common(sub.add_parser("generate", help="write benchmark datasets with manifests"), dataset=True)
    common(sub.add_parser("pretrain", help="pretrain the backbone on covariate-free signals"))
    common(sub.add_parser("train", help="select LR, train and evaluate adapter variants"), dataset=True, variant=True)
    ev = sub.add_parser("evaluate", help="score the zero-shot backbone or re-score trained runs")
    common(ev, dataset=True, variant=True)
    rp = sub.add_parser("report", help="aggregate run reports into tables")
    common(rp)
    rp.add_argument("--baseline", default=harness.BASELINE_MODEL)
    return p


def load_config(args) -> harness.ExperimentConfig:
    try:
        d = json.loads(open(args.config).read()) if args.config else {}
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    if getattr(args, "dataset", None):
        d["datasets"] = args.dataset
    if getattr(args, "variant", None):
        d["variants"] = args.variant
    try:
        cfg = harness.ExperimentConfig.from_dict(d)
        cfg.specs()
        return cfg
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _dataset_ids(cfg: harness.ExperimentConfig) -> list[str]:
    try:
        return [s.dataset_id for s in cfg.specs()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def run(args) -> int:
    cfg = load_config(args)
    if args.command == "generate":
        for did, status in harness.generate(cfg):
            print(f"{did}\t{status}")
    elif args.command == "pretrain":
        print(harness.run_pretrain(cfg))
    elif args.command == "train":
        for did in _dataset_ids(cfg):
            for v in cfg.variants:
                if v == harness.BASELINE_MODEL:
                    r = harness.evaluate_job(cfg, did)
                else:
                    r = harness.train_job(cfg, did, v)
                print(f"{did}\t{r.model_id}\twql={r.wql:.6f}\tmase={r.mase:.6f}")
    elif args.command == "evaluate":
        models = args.variant or [harness.BASELINE_MODEL]
        for did in _dataset_ids(cfg):
            for m in models:
                r = harness.evaluate_job(cfg, did, m)
                print(f"{did}\t{r.model_id}\twql={r.wql:.6f}\tmase={r.mase:.6f}")
    elif args.command == "report":
        agg, plot = harness.report(cfg.out_dir, args.baseline, cfg.provenance())
        print(agg)
        print(plot)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GenerationError, AggregationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
