"""Command-line entry point: ``gatekeeper <command> [flags]``.

Exit codes: 0 success, 1 validation or config error, 2 runtime failure,
3 selfcheck failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings

from ..cascade import DominanceWarning
from ..errors import ConfigError, GatekeeperError, ParseError
from . import pipeline
from .acceptance import AcceptanceSuite, mutation_canary
from .config import ExperimentConfig, config_from_dict, load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFCHECK = 0, 1, 2, 3
GATING_FLAGS = {"max-softmax": "max_softmax", "nent": "neg_pred_entropy"}
LARGE_MODEL_FLAGS = {"trained": "trained_mlp", "bayes": "bayes_oracle"}

log = logging.getLogger("gatekeeper")


class _Parser(argparse.ArgumentParser):
    """Bad flags are a validation error (exit 1), not a runtime failure."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML experiment config")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, metavar="N", help="master seed")
    common.add_argument("--workers", type=int, metavar="N", help="parallel worker processes")
    common.add_argument("--alpha", type=float, action="append", metavar="A",
                        help="alpha value to sweep; repeat for several (replaces the config list)")
    common.add_argument("--gating", choices=sorted(GATING_FLAGS), help="deferral signal")
    common.add_argument("--large-model", choices=sorted(LARGE_MODEL_FLAGS), help="large-model mode")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="gatekeeper", description="Confidence tuning for model cascades")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="cross-entropy training of the models")
    sub.add_parser("finetune", parents=[common], help="Gatekeeper fine-tuning sweep over alpha and seeds")
    ev = sub.add_parser("evaluate", parents=[common], help="cascade records and the metrics CSV")
    ev.add_argument("--oracle-signal", action="store_true",
                    help="replace the deferral signal by the small model's correctness (s_d becomes 1)")
    sub.add_parser("report", parents=[common], help="SVG plots and summary table from the metrics CSV")
    run = sub.add_parser("run", parents=[common], help="all four stages in order")
    run.add_argument("--oracle-signal", action="store_true")
    sc = sub.add_parser("selfcheck", parents=[common], help="run the acceptance suite")
    sc.add_argument("--only", type=int, action="append", metavar="K", help="run only criterion K (repeatable)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    changes = {}
    if args.out is not None:
        changes["output_dir"] = args.out
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.alpha:
        changes["alphas"] = tuple(args.alpha)
    if args.gating is not None:
        changes["gating"] = GATING_FLAGS[args.gating]
    if args.large_model is not None:
        changes["large_model_mode"] = LARGE_MODEL_FLAGS[args.large_model]
    return cfg.replace(**changes) if changes else cfg


def _selfcheck(args) -> int:
    suite = AcceptanceSuite(args.out)
    try:
        numbers = args.only or list(range(1, 11))
        ok = True
        for n in numbers:
            result = suite.run(n)
            print(result.line(), flush=True)
            ok &= result.passed
        caught, detail = mutation_canary()
        print(f"[{'PASS' if caught else 'FAIL'}] mutation canary: {detail}", flush=True)
        ok &= caught
    finally:
        suite.close()
    print("selfcheck " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_SELFCHECK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("default", DominanceWarning)
    if args.command == "selfcheck":
        return _selfcheck(args)
    try:
        cfg = resolve_config(args)
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "pretrain":
            manifest = pipeline.cmd_pretrain(cfg)
        elif args.command == "finetune":
            manifest = pipeline.cmd_finetune(cfg)
        elif args.command == "evaluate":
            manifest = pipeline.cmd_evaluate(cfg, args.oracle_signal)
        elif args.command == "report":
            manifest = pipeline.cmd_report(cfg)
        else:
            manifest = pipeline.run_all(cfg, args.oracle_signal)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GatekeeperError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    stage = manifest["stages"]
    print(f"{args.command}: done, outputs in {cfg.output_dir} (config hash {manifest['config_hash'][:12]})")
    log.info("stage timings: %s", {k: v["seconds"] for k, v in stage.items()})
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
