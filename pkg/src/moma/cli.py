"""``moma`` command line: one subcommand per run type plus the ablation grid and gradient checks.

Exit codes: 0 success, 2 configuration error, 3 runtime failure. Failures
print a single JSON object on stderr; successes print one on stdout.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config, write_snapshot
from .data import DatasetError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
OUTPUT_ROOT_ENV = "MOMA_OUTPUT_ROOT"

SUBCOMMANDS = {
    "pretrain-moco": "MoCo contrastive pre-training of a teacher",
    "pretrain-mae": "masked-autoencoder pre-training of a teacher",
    "distill": "distil frozen teacher(s) into a masked student",
    "finetune": "end-to-end supervised fine-tuning with a linear head",
    "probe": "linear probe on frozen features",
    "eval": "top-1 accuracy of a classifier checkpoint",
    "ablate": "distillation grid over modes, mask ratios and sizes",
    "grad-check": "finite-difference gradient checks of every primitive and the distillation loss",
}


class _Parser(argparse.ArgumentParser):
    """Usage errors become config errors with a JSON line instead of argparse's default text."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moma", description="Masked distillation of MoCo and MAE teachers into a ViT student.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="TOML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value; repeatable")
        p.add_argument("--out", type=Path, help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>/seed<N>)")
        p.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
        if name == "ablate":
            p.add_argument("--jobs", type=int, help="cells run in parallel (default ablate.jobs)")
        if name == "grad-check":
            p.add_argument("--seeds", type=int, default=20, help="random seeds per case")
    return parser


def default_out(command: str, seed: int) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command / f"seed{seed}"


def _grad_check(cfg: dict, out: Path, seeds: int) -> dict:
    from .gradcheck import run_suite

    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out / "config.resolved.toml")
    results = run_suite(range(cfg["run"]["seed"], cfg["run"]["seed"] + seeds))
    with open(out / "grad_check.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "seed", "max_rel_error", "tolerance", "passed"])
        for r in results:
            writer.writerow([r.name, r.seed, repr(r.report.max_rel_error), r.report.tolerance, r.report.passed])
    failed = sorted({r.name for r in results if not r.report.passed})
    summary = {"cases": len(results), "failed": failed,
               "max_rel_error": max(r.report.max_rel_error for r in results)}
    (out / "DONE").write_text(json.dumps(summary) + "\n")
    return summary


def dispatch(args) -> tuple[int, dict]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    cfg = load_config(args.config, overrides, kind=args.command)
    out = args.out or default_out(args.command, cfg["run"]["seed"])

    if args.command == "grad-check":
        summary = _grad_check(cfg, out, args.seeds)
        return (EXIT_RUNTIME if summary["failed"] else EXIT_OK), {"out": str(out), **summary}
    if args.command == "ablate":
        from .ablate import run_ablation

        summary = run_ablation(cfg, out, args.jobs)
        return EXIT_OK, {"out": str(out), "summary": str(summary)}

    from .train import RUNNERS

    result = RUNNERS[args.command](cfg, out)
    payload = {"out": str(result.out_dir), "checkpoint": str(result.checkpoint), "steps": result.steps}
    if result.final_loss is not None:
        payload["final_loss"] = result.final_loss
    if result.accuracy is not None:
        payload["accuracy"] = result.accuracy
    return EXIT_OK, payload


def _fail(code: int, kind: str, exc: BaseException) -> int:
    message = str(exc).replace("\n", " ")
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        code, payload = dispatch(args)
    except (ConfigError, DatasetError, FileNotFoundError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except Exception as exc:
        logging.getLogger(__name__).debug("run failed", exc_info=True)
        return _fail(EXIT_RUNTIME, "runtime", exc)
    print(json.dumps(payload, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
