"""
Command-line entry point for the universal backdoor lab.

    python src/cli.py run-all --config src/data/default_experiment.cfg --out runs/demo
    python src/cli.py verify-bounds --out runs/theory
    python src/cli.py sweep --out runs/t-sweep --set SWEEP_KEY=graph_t --set SWEEP_VALUES=0,5,10

Exit codes: 0 success, 2 config error, 3 stage failure, 4 bound violation.
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv

sys.path.append(os.path.dirname(__file__))

from engines.errors import ConfigError, UbdError
from engines.pipeline_engine import (
    STAGE_NAMES, ExperimentConfig, run_attack_pipeline, run_stage, run_sweep, run_theory_suite,
    verify_manifest,
)
from utils.formatters import format_db, format_percentage, format_rate

logger = logging.getLogger("ubd")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_BOUND_VIOLATION = 4

DEFAULT_CONFIG = Path(__file__).parent / "data" / "default_experiment.cfg"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="flat KEY=VALUE experiment config")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides SEED)")
    common.add_argument("--out", type=Path, default=None, help="run directory (default $UBD_OUT_DIR or runs/default)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default $UBD_LOG_LEVEL or INFO)")

    parser = argparse.ArgumentParser(prog="ubd", description="Desk-scale universal backdoor laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_NAMES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage from persisted inputs")
    sub.add_parser("run-all", parents=[common], help="run every stage in order")
    sub.add_parser("verify-bounds", parents=[common], help="Monte Carlo check of the TSI bounds")
    sweep = sub.add_parser("sweep", parents=[common], help="ablation sweep over one config key")
    sweep.add_argument("--key", default=None, help="config key to sweep (default SWEEP_KEY)")
    sweep.add_argument("--values", default=None, help="comma-separated values (default SWEEP_VALUES)")
    sweep.add_argument("--seeds", default=None, help="comma-separated seeds (default SWEEP_SEEDS)")
    sub.add_parser("verify-manifest", parents=[common], help="recheck artifact hashes of a run directory")
    sub.add_parser("report", parents=[common], help="write HTML charts for a finished run or sweep")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is not None:
        config = ExperimentConfig.from_file(args.config)
    elif DEFAULT_CONFIG.is_file():
        config = ExperimentConfig.from_file(DEFAULT_CONFIG)
    else:
        config = ExperimentConfig()
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key] = value
    if overrides:
        config = ExperimentConfig.from_mapping(overrides, base=config)
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    return config


def configure_logging(level: Optional[str]) -> None:
    level = (level or os.getenv("UBD_LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, force=True)


def _print_summary(report: dict, separability: dict) -> None:
    print(f"Benign accuracy : {format_rate(report['benign_accuracy'])}")
    print(f"Mean ASR        : {format_rate(report['mean_asr'])}")
    print(f"PSNR mean / min : {format_db(report['mean_psnr'])} / {format_db(report['min_psnr'])}")
    print(f"Mean SSIM       : {report['mean_ssim']:.4f}")
    tsi = separability["tsi"]
    print(f"Mean TSI        : {sum(tsi) / len(tsi):.4f}")
    if separability.get("spearman") is not None:
        print(f"TSI-ASR Spearman: {separability['spearman']:.4f}")


def _split(text: Optional[str], fallback: Sequence) -> List[str]:
    if text is None:
        return [str(v) for v in fallback]
    return [s.strip() for s in text.split(",") if s.strip()]


def _seeds(text: Optional[str], config: ExperimentConfig) -> List[int]:
    try:
        return [int(s) for s in _split(text, config.sweep_seeds)]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got '{text}'") from None


def _write_report(out: Path) -> List[Path]:
    from utils.charts import write_run_charts, write_sweep_chart

    if (out / "sweep_runs.csv").is_file():
        return [write_sweep_chart(out)]
    return write_run_charts(out)


def dispatch(args: argparse.Namespace) -> int:
    config = load_config(args)
    out = args.out or Path(os.getenv("UBD_OUT_DIR", "runs/default"))

    if args.command in STAGE_NAMES:
        run_stage(args.command, config, out)
        return EXIT_OK

    if args.command == "run-all":
        result = run_attack_pipeline(config, out)
        _print_summary(result.eval_report, result.separability)
        return EXIT_OK

    if args.command == "verify-bounds":
        frame = run_theory_suite(config, out)
        violations = int(frame["violated"].sum())
        print(f"{len(frame)} grid points, {violations} bound violations (written to {out / 'bounds.csv'})")
        return EXIT_BOUND_VIOLATION if violations else EXIT_OK

    if args.command == "sweep":
        key = args.key or config.sweep_key
        if not key:
            raise ConfigError("sweep needs --key or SWEEP_KEY")
        runs = run_sweep(config, key, _split(args.values, config.sweep_values), _seeds(args.seeds, config), out)
        for value, group in runs.groupby("value", sort=False):
            print(f"{key}={value}: mean ASR {format_percentage(100 * group['mean_asr'].mean())}, "
                  f"BA {format_percentage(100 * group['benign_accuracy'].mean())}")
        return EXIT_OK

    if args.command == "verify-manifest":
        problems = verify_manifest(out)
        if problems:
            print("hash mismatch or missing: " + ", ".join(problems))
            return EXIT_STAGE
        print("manifest verified")
        return EXIT_OK

    if args.command == "report":
        for path in _write_report(out):
            print(f"wrote {path}")
        return EXIT_OK

    raise ConfigError(f"unknown command '{args.command}'")


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return dispatch(args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (UbdError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
