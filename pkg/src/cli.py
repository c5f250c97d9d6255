"""
Command-line front end: pemn {train,baseline,eval,restore,report,inspect}.

Exit codes: 0 success, 1 divergence, 2 invalid input, 3 I/O or file format.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from src import __version__
from src.config import DATASETS, PRESETS, STRATEGIES, ExperimentConfig, load_json, log_level_from_env
from src.container import ContainerError
from src.experiments import cmd_baseline, cmd_eval, cmd_restore, cmd_train
from src.ingestion import DatasetError, load_dataset
from src.reporting import cmd_inspect, cmd_report
from src.sparse_select import BASELINE_MODES, DivergenceError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_INVALID = 2
EXIT_IO = 3

# flag dest -> ExperimentConfig field
CONFIG_FLAGS = {
    "preset": "preset", "strategy": "strategy", "d_v": "d_v", "init_scheme": "init_scheme",
    "k": "k", "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "seed": "seed",
    "repeats": "repeats", "workers": "workers", "dataset": "dataset", "data_dir": "data_dir",
    "out": "out", "explicit_prototype": "explicit_prototype",
    "double_checksum": "double_checksum", "mode": "baseline_mode",
    "target_ratio": "target_ratio", "blob_samples": "blob_samples",
}


def parse_rates(text: Optional[str]) -> List[Optional[float]]:
    """'1e-1,1e-2' -> [0.1, 0.01]; None -> [None]."""
    if text is None:
        return [None]
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"--rate expects a number or comma list, got {text!r}")


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (flags override its fields)")
    parser.add_argument("--preset", choices=PRESETS)
    parser.add_argument("--k", type=float, help="fraction of each layer kept by the mask")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float, help="peak learning rate of the cosine schedule")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--repeats", type=int)
    parser.add_argument("--workers", type=int, help="threads for independent repeats")
    parser.add_argument("--dataset", choices=DATASETS)
    parser.add_argument("--data-dir")
    parser.add_argument("--blob-samples", type=int)
    parser.add_argument("--init-scheme", choices=("kaiming_normal", "kaiming_uniform"))
    parser.add_argument("--out", help="output directory")


def _add_data_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", choices=DATASETS)
    parser.add_argument("--data-dir")
    parser.add_argument("--blob-samples", type=int)
    parser.add_argument("--seed", type=int, help="seed for generated datasets")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pemn", description="Parameter-efficient masking networks")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING (default from PEMN_LOG_LEVEL)")
    parser.add_argument("--quiet", action="store_true", help="no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="fill weights, learn masks, write metrics and container")
    _add_run_flags(train)
    train.add_argument("--strategy", choices=STRATEGIES)
    train.add_argument("--rate", help="rp prototype length as a fraction of the largest layer (comma list allowed)")
    train.add_argument("--d-v", type=int, help="rp prototype length")
    train.add_argument("--explicit-prototype", action="store_true", default=None,
                       help="store prototype values instead of relying on the seed")
    train.add_argument("--double-checksum", action="store_true", default=None)

    baseline = sub.add_parser("baseline", help="conventional sparse training at a storage ratio")
    _add_run_flags(baseline)
    baseline.add_argument("--mode", choices=BASELINE_MODES)
    baseline.add_argument("--target-ratio", type=float, help="0, or in [0.5, 1)")

    evaluate = sub.add_parser("eval", help="test accuracy of a .pemn or .npz artifact")
    evaluate.add_argument("artifact")
    _add_data_flags(evaluate)

    restore = sub.add_parser("restore", help="rebuild a container and check its recorded accuracy")
    restore.add_argument("container")
    restore.add_argument("--expect", type=float, help="accuracy to reproduce (default: summary.json)")
    _add_data_flags(restore)

    report = sub.add_parser("report", help="storage/accuracy table over artifacts")
    report.add_argument("artifacts", nargs="+", help="artifact files or run directories")
    report.add_argument("--csv", help="also write the table as CSV")

    inspect = sub.add_parser("inspect", help="dump a container's header and storage breakdown")
    inspect.add_argument("container")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    values = vars(args)
    return {field: values[flag] for flag, field in CONFIG_FLAGS.items() if values.get(flag) is not None}


def _run_configs(args: argparse.Namespace) -> List[ExperimentConfig]:
    overrides = _overrides(args)
    rates = parse_rates(getattr(args, "rate", None))
    configs = []
    for rate in rates:
        cfg = ExperimentConfig.from_sources(args.config, dict(overrides, rate=rate))
        if len(rates) > 1:
            cfg = replace(cfg, out=str(Path(cfg.out) / f"rate-{rate:g}"))
        configs.append(cfg.validate())
    return configs


def _artifact_dataset(args: argparse.Namespace, artifact: str):
    """Dataset flags, falling back to the config.json written next to the artifact."""
    snapshot = Path(artifact).parent / "config.json"
    values = load_json(snapshot) if snapshot.is_file() else {}
    keys = ("dataset", "data_dir", "seed", "blob_samples")
    base = {key: values[key] for key in keys if key in values}
    cfg = ExperimentConfig.from_sources(None, dict(base, **_overrides(args)))
    if cfg.dataset != "blobs" and not cfg.data_dir:
        raise ValueError(f"dataset {cfg.dataset} needs --data-dir")
    return load_dataset(cfg.dataset, cfg.data_dir, seed=cfg.seed, blob_samples=cfg.blob_samples)


def run(args: argparse.Namespace) -> int:
    progress = not args.quiet and sys.stderr.isatty()
    if args.command == "train":
        for cfg in _run_configs(args):
            results = cmd_train(cfg, show_progress=progress)
            for r in results:
                print(f"{r.run_dir}: test_acc={r.test_acc:.4f} total_bytes={r.total_bytes}")
        return EXIT_OK
    if args.command == "baseline":
        for cfg in _run_configs(args):
            for r in cmd_baseline(cfg, show_progress=progress):
                print(f"{r.run_dir}: test_acc={r.test_acc:.4f} total_bytes={r.total_bytes}")
        return EXIT_OK
    if args.command == "eval":
        acc = cmd_eval(args.artifact, _artifact_dataset(args, args.artifact))
        print(f"test_acc={acc:.6f}")
        return EXIT_OK
    if args.command == "restore":
        acc = cmd_restore(args.container, _artifact_dataset(args, args.container), args.expect)
        print(f"restored test_acc={acc:.6f}")
        return EXIT_OK
    if args.command == "report":
        reporter = cmd_report(args.artifacts, args.csv)
        print(reporter.format_table())
        for path, reason in reporter.failures:
            print(f"unreadable: {path}: {reason}", file=sys.stderr)
        return EXIT_IO if reporter.failures else EXIT_OK
    if args.command == "inspect":
        print(json.dumps(cmd_inspect(args.container), indent=2))
        return EXIT_OK
    raise ValueError(f"Unknown command: {args.command}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (args.log_level or log_level_from_env()).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except DivergenceError as e:
        logger.error(f"Training diverged: {e}")
        return EXIT_DIVERGED
    except (ContainerError, DatasetError, OSError) as e:
        logger.error(str(e))
        return EXIT_IO
    except ValueError as e:
        logger.error(str(e))
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
