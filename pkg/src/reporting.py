"""
Storage and accuracy reporting over saved artifacts.

Puts .pemn containers and .npz weight artifacts on one axis:
- unique stored scalars
- total bytes
- equivalent conventional sparsity (the storage ratio)
- test accuracy recorded next to the artifact
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src import container
from src.experiments import CLI_STRATEGIES, load_npz
from src.protogen import unique_count

logger = logging.getLogger(__name__)

ARTIFACT_NAMES = ("model.pemn", "model.npz")
STRATEGY_NAMES = {strategy: name for name, strategy in CLI_STRATEGIES.items()}
REPORT_COLUMNS = ["artifact", "strategy", "unique_count", "total_bytes", "ratio",
                  "compression", "accuracy"]


@dataclass
class ReportRow:
    """One artifact on the storage/accuracy axis."""
    artifact: str
    strategy: str
    unique_count: int
    total_bytes: int
    ratio: float  # equivalent conventional sparsity
    compression: float  # 1 - total / dense fp32 bytes
    accuracy: float = float("nan")


def find_artifacts(paths: Iterable) -> List[Path]:
    """Expand directories into the artifacts they contain, sorted."""
    found = []
    for path in map(Path, paths):
        if path.is_dir():
            for name in ARTIFACT_NAMES:
                found.extend(sorted(path.rglob(name)))
        else:
            found.append(path)
    return found


def _summary(artifact: Path) -> Dict:
    path = artifact.parent / "summary.json"
    if not path.is_file():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def pemn_row(artifact: Path) -> ReportRow:
    model = container.load(artifact)
    report = container.storage_cost(model)
    p = model.spec.num_params
    summary = _summary(artifact)
    return ReportRow(
        artifact=str(artifact),
        strategy=summary.get("strategy", STRATEGY_NAMES[model.source.strategy]),
        unique_count=unique_count(model.source, model.spec),
        total_bytes=report.total,
        ratio=container.equiv_storage_ratio(report.total, p),
        compression=report.ratio,
        accuracy=float(summary.get("test_acc", float("nan"))),
    )


def npz_row(artifact: Path) -> ReportRow:
    """Dense weights cost 4p bytes; pruned ones cost their conventional sparse size."""
    spec, _, masks = load_npz(artifact)
    p = spec.num_params
    kept = sum(masks.population)
    if kept == p:
        strategy, total = "dense", 4 * p
    else:
        strategy, total = "sparse", container.conventional_cost(p, 1.0 - kept / p).total
    summary = _summary(artifact)
    return ReportRow(
        artifact=str(artifact),
        strategy=summary.get("strategy", strategy),
        unique_count=kept,
        total_bytes=total,
        ratio=container.equiv_storage_ratio(total, p),
        compression=1.0 - total / (4 * p),
        accuracy=float(summary.get("test_acc", float("nan"))),
    )


class StorageReporter:
    """Collects artifact rows, skipping (and remembering) the unreadable ones."""

    def __init__(self, paths: Sequence):
        self.paths = find_artifacts(paths)
        self.rows: List[ReportRow] = []
        self.failures: List[Tuple[str, str]] = []

    def collect(self) -> "StorageReporter":
        logger.info(f"Reading {len(self.paths)} artifacts")
        for path in self.paths:
            try:
                row = npz_row(path) if path.suffix == ".npz" else pemn_row(path)
            except (OSError, ValueError, KeyError) as e:
                logger.warning(f"Skipping {path}: {e}")
                self.failures.append((str(path), str(e)))
                continue
            self.rows.append(row)
        return self

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(r) for r in self.rows], columns=REPORT_COLUMNS)
        return frame.sort_values(["ratio", "artifact"], ascending=[False, True],
                                 kind="mergesort").reset_index(drop=True)

    def export_csv(self, output_path) -> pd.DataFrame:
        frame = self.to_frame()
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(output_path, index=False)
        logger.info(f"Storage report exported to {output_path}")
        return frame

    def format_table(self) -> str:
        frame = self.to_frame()
        if frame.empty:
            return "(no readable artifacts)"
        return frame.to_string(index=False, formatters={
            "ratio": "{:.4f}".format,
            "compression": "{:.4f}".format,
            "accuracy": lambda a: "-" if np.isnan(a) else f"{a:.4f}",
        })


def cmd_report(paths: Sequence, csv_path: Optional[str] = None) -> StorageReporter:
    """Aligned text table (and optional CSV) sorted by storage ratio, highest first."""
    reporter = StorageReporter(paths).collect()
    if csv_path:
        reporter.export_csv(csv_path)
    return reporter


def describe_container(model: container.PemnModel) -> Dict:
    report = container.storage_cost(model)
    layers = []
    for slot, layer in enumerate(model.spec.weighted_layers):
        mask = model.masks[slot]
        layers.append({
            "kind": layer.kind,
            "shape": list(layer.weight_shape),
            "scale": float(model.scales[slot]),
            "kept": int(mask.sum()),
            "density": float(mask.mean()),
        })
    return {
        "strategy": model.source.strategy.value,
        "seed": model.source.seed,
        "d_v": model.source.d_v,
        "init_scheme": model.source.init_scheme,
        "k": f"{model.k.numerator}/{model.k.denominator}",
        "explicit_prototype": model.explicit_prototype,
        "double_checksum": model.double_checksum,
        "num_params": model.spec.num_params,
        "unique_count": unique_count(model.source, model.spec),
        "storage": asdict(report),
        "layers": layers,
    }


def cmd_inspect(path) -> Dict:
    """Header, per-layer records and storage breakdown of one container."""
    return describe_container(container.load(path))
