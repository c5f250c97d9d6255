"""
Experiment orchestration behind the CLI verbs.

A run directory holds:
- config.json   resolved config snapshot
- metrics.csv   epoch, lr, train_loss, test_acc
- summary.json  final accuracy, unique count and storage figures
- model.pemn    PEMN container (mask strategies) or model.npz (trained weights)
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src import container
from src.config import ExperimentConfig
from src.gradcore import LayerSpec, NetworkSpec, Tensor, accuracy, build_preset
from src.ingestion import Dataset, load_dataset
from src.protogen import PrototypeSource, Strategy, fill, unique_count
from src.sparse_select import (
    EpochMetrics,
    MaskSet,
    baseline_sparse_train,
    train,
    train_weights,
)

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "lr", "train_loss", "test_acc"]
CLI_STRATEGIES = {
    "dense-mask": Strategy.DENSE,
    "one-layer": Strategy.ONE_LAYER,
    "mp": Strategy.MP,
    "rp": Strategy.RP,
}


class RestoreMismatchError(ValueError):
    """Raised when a restored model does not reproduce its recorded accuracy."""


@dataclass
class RunResult:
    seed: int
    run_dir: Path
    artifact: Path
    test_acc: float
    train_loss: float
    unique_count: int
    total_bytes: int
    ratio: float


def prototype_source(cfg: ExperimentConfig, seed: int) -> PrototypeSource:
    strategy = CLI_STRATEGIES[cfg.strategy]
    return PrototypeSource(strategy, seed, rp_rate=cfg.rate, d_v=cfg.d_v, init_scheme=cfg.init_scheme)


def spec_to_dict(spec: NetworkSpec) -> Dict[str, Any]:
    return {
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "layers": [{k: v for k, v in asdict(layer).items() if v or k == "kind"} for layer in spec.layers],
    }


def spec_from_dict(data: Dict[str, Any]) -> NetworkSpec:
    layers = tuple(LayerSpec(**layer) for layer in data["layers"])
    return NetworkSpec(layers, tuple(data["input_shape"]), int(data["num_classes"]))


def write_metrics(path: Path, rows: Sequence[EpochMetrics]) -> None:
    frame = pd.DataFrame([asdict(r) for r in rows], columns=METRICS_COLUMNS)
    frame.to_csv(path, index=False)


def _write_json(path: Path, data: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def save_npz(path: Path, spec: NetworkSpec, weights: Sequence[Tensor], masks: MaskSet) -> None:
    arrays = {f"w{i}": w for i, w in enumerate(weights)}
    arrays.update({f"m{i}": m for i, m in enumerate(masks)})
    arrays["spec"] = np.array(json.dumps(spec_to_dict(spec), sort_keys=True))
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_npz(path) -> tuple:
    """(spec, weights, masks) from a trained-weights artifact."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"No such artifact: {path}")
    with np.load(path, allow_pickle=False) as data:
        spec = spec_from_dict(json.loads(str(data["spec"])))
        count = len(spec.weighted_layers)
        weights = [data[f"w{i}"].astype(np.float32) for i in range(count)]
        masks = MaskSet([data[f"m{i}"].astype(np.uint8) for i in range(count)])
    return spec, weights, masks


def _run_dirs(cfg: ExperimentConfig) -> List[Path]:
    out = Path(cfg.out)
    if len(cfg.seeds) == 1:
        return [out]
    return [out / f"run-{seed}" for seed in cfg.seeds]


def _final(rows: Sequence[EpochMetrics]) -> EpochMetrics:
    return rows[-1] if rows else EpochMetrics(0, 0.0, 0.0, float("nan"))


def _train_one(cfg: ExperimentConfig, dataset: Dataset, seed: int, run_dir: Path,
               show_progress: bool) -> RunResult:
    run_cfg = replace(cfg, repeats=1, seeds=[seed], out=str(run_dir))
    run_dir.mkdir(parents=True, exist_ok=True)
    run_cfg.save(run_dir / "config.json")
    spec = build_preset(cfg.preset, dataset.input_shape, dataset.num_classes)
    select_cfg = cfg.select_config(seed, show_progress)

    if cfg.strategy == "dense":
        src = PrototypeSource(Strategy.DENSE, seed, init_scheme=cfg.init_scheme)
        weights, rows = train_weights(spec, fill(spec, src).weights, None, select_cfg, dataset)
        masks = MaskSet([np.ones(w.shape, dtype=np.uint8) for w in weights])
        artifact = run_dir / "model.npz"
        save_npz(artifact, spec, weights, masks)
        final = _final(rows)
        test_acc = accuracy(spec, weights, None, dataset.x_test, dataset.y_test)
        p = spec.num_params
        summary = {"strategy": "dense", "test_acc": test_acc, "unique_count": p,
                   "total_bytes": 4 * p, "ratio": 0.0, "equiv_ratio": 0.0}
    else:
        src = prototype_source(cfg, seed).resolve(spec)
        filled = fill(spec, src)
        scores, masks, rows = train(spec, filled.weights, select_cfg, dataset)
        model = container.PemnModel.build(spec, src, masks, cfg.k, filled,
                                          explicit_prototype=cfg.explicit_prototype,
                                          double_checksum=cfg.double_checksum)
        artifact = run_dir / "model.pemn"
        container.save(model, artifact)
        report = container.storage_cost(model)
        test_acc = accuracy(spec, filled.weights, masks.as_float(), dataset.x_test, dataset.y_test)
        final = _final(rows)
        summary = {"strategy": cfg.strategy, "test_acc": test_acc,
                   "unique_count": unique_count(src, spec), "d_v": src.d_v,
                   "total_bytes": report.total, "c_w": report.c_w, "c_m": report.c_m,
                   "ratio": report.ratio,
                   "equiv_ratio": container.equiv_storage_ratio(report.total, spec.num_params)}

    write_metrics(run_dir / "metrics.csv", rows)
    summary.update({"seed": seed, "preset": cfg.preset, "dataset": cfg.dataset,
                    "num_params": spec.num_params, "train_loss": final.train_loss})
    _write_json(run_dir / "summary.json", summary)
    logger.info(f"Run {run_dir} finished: test_acc={test_acc:.4f}")
    return RunResult(seed, run_dir, artifact, test_acc, final.train_loss,
                     int(summary["unique_count"]), int(summary["total_bytes"]), float(summary["ratio"]))


def _baseline_one(cfg: ExperimentConfig, dataset: Dataset, seed: int, run_dir: Path,
                  show_progress: bool) -> RunResult:
    run_cfg = replace(cfg, repeats=1, seeds=[seed], out=str(run_dir))
    run_dir.mkdir(parents=True, exist_ok=True)
    run_cfg.save(run_dir / "config.json")
    spec = build_preset(cfg.preset, dataset.input_shape, dataset.num_classes)
    src = PrototypeSource(Strategy.DENSE, seed, init_scheme=cfg.init_scheme)
    select_cfg = cfg.select_config(seed, show_progress)
    result = baseline_sparse_train(spec, select_cfg, cfg.baseline_mode, cfg.target_ratio,
                                   dataset, fill(spec, src).weights)
    artifact = run_dir / "model.npz"
    save_npz(artifact, spec, result.weights, result.masks)
    write_metrics(run_dir / "metrics.csv", result.metrics)

    p = spec.num_params
    kept = sum(result.masks.population)
    sparsity = 1.0 - kept / p
    total = container.conventional_cost(p, sparsity).total
    test_acc = accuracy(spec, result.weights, result.masks.as_float(), dataset.x_test, dataset.y_test)
    final = _final(result.metrics)
    _write_json(run_dir / "summary.json", {
        "strategy": f"baseline-{cfg.baseline_mode}", "seed": seed, "preset": cfg.preset,
        "dataset": cfg.dataset, "num_params": p, "test_acc": test_acc,
        "train_loss": final.train_loss, "unique_count": kept, "total_bytes": total,
        "sparsity": sparsity, "ratio": 1.0 - total / (4 * p),
        "equiv_ratio": container.equiv_storage_ratio(total, p),
    })
    return RunResult(seed, run_dir, artifact, test_acc, final.train_loss, kept, total,
                     1.0 - total / (4 * p))


def _repeat(cfg: ExperimentConfig, runner, dataset: Optional[Dataset] = None,
            show_progress: bool = False) -> List[RunResult]:
    cfg.validate()
    if dataset is None:
        dataset = load_dataset(cfg.dataset, cfg.data_dir, seed=cfg.seed, blob_samples=cfg.blob_samples)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    dirs = _run_dirs(cfg)
    jobs = list(zip(cfg.seeds, dirs))
    progress = show_progress and cfg.workers == 1
    if cfg.workers == 1 or len(jobs) == 1:
        results = [runner(cfg, dataset, seed, run_dir, progress) for seed, run_dir in jobs]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(runner, cfg, dataset, seed, run_dir, False) for seed, run_dir in jobs]
            results = [f.result() for f in futures]
    if len(results) > 1:
        write_summary(out / "summary.csv", results)
    return results


def write_summary(path: Path, results: Sequence[RunResult]) -> pd.DataFrame:
    """Mean and sample standard deviation of each metric over repeats."""
    frame = pd.DataFrame([{
        "seed": r.seed, "test_acc": r.test_acc, "train_loss": r.train_loss,
        "unique_count": r.unique_count, "total_bytes": r.total_bytes, "ratio": r.ratio,
    } for r in results])
    metrics = ["test_acc", "train_loss", "unique_count", "total_bytes", "ratio"]
    summary = pd.DataFrame({
        "metric": metrics,
        "mean": [frame[m].mean() for m in metrics],
        "std": [frame[m].std(ddof=1) for m in metrics],
        "n": len(frame),
    })
    summary.to_csv(path, index=False)
    logger.info(f"Summary over {len(frame)} repeats written to {path}")
    return summary


def cmd_train(cfg: ExperimentConfig, dataset: Optional[Dataset] = None,
              show_progress: bool = False) -> List[RunResult]:
    """Fill weights per strategy, learn masks (or train dense), write CSV and artifact."""
    return _repeat(cfg, _train_one, dataset, show_progress)


def cmd_baseline(cfg: ExperimentConfig, dataset: Optional[Dataset] = None,
                 show_progress: bool = False) -> List[RunResult]:
    """Conventional sparse training at cfg.target_ratio."""
    return _repeat(cfg, _baseline_one, dataset, show_progress)


def evaluate_artifact(path, dataset: Dataset) -> float:
    """Test accuracy of a .pemn or .npz artifact."""
    path = Path(path)
    if path.suffix == ".npz":
        spec, weights, masks = load_npz(path)
        return accuracy(spec, weights, masks.as_float(), dataset.x_test, dataset.y_test)
    model = container.load(path)
    return accuracy(model.spec, model.weights, model.masks.as_float(), dataset.x_test, dataset.y_test)


def cmd_eval(artifact, dataset: Dataset) -> float:
    acc = evaluate_artifact(artifact, dataset)
    logger.info(f"{artifact}: test_acc={acc:.4f}")
    return acc


def recorded_accuracy(artifact) -> Optional[float]:
    summary = Path(artifact).parent / "summary.json"
    if not summary.is_file():
        return None
    with open(summary, "r", encoding="utf-8") as f:
        return json.load(f).get("test_acc")


def cmd_restore(artifact, dataset: Dataset, expected: Optional[float] = None) -> float:
    """Rebuild a container's network from its seed or prototype and check its accuracy."""
    model = container.load(artifact)
    acc = accuracy(model.spec, model.weights, model.masks.as_float(), dataset.x_test, dataset.y_test)
    if expected is None:
        expected = recorded_accuracy(artifact)
    if expected is not None and acc != expected:
        raise RestoreMismatchError(f"restored accuracy {acc} != recorded {expected}")
    logger.info(f"Restored {artifact}: test_acc={acc:.4f}")
    return acc
