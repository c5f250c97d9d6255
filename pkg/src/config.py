"""
Experiment configuration.

Values are layered from lowest to highest precedence: dataclass defaults,
environment (a .env file is honoured), a JSON config file, then CLI flags.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from src.sparse_select import BASELINE_MODES, SelectConfig

logger = logging.getLogger(__name__)

PRESETS = ("mlp_small", "mlp_wide", "conv_small")
STRATEGIES = ("dense", "dense-mask", "one-layer", "mp", "rp")
DATASETS = ("mnist", "cifar10", "blobs")
INIT_SCHEMES = ("kaiming_normal", "kaiming_uniform")

ENV_DATA_DIR = "PEMN_DATA_DIR"
ENV_OUT_DIR = "PEMN_OUT_DIR"
ENV_LOG_LEVEL = "PEMN_LOG_LEVEL"


@dataclass
class ExperimentConfig:
    """One experiment: network, fill strategy, optimizer recipe, data and outputs."""
    preset: str = "mlp_small"
    strategy: str = "dense-mask"
    rate: Optional[float] = None
    d_v: Optional[int] = None
    init_scheme: str = "kaiming_normal"
    k: float = 0.5
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    repeats: int = 1
    seeds: List[int] = field(default_factory=list)
    workers: int = 1
    dataset: str = "mnist"
    data_dir: Optional[str] = None
    out: str = "runs/latest"
    explicit_prototype: bool = False
    double_checksum: bool = False
    baseline_mode: str = "random_prune"
    target_ratio: float = 0.94
    blob_samples: int = 2000

    @classmethod
    def from_sources(cls, config_path: Optional[str] = None,
                     overrides: Optional[Dict[str, Any]] = None) -> "ExperimentConfig":
        """Build a config from env, an optional JSON file and flag overrides."""
        load_dotenv()
        values: Dict[str, Any] = {}
        if os.environ.get(ENV_DATA_DIR):
            values["data_dir"] = os.environ[ENV_DATA_DIR]
        if os.environ.get(ENV_OUT_DIR):
            values["out"] = os.environ[ENV_OUT_DIR]
        if config_path:
            values.update(load_json(config_path))
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"Unknown config fields: {', '.join(unknown)}")
        return cls(**values)

    def validate(self) -> "ExperimentConfig":
        """Check every field; raises ValueError listing all problems."""
        problems = []
        if self.preset not in PRESETS:
            problems.append(f"preset must be one of {PRESETS}")
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy must be one of {STRATEGIES}")
        if self.dataset not in DATASETS:
            problems.append(f"dataset must be one of {DATASETS}")
        if self.init_scheme not in INIT_SCHEMES:
            problems.append(f"init_scheme must be one of {INIT_SCHEMES}")
        if self.strategy == "rp":
            if (self.rate is None) == (self.d_v is None):
                problems.append("rp needs exactly one of rate or d_v")
            if self.rate is not None and not 0 < self.rate <= 1:
                problems.append("rate must lie in (0, 1]")
            if self.d_v is not None and self.d_v < 1:
                problems.append("d_v must be >= 1")
        elif self.rate is not None or self.d_v is not None:
            problems.append("rate/d_v only apply to strategy rp")
        if not 0 < self.k <= 1:
            problems.append("k must lie in (0, 1]")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if self.repeats < 1:
            problems.append("repeats must be >= 1")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if self.seeds and len(self.seeds) != self.repeats:
            problems.append("seeds must list one seed per repeat")
        if not 0 <= self.seed < 2 ** 64:
            problems.append("seed must be an unsigned 64-bit integer")
        if self.baseline_mode not in BASELINE_MODES:
            problems.append(f"baseline_mode must be one of {BASELINE_MODES}")
        if not 0 <= self.target_ratio < 1:
            problems.append("target_ratio must lie in [0, 1)")
        if self.dataset != "blobs" and not self.data_dir:
            problems.append(f"dataset {self.dataset} needs data_dir (or {ENV_DATA_DIR})")
        if self.preset == "conv_small" and self.dataset == "blobs":
            problems.append("conv_small needs image data")
        if problems:
            raise ValueError("Invalid experiment config: " + "; ".join(problems))
        if not self.seeds:
            self.seeds = [self.seed + i for i in range(self.repeats)]
        return self

    def select_config(self, seed: Optional[int] = None, show_progress: bool = False) -> SelectConfig:
        return SelectConfig(k=self.k, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                            momentum=self.momentum, weight_decay=self.weight_decay,
                            seed=self.seed if seed is None else seed, show_progress=show_progress)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path) -> None:
        """Write the resolved config snapshot used for provenance."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def load_json(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"No such config file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return data


def log_level_from_env(default: str = "INFO") -> str:
    load_dotenv()
    return os.environ.get(ENV_LOG_LEVEL, default).upper()
