"""
Sparse selection: learn scores over fixed random weights and keep the top-K
per layer as a binary mask. Also hosts the two conventional sparse-training
baselines (random pruning and magnitude pruning) used for comparison.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm.auto import tqdm

from src.gradcore import (
    NetworkSpec,
    Tensor,
    accuracy,
    backward_scores,
    backward_weights,
    cross_entropy,
    forward,
)
from src.protogen import DATA_STREAM, PRUNE_STREAM, SCORE_STREAM, rng_stream

logger = logging.getLogger(__name__)

BASELINE_MODES = ("random_prune", "magnitude_prune")


class DivergenceError(ArithmeticError):
    """Raised when a training step produces a non-finite loss."""


class BaselineError(ValueError):
    """Raised when a baseline storage target cannot be met."""


@dataclass
class ScoreState:
    """Per-layer scores plus their SGD momentum buffers."""
    scores: List[Tensor]
    momentum: List[Tensor]

    def copy(self) -> "ScoreState":
        return ScoreState([s.copy() for s in self.scores], [m.copy() for m in self.momentum])


@dataclass
class MaskSet:
    """Per-layer binary masks (uint8, values 0/1)."""
    masks: List[Tensor]

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def __getitem__(self, index: int) -> Tensor:
        return self.masks[index]

    @property
    def population(self) -> List[int]:
        return [int(m.sum()) for m in self.masks]

    def as_float(self, dtype=np.float32) -> List[Tensor]:
        return [m.astype(dtype) for m in self.masks]


@dataclass
class SelectConfig:
    """Hyperparameters of one sparse-selection run (defaults: the SGD/cosine recipe)."""
    k: float = 0.5
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    seed: int = 0
    show_progress: bool = False

    def __post_init__(self):
        if not 0 < self.k <= 1:
            raise ValueError(f"K must lie in (0, 1], got {self.k}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.schedule != "cosine":
            raise ValueError(f"Unknown schedule: {self.schedule}")

    @property
    def k_fraction(self) -> Fraction:
        return k_fraction(self.k)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    test_acc: float


@dataclass
class BaselineResult:
    weights: List[Tensor]
    masks: MaskSet
    metrics: List[EpochMetrics] = field(default_factory=list)


def k_fraction(k) -> Fraction:
    """Exact fraction for K, small enough for the container's u32/u32 fields."""
    return Fraction(str(k)).limit_denominator(2 ** 32 - 1)


def kept_count(d: int, k) -> int:
    """Ones per layer: max(1, floor(K * d))."""
    frac = k if isinstance(k, Fraction) else k_fraction(k)
    return max(1, (frac.numerator * d) // frac.denominator)


def init_scores(spec: NetworkSpec, seed: int) -> ScoreState:
    """Kaiming-uniform scores from the score stream, zero momentum."""
    rng = rng_stream(seed, SCORE_STREAM)
    scores, momentum = [], []
    for layer in spec.weighted_layers:
        bound = math.sqrt(6.0 / layer.fan_in)
        s = rng.uniform(-bound, bound, layer.d).astype(np.float32).reshape(layer.weight_shape)
        scores.append(s)
        momentum.append(np.zeros_like(s))
    return ScoreState(scores, momentum)


def top_k_mask(values: Tensor, count: int) -> Tensor:
    """uint8 mask with ones at the `count` largest values; ties go to the lower flat index."""
    flat = values.ravel()
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=np.uint8)
    mask[order[:count]] = 1
    return mask.reshape(values.shape)


def make_mask(scores: ScoreState, k) -> MaskSet:
    """Per-layer top-K selection over the scores."""
    frac = k_fraction(k) if not isinstance(k, Fraction) else k
    if not 0 < frac <= 1:
        raise ValueError(f"K must lie in (0, 1], got {k}")
    return MaskSet([top_k_mask(s, kept_count(s.size, frac)) for s in scores.scores])


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    """lr_max * 0.5 * (1 + cos(pi * t / T))."""
    if total_steps <= 0:
        return lr_max
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _sgd_update(params: List[Tensor], buffers: List[Tensor], grads: List[Tensor],
                lr: float, momentum: float, weight_decay: float) -> Tuple[List[Tensor], List[Tensor]]:
    new_params, new_buffers = [], []
    for p, buf, g in zip(params, buffers, grads):
        d_p = g.astype(p.dtype, copy=False) + weight_decay * p
        buf = momentum * buf + d_p
        new_buffers.append(buf.astype(p.dtype, copy=False))
        new_params.append((p - lr * buf).astype(p.dtype, copy=False))
    return new_params, new_buffers


def select_step(net: NetworkSpec, weights: Sequence[Tensor], scores: ScoreState, batch: Tensor,
                labels: Tensor, cfg: SelectConfig, step_index: int,
                total_steps: int) -> Tuple[ScoreState, float]:
    """One SGD step on the scores at position step_index of a total_steps cosine schedule.

    Weights are read, never written.
    """
    if total_steps < 1 or not 0 <= step_index <= total_steps:
        raise ValueError(f"step {step_index} outside a schedule of {total_steps} steps")
    masks = make_mask(scores, cfg.k_fraction).as_float(weights[0].dtype if weights else np.float32)
    logits, trace = forward(net, weights, masks, batch)
    loss, grad_logits = cross_entropy(logits, labels)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} at step {step_index}")
    grads = backward_scores(net, weights, masks, trace, grad_logits)
    lr = cosine_lr(step_index, total_steps, cfg.lr)
    new_scores, new_momentum = _sgd_update(
        scores.scores, scores.momentum, grads, lr, cfg.momentum, cfg.weight_decay)
    if not all(np.isfinite(s).all() for s in new_scores):
        raise DivergenceError(f"non-finite scores after step {step_index}")
    return ScoreState(new_scores, new_momentum), loss


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size) if n else 0


def train(net: NetworkSpec, weights: Sequence[Tensor], cfg: SelectConfig, dataset,
          scores: Optional[ScoreState] = None) -> Tuple[ScoreState, MaskSet, List[EpochMetrics]]:
    """Sparse selection over the dataset's train split, evaluated on its test split."""
    if scores is None:
        scores = init_scores(net, cfg.seed)
    rng = rng_stream(cfg.seed, DATA_STREAM)
    n = dataset.x_train.shape[0]
    per_epoch = _steps_per_epoch(n, cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    metrics: List[EpochMetrics] = []
    step = 0

    logger.info(f"Starting sparse selection: {cfg.epochs} epochs, {per_epoch} steps/epoch, K={cfg.k}")
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        progress = tqdm(_batches(n, cfg.batch_size, rng), total=per_epoch,
                        desc=f"select {epoch}/{cfg.epochs}", disable=not cfg.show_progress,
                        leave=False)
        for idx in progress:
            scores, loss = select_step(net, weights, scores, dataset.x_train[idx],
                                       dataset.y_train[idx], cfg, step, total_steps)
            losses.append(loss)
            step += 1
        mask = make_mask(scores, cfg.k_fraction)
        test_acc = accuracy(net, weights, mask.as_float(), dataset.x_test, dataset.y_test)
        row = EpochMetrics(epoch, cosine_lr(step, total_steps, cfg.lr),
                           float(np.mean(losses)) if losses else 0.0, test_acc)
        metrics.append(row)
        logger.info(f"epoch {epoch}: loss={row.train_loss:.4f} test_acc={row.test_acc:.4f}")

    return scores, make_mask(scores, cfg.k_fraction), metrics


def train_weights(net: NetworkSpec, weights: Sequence[Tensor], masks: Optional[MaskSet],
                  cfg: SelectConfig, dataset, epochs: Optional[Tuple[int, int]] = None,
                  rng: Optional[np.random.Generator] = None) -> Tuple[List[Tensor], List[EpochMetrics]]:
    """Regular SGD on the weights of a (possibly masked) network.

    epochs=(first, last) runs that slice of a cfg.epochs-long cosine schedule,
    so a run can be split around a pruning event.
    """
    first, last = epochs if epochs is not None else (1, cfg.epochs)
    rng = rng if rng is not None else rng_stream(cfg.seed, DATA_STREAM)
    n = dataset.x_train.shape[0]
    per_epoch = _steps_per_epoch(n, cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    step = (first - 1) * per_epoch
    float_masks = masks.as_float() if masks is not None else None
    params = [w.astype(np.float32).copy() for w in weights]
    if float_masks is not None:
        params = [p * m for p, m in zip(params, float_masks)]
    buffers = [np.zeros_like(p) for p in params]
    metrics: List[EpochMetrics] = []

    for epoch in range(first, last + 1):
        losses = []
        for idx in tqdm(_batches(n, cfg.batch_size, rng), total=per_epoch,
                        desc=f"train {epoch}/{cfg.epochs}", disable=not cfg.show_progress,
                        leave=False):
            logits, trace = forward(net, params, float_masks, dataset.x_train[idx])
            loss, grad_logits = cross_entropy(logits, dataset.y_train[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at step {step}")
            grads = backward_weights(net, params, float_masks, trace, grad_logits)
            lr = cosine_lr(step, total_steps, cfg.lr)
            params, buffers = _sgd_update(params, buffers, grads, lr, cfg.momentum, cfg.weight_decay)
            if float_masks is not None:
                params = [p * m for p, m in zip(params, float_masks)]
            losses.append(loss)
            step += 1
        test_acc = accuracy(net, params, float_masks, dataset.x_test, dataset.y_test)
        row = EpochMetrics(epoch, cosine_lr(step, total_steps, cfg.lr),
                           float(np.mean(losses)) if losses else 0.0, test_acc)
        metrics.append(row)
        logger.info(f"epoch {epoch}: loss={row.train_loss:.4f} test_acc={row.test_acc:.4f}")
    return params, metrics


def sparsity_for_ratio(target_storage_ratio: float, p: int) -> float:
    """Sparsity r whose conventional storage lands on the requested ratio."""
    from src.container import conventional_cost, equiv_storage_ratio

    if not 0 <= target_storage_ratio < 1:
        raise BaselineError(f"storage ratio must lie in [0, 1), got {target_storage_ratio}")
    total = conventional_cost(p, target_storage_ratio).total
    if target_storage_ratio > 0 and equiv_storage_ratio(total, p) <= 0:
        raise BaselineError(
            f"storage ratio {target_storage_ratio} is not reachable by conventional sparse storage")
    return target_storage_ratio


def baseline_keep_count(p: int, sparsity: float) -> int:
    """round((1 - r) * p), half away from zero, at least one weight."""
    keep = int(math.floor((1.0 - sparsity) * p + 0.5))
    if keep < 1:
        raise BaselineError(f"sparsity {sparsity} leaves no weights in a {p}-weight network")
    return min(keep, p)


def _global_mask(net: NetworkSpec, flat_keep: Tensor) -> MaskSet:
    masks, offset = [], 0
    for layer in net.weighted_layers:
        masks.append(flat_keep[offset:offset + layer.d].reshape(layer.weight_shape).astype(np.uint8))
        offset += layer.d
    return MaskSet(masks)


def random_prune_mask(net: NetworkSpec, keep: int, seed: int) -> MaskSet:
    """`keep` positions drawn uniformly without replacement across all layers."""
    p = net.num_params
    rng = rng_stream(seed, PRUNE_STREAM)
    flat = np.zeros(p, dtype=np.uint8)
    flat[rng.choice(p, size=keep, replace=False)] = 1
    return _global_mask(net, flat)


def magnitude_prune_mask(weights: Sequence[Tensor], net: NetworkSpec, keep: int) -> MaskSet:
    """Global top-|w| set of size `keep`."""
    magnitudes = np.concatenate([np.abs(w).ravel() for w in weights])
    return _global_mask(net, top_k_mask(magnitudes, keep).ravel())


def baseline_sparse_train(net: NetworkSpec, cfg: SelectConfig, mode: str,
                          target_storage_ratio: float, dataset, weights: Sequence[Tensor]) -> BaselineResult:
    """Sparse network trained from scratch at a conventional storage ratio.

    random_prune fixes a random mask at init; magnitude_prune trains dense for a
    quarter of the epochs, keeps the largest |w| globally, then trains survivors.
    """
    if mode not in BASELINE_MODES:
        raise BaselineError(f"Unknown baseline mode: {mode}")
    p = net.num_params
    sparsity = sparsity_for_ratio(target_storage_ratio, p)
    keep = baseline_keep_count(p, sparsity)
    logger.info(f"Starting {mode}: sparsity={sparsity:.4f}, keeping {keep}/{p} weights")

    if mode == "random_prune":
        masks = random_prune_mask(net, keep, cfg.seed)
        trained, metrics = train_weights(net, weights, masks, cfg, dataset)
        return BaselineResult(trained, masks, metrics)

    rng = rng_stream(cfg.seed, DATA_STREAM)
    dense_epochs = cfg.epochs // 4
    trained, metrics = list(weights), []
    if dense_epochs:
        trained, metrics = train_weights(net, weights, None, cfg, dataset, (1, dense_epochs), rng)
    masks = magnitude_prune_mask(trained, net, keep)
    logger.info(f"Pruned to {keep} weights after {dense_epochs} dense epochs")
    if cfg.epochs > dense_epochs:
        trained, rest = train_weights(net, trained, masks, cfg, dataset,
                                      (dense_epochs + 1, cfg.epochs), rng)
        metrics += rest
    else:
        trained = [w * m.astype(w.dtype) for w, m in zip(trained, masks)]
    return BaselineResult(trained, masks, metrics)
