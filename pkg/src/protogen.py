"""
Fixed random weights for PEMN networks.

Every weight in a network is regenerated from a PrototypeSource (strategy,
seed and a few parameters). Four ways of filling a network are supported:
- dense:      every layer drawn independently
- one_layer:  one prototype per distinct parameter space, copied to repeats
- mp:         the largest layer is the prototype, others take its prefix
- rp:         a short random vector tiled cyclically over every layer

All draws come from stream WEIGHT_STREAM in layer order, so the strategies
agree wherever their definitions coincide.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.gradcore import LayerSpec, NetworkSpec, Tensor

logger = logging.getLogger(__name__)

WEIGHT_STREAM = 0
SCORE_STREAM = 1
DATA_STREAM = 2
PRUNE_STREAM = 3

INIT_SCHEMES = ("kaiming_normal", "kaiming_uniform")


class PrototypeError(ValueError):
    """Raised for an unusable prototype source."""


class Strategy(Enum):
    DENSE = "dense"
    ONE_LAYER = "one_layer"
    MP = "mp"
    RP = "rp"

    @property
    def code(self) -> int:
        """Container strategy byte."""
        return _STRATEGY_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "Strategy":
        for strategy, value in _STRATEGY_CODES.items():
            if value == code:
                return strategy
        raise PrototypeError(f"Unknown strategy code: {code}")


_STRATEGY_CODES = {Strategy.DENSE: 0, Strategy.ONE_LAYER: 1, Strategy.MP: 2, Strategy.RP: 3}


@dataclass(frozen=True)
class PrototypeSource:
    """Everything needed to regenerate a network's fixed weights."""
    strategy: Strategy
    seed: int
    rp_rate: Optional[float] = None
    d_v: Optional[int] = None
    init_scheme: str = "kaiming_normal"

    def __post_init__(self):
        if not isinstance(self.strategy, Strategy):
            object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not 0 <= self.seed < 2 ** 64:
            raise PrototypeError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.init_scheme not in INIT_SCHEMES:
            raise PrototypeError(f"Unknown init scheme: {self.init_scheme}")
        if self.strategy is Strategy.RP:
            if (self.rp_rate is None) == (self.d_v is None):
                raise PrototypeError("rp needs exactly one of rp_rate or d_v")
            if self.d_v is not None and self.d_v < 1:
                raise PrototypeError(f"d_v must be >= 1, got {self.d_v}")
            if self.rp_rate is not None and not 0 < self.rp_rate <= 1:
                raise PrototypeError(f"rp_rate must lie in (0, 1], got {self.rp_rate}")
        elif self.rp_rate is not None or self.d_v is not None:
            raise PrototypeError(f"rp_rate/d_v only apply to rp, not {self.strategy.value}")

    def resolve(self, spec: NetworkSpec) -> "PrototypeSource":
        """Return a copy with d_v filled in from rp_rate."""
        if self.strategy is not Strategy.RP or self.d_v is not None:
            return self
        return replace(self, d_v=rp_len_from_rate(self.rp_rate, spec), rp_rate=None)


@dataclass
class FilledWeights:
    """Fixed weights of a network together with their compact description.

    raw[i] * scales[i] gives the weights of the i-th weighted layer; payload
    holds the unique scalars a container has to store to rebuild raw.
    """
    raw: List[Tensor]
    scales: List[np.float32]
    payload: Tensor
    weights: List[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not self.weights:
            self.weights = [apply_scale(r, s) for r, s in zip(self.raw, self.scales)]


def apply_scale(raw: Tensor, scale: float) -> Tensor:
    """float32 product used everywhere weights are materialized."""
    return (raw.astype(np.float32, copy=False) * np.float32(scale)).astype(np.float32)


def rng_stream(seed: int, stream_id: int) -> np.random.Generator:
    """PCG64 generator for one (seed, stream) pair."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream_id)])))


def _kaiming_draw(rng: np.random.Generator, n: int, fan_in: int, scheme: str) -> Tensor:
    if scheme == "kaiming_normal":
        values = rng.standard_normal(n) * math.sqrt(2.0 / fan_in)
    else:
        bound = math.sqrt(6.0 / fan_in)
        values = rng.uniform(-bound, bound, n)
    return values.astype(np.float32)


def _ones(count: int) -> List[np.float32]:
    return [np.float32(1.0)] * count


def init_dense(spec: NetworkSpec, src: PrototypeSource) -> FilledWeights:
    """Every weighted layer drawn independently with kaiming statistics."""
    rng = rng_stream(src.seed, WEIGHT_STREAM)
    raw = []
    for layer in spec.weighted_layers:
        raw.append(_kaiming_draw(rng, layer.d, layer.fan_in, src.init_scheme).reshape(layer.weight_shape))
    payload = _concat(raw)
    return FilledWeights(raw=raw, scales=_ones(len(raw)), payload=payload)


def _space(layer: LayerSpec) -> Tuple:
    return (layer.kind, layer.weight_shape)


def prototype_groups(spec: NetworkSpec) -> Dict[Tuple, List[int]]:
    """Parameter space -> weighted-layer slots sharing it, in first-seen order."""
    groups: Dict[Tuple, List[int]] = {}
    for slot, layer in enumerate(spec.weighted_layers):
        groups.setdefault(_space(layer), []).append(slot)
    return groups


def one_layer_fill(spec: NetworkSpec, src: PrototypeSource) -> FilledWeights:
    """One prototype per distinct (kind, shape); repeats get exact copies."""
    rng = rng_stream(src.seed, WEIGHT_STREAM)
    layers = spec.weighted_layers
    prototypes: Dict[Tuple, Tensor] = {}
    raw = []
    for layer in layers:
        key = _space(layer)
        if key not in prototypes:
            prototypes[key] = _kaiming_draw(
                rng, layer.d, layer.fan_in, src.init_scheme).reshape(layer.weight_shape)
        raw.append(prototypes[key].copy())
    payload = _concat(list(prototypes.values()))
    logger.debug(f"one_layer: {len(prototypes)} prototypes for {len(layers)} layers")
    return FilledWeights(raw=raw, scales=_ones(len(raw)), payload=payload)


def max_layer_slot(spec: NetworkSpec) -> int:
    """Weighted-layer slot with the largest d_l; ties go to the shallower layer."""
    layers = spec.weighted_layers
    if not layers:
        raise PrototypeError("network has no weighted layers")
    sizes = [layer.d for layer in layers]
    return sizes.index(max(sizes))


def mp_fill(spec: NetworkSpec, src: PrototypeSource) -> FilledWeights:
    """Max-layer padding: every layer takes the first d_l values of the largest layer."""
    m = max_layer_slot(spec)
    layers = spec.weighted_layers
    largest = layers[m]
    rng = rng_stream(src.seed, WEIGHT_STREAM)
    prototype = _kaiming_draw(rng, largest.d, largest.fan_in, src.init_scheme)
    raw = [prototype[:layer.d].reshape(layer.weight_shape).copy() for layer in layers]
    scales = [np.float32(math.sqrt(largest.fan_in / layer.fan_in)) for layer in layers]
    return FilledWeights(raw=raw, scales=scales, payload=prototype)


def rp_fill(spec: NetworkSpec, src: PrototypeSource) -> FilledWeights:
    """Random-vector padding: v_pro tiled cyclically to each layer's length."""
    src = src.resolve(spec)
    if src.d_v is None or src.d_v < 1:
        raise PrototypeError(f"d_v must be >= 1, got {src.d_v}")
    rng = rng_stream(src.seed, WEIGHT_STREAM)
    v_pro = rng.standard_normal(src.d_v).astype(np.float32)
    layers = spec.weighted_layers
    raw = [_tile(v_pro, layer.d).reshape(layer.weight_shape) for layer in layers]
    scales = [np.float32(math.sqrt(2.0 / layer.fan_in)) for layer in layers]
    return FilledWeights(raw=raw, scales=scales, payload=v_pro)


def _tile(vector: Tensor, length: int) -> Tensor:
    reps = -(-length // vector.size)
    return np.tile(vector, reps)[:length].copy()


def _concat(arrays: List[Tensor]) -> Tensor:
    if not arrays:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate([a.ravel() for a in arrays]).astype(np.float32)


def fill(spec: NetworkSpec, src: PrototypeSource) -> FilledWeights:
    """Dispatch to the filler named by src.strategy."""
    fillers = {
        Strategy.DENSE: init_dense,
        Strategy.ONE_LAYER: one_layer_fill,
        Strategy.MP: mp_fill,
        Strategy.RP: rp_fill,
    }
    filled = fillers[src.strategy](spec, src)
    logger.debug(f"{src.strategy.value} fill: {filled.payload.size} unique values")
    return filled


def fill_from_payload(spec: NetworkSpec, strategy: Strategy, payload: Tensor,
                      scales: List[float]) -> FilledWeights:
    """Rebuild FilledWeights from an explicitly stored payload."""
    payload = np.asarray(payload, dtype=np.float32).ravel()
    layers = spec.weighted_layers
    if len(scales) != len(layers):
        raise PrototypeError(f"expected {len(layers)} scales, got {len(scales)}")
    raw: List[Tensor] = []
    if strategy is Strategy.DENSE:
        expected = sum(layer.d for layer in layers)
        _check_payload(payload, expected)
        offset = 0
        for layer in layers:
            raw.append(payload[offset:offset + layer.d].reshape(layer.weight_shape).copy())
            offset += layer.d
    elif strategy is Strategy.ONE_LAYER:
        groups = prototype_groups(spec)
        expected = sum(layers[slots[0]].d for slots in groups.values())
        _check_payload(payload, expected)
        raw = [None] * len(layers)
        offset = 0
        for slots in groups.values():
            layer = layers[slots[0]]
            block = payload[offset:offset + layer.d].reshape(layer.weight_shape)
            offset += layer.d
            for slot in slots:
                raw[slot] = block.copy()
    elif strategy is Strategy.MP:
        _check_payload(payload, layers[max_layer_slot(spec)].d)
        raw = [payload[:layer.d].reshape(layer.weight_shape).copy() for layer in layers]
    else:
        if payload.size < 1:
            raise PrototypeError("rp payload must hold at least one value")
        raw = [_tile(payload, layer.d).reshape(layer.weight_shape) for layer in layers]
    return FilledWeights(raw=raw, scales=[np.float32(s) for s in scales], payload=payload.copy())


def _check_payload(payload: Tensor, expected: int) -> None:
    if payload.size != expected:
        raise PrototypeError(f"payload holds {payload.size} values, expected {expected}")


def rp_len_from_rate(rate: float, spec: NetworkSpec) -> int:
    """d_v = max(1, round(rate * d_m)), rounding half away from zero."""
    if not rate > 0:
        raise PrototypeError(f"rate must be > 0, got {rate}")
    if rate > 1:
        raise PrototypeError(f"rate must be <= 1, got {rate}")
    d_m = spec.weighted_layers[max_layer_slot(spec)].d
    return max(1, int(math.floor(rate * d_m + 0.5)))


def unique_count(src: PrototypeSource, spec: NetworkSpec) -> int:
    """Number of unique stored scalars (scales excluded)."""
    layers = spec.weighted_layers
    if src.strategy is Strategy.DENSE:
        return sum(layer.d for layer in layers)
    if src.strategy is Strategy.ONE_LAYER:
        return sum(layers[slots[0]].d for slots in prototype_groups(spec).values())
    if src.strategy is Strategy.MP:
        return layers[max_layer_slot(spec)].d
    resolved = src.resolve(spec)
    return int(resolved.d_v)
