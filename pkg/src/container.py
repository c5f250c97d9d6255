"""
PEMN container codec (.pemn) and storage-cost accounting.

A container stores a network as architecture + prototype source (seed, or the
prototype values themselves) + per-layer scales + encoded masks, closed by a
CRC32. The byte layout is documented in docs/methodology.md. StorageReport is
derived from the same segment table the writer emits, so the reported total
always equals the file length.
"""

import logging
import math
import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.gradcore import LayerSpec, NetworkSpec, Tensor
from src.protogen import FilledWeights, PrototypeSource, Strategy, fill, fill_from_payload
from src.sparse_select import MaskSet, k_fraction

logger = logging.getLogger(__name__)

MAGIC = b"PEMN"
FORMAT_VERSION = 1

FLAG_EXPLICIT_PROTOTYPE = 0x01
FLAG_DOUBLE_CHECKSUM = 0x02
FLAG_UNIFORM_INIT = 0x04
KNOWN_FLAGS = FLAG_EXPLICIT_PROTOTYPE | FLAG_DOUBLE_CHECKSUM | FLAG_UNIFORM_INIT

TAG_NONE = 0
TAG_BITMAP = 1
TAG_INDEX_LIST = 2

KIND_CODES = {"linear": 0, "conv2d": 1, "relu": 2, "flatten": 3, "avgpool2d": 4}
KIND_NAMES = {code: kind for kind, code in KIND_CODES.items()}

# magic, version, strategy, flags, seed, d_v, k_num, k_den, layer_count
_HEADER = struct.Struct("<4sHBBQQIII")
_RECORD_HEAD = struct.Struct("<BB")
_RECORD_TAIL = struct.Struct("<fBQ")
_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

# segment kinds for storage accounting
SEG_WEIGHTS = "C_w"
SEG_MASKS = "C_m"
SEG_OVERHEAD = "overhead"


class ContainerError(ValueError):
    """Base class for container decoding and encoding errors."""


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class LayoutError(ContainerError):
    """The model cannot be laid out (inconsistent shapes or fields)."""


@dataclass
class PemnModel:
    """A network represented as prototype source + scales + masks."""
    spec: NetworkSpec
    source: PrototypeSource
    masks: MaskSet
    scales: List[np.float32]
    k: Fraction = Fraction(1, 2)
    filled: Optional[FilledWeights] = None
    explicit_prototype: bool = False
    double_checksum: bool = False

    @property
    def weights(self) -> List[Tensor]:
        if self.filled is None:
            self.filled = fill(self.spec, self.source)
        return self.filled.weights

    @classmethod
    def build(cls, spec: NetworkSpec, source: PrototypeSource, masks: MaskSet, k,
              filled: Optional[FilledWeights] = None, **options) -> "PemnModel":
        source = source.resolve(spec)
        if filled is None:
            filled = fill(spec, source)
        frac = k if isinstance(k, Fraction) else k_fraction(k)
        return cls(spec, source, masks, list(filled.scales), frac, filled, **options)


@dataclass
class StorageReport:
    c_w: int
    c_m: int
    overhead: int
    total: int
    dense_baseline: int
    conventional_estimate: int
    ratio: float
    explicit_prototype_bytes: int = 0


@dataclass
class ConventionalCost:
    value_bytes: int
    index_bytes: int
    exact_csr_bytes: Optional[int] = None

    @property
    def total(self) -> int:
        return self.value_bytes + self.index_bytes


@dataclass
class _Segment:
    kind: str
    data: bytes


def encode_mask(mask: Tensor) -> Tuple[int, bytes]:
    """Bitmap (LSB-first, row-major) or sorted u32 index list, whichever is smaller."""
    flat = np.asarray(mask).ravel()
    if flat.size and not np.isin(flat, (0, 1)).all():
        raise LayoutError("mask is not binary")
    bits = flat.astype(bool)
    popcount = int(bits.sum())
    bitmap_size = (flat.size + 7) // 8
    index_size = 4 + 4 * popcount
    if bitmap_size < index_size:
        return TAG_BITMAP, np.packbits(bits, bitorder="little").tobytes()
    indices = np.flatnonzero(bits).astype("<u4")
    return TAG_INDEX_LIST, _U32.pack(popcount) + indices.tobytes()


def decode_mask(tag: int, payload: bytes, shape: Tuple[int, ...]) -> Tensor:
    d = int(np.prod(shape))
    if tag == TAG_BITMAP:
        if len(payload) != (d + 7) // 8:
            raise ContainerError(f"bitmap payload of {len(payload)} bytes for {d} weights")
        bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=d, bitorder="little")
        return bits.astype(np.uint8).reshape(shape)
    if tag == TAG_INDEX_LIST:
        if len(payload) < 4:
            raise ContainerError("index-list payload shorter than its count")
        (count,) = _U32.unpack_from(payload)
        if len(payload) != 4 + 4 * count:
            raise ContainerError(f"index list declares {count} entries in {len(payload)} bytes")
        indices = np.frombuffer(payload, dtype="<u4", offset=4).astype(np.int64)
        if count and (indices.max() >= d or np.any(np.diff(indices) <= 0)):
            raise ContainerError("index list is not sorted or out of range")
        flat = np.zeros(d, dtype=np.uint8)
        flat[indices] = 1
        return flat.reshape(shape)
    raise ContainerError(f"Unknown mask encoding tag: {tag}")


def _layer_dims(layer: LayerSpec) -> Tuple[int, ...]:
    if layer.kind == "linear":
        return (layer.out_dim, layer.in_dim)
    if layer.kind == "conv2d":
        return (layer.out_channels, layer.in_channels, layer.kernel_h, layer.kernel_w,
                layer.stride, layer.padding)
    if layer.kind == "avgpool2d":
        return (layer.pool,)
    return ()


def _layer_from_dims(kind: str, dims: Tuple[int, ...]) -> LayerSpec:
    expected = {"linear": 2, "conv2d": 6, "avgpool2d": 1, "relu": 0, "flatten": 0}[kind]
    if len(dims) != expected:
        raise ContainerError(f"{kind} record has rank {len(dims)}, expected {expected}")
    try:
        if kind == "linear":
            return LayerSpec.linear(dims[1], dims[0])
        if kind == "conv2d":
            out_ch, in_ch, kh, kw, stride, padding = dims
            return LayerSpec("conv2d", in_channels=in_ch, out_channels=out_ch, kernel_h=kh,
                             kernel_w=kw, stride=stride, padding=padding)
        if kind == "avgpool2d":
            return LayerSpec.avgpool2d(dims[0])
        return LayerSpec(kind)
    except ValueError as e:
        raise ContainerError(f"invalid {kind} record: {e}") from e


def _validate(model: PemnModel) -> None:
    layers = model.spec.weighted_layers
    if len(model.masks) != len(layers):
        raise LayoutError(f"{len(model.masks)} masks for {len(layers)} weighted layers")
    if len(model.scales) != len(layers):
        raise LayoutError(f"{len(model.scales)} scales for {len(layers)} weighted layers")
    for slot, (layer, mask) in enumerate(zip(layers, model.masks)):
        if tuple(mask.shape) != layer.weight_shape:
            raise LayoutError(f"mask {slot} has shape {mask.shape}, layer wants {layer.weight_shape}")
    if model.source.strategy is Strategy.RP and model.source.d_v is None:
        raise LayoutError("rp source must be resolved before serialization")
    if not (0 < model.k <= 1) or model.k.denominator >= 2 ** 32:
        raise LayoutError(f"K={model.k} does not fit u32/u32")
    if model.explicit_prototype and model.filled is None:
        raise LayoutError("explicit prototype requested without filled weights")


def _segments(model: PemnModel) -> List[_Segment]:
    """The container as an ordered list of tagged byte segments (checksum excluded)."""
    _validate(model)
    src = model.source
    flags = 0
    if model.explicit_prototype:
        flags |= FLAG_EXPLICIT_PROTOTYPE
    if model.double_checksum:
        flags |= FLAG_DOUBLE_CHECKSUM
    if src.init_scheme == "kaiming_uniform":
        flags |= FLAG_UNIFORM_INIT
    spec = model.spec

    head = _HEADER.pack(MAGIC, FORMAT_VERSION, src.strategy.code, flags, src.seed,
                        src.d_v or 0, model.k.numerator, model.k.denominator, len(spec.layers))
    seed_offset = 8  # magic, version, strategy, flags
    segments = [_Segment(SEG_OVERHEAD, head[:seed_offset])]
    seed_bytes = head[seed_offset:seed_offset + 8]
    segments.append(_Segment(SEG_OVERHEAD if model.explicit_prototype else SEG_WEIGHTS, seed_bytes))
    segments.append(_Segment(SEG_OVERHEAD, head[seed_offset + 8:]))

    arch = _U8.pack(len(spec.input_shape))
    arch += b"".join(_U32.pack(s) for s in spec.input_shape) + _U32.pack(spec.num_classes)
    segments.append(_Segment(SEG_OVERHEAD, arch))

    slot = 0
    for layer in spec.layers:
        dims = _layer_dims(layer)
        record = _RECORD_HEAD.pack(KIND_CODES[layer.kind], len(dims))
        record += b"".join(_U32.pack(d) for d in dims)
        segments.append(_Segment(SEG_OVERHEAD, record))
        if layer.has_weights:
            tag, payload = encode_mask(model.masks[slot])
            scale = struct.pack("<f", float(model.scales[slot]))
            segments.append(_Segment(SEG_WEIGHTS, scale))
            segments.append(_Segment(SEG_OVERHEAD, _U8.pack(tag) + _U64.pack(len(payload))))
            segments.append(_Segment(SEG_MASKS, payload))
            slot += 1
        else:
            segments.append(_Segment(SEG_OVERHEAD, _RECORD_TAIL.pack(1.0, TAG_NONE, 0)))

    if model.explicit_prototype:
        values = np.asarray(model.filled.payload, dtype="<f4").ravel()
        segments.append(_Segment(SEG_OVERHEAD, _U64.pack(values.size)))
        segments.append(_Segment(SEG_WEIGHTS, values.tobytes()))
    return segments


def _checksum_bytes(body: bytes, double: bool) -> bytes:
    crc = _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)
    return crc + crc if double else crc


def serialize(model: PemnModel) -> bytes:
    """Encode a model; raises LayoutError before emitting anything if it is inconsistent."""
    body = b"".join(seg.data for seg in _segments(model))
    return body + _checksum_bytes(body, model.double_checksum)


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise TruncatedError(f"container truncated while reading {what} at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: struct.Struct, what: str):
        return fmt.unpack(self.take(fmt.size, what))


def deserialize(data: bytes) -> PemnModel:
    """Decode a container, regenerating weights from the seed unless stored explicitly."""
    data = bytes(data)
    if len(data) < 4:
        raise TruncatedError(f"container of {len(data)} bytes has no magic")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedError(f"container of {len(data)} bytes is shorter than its header")
    (_, version, strategy_code, flags, seed, d_v, k_num, k_den,
     layer_count) = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} is not supported")
    if flags & ~KNOWN_FLAGS:
        raise ContainerError(f"unknown flag bits {flags:#04x}")

    double = bool(flags & FLAG_DOUBLE_CHECKSUM)
    crc_size = 8 if double else 4
    if len(data) < _HEADER.size + crc_size:
        raise TruncatedError("container truncated before its checksum")
    body_end = len(data) - crc_size
    reader = _Reader(data, body_end)
    reader.take(_HEADER.size, "header")

    (rank,) = reader.unpack(_U8, "input rank")
    input_shape = tuple(reader.unpack(_U32, "input shape")[0] for _ in range(rank))
    (num_classes,) = reader.unpack(_U32, "class count")

    layers, records = [], []
    for _ in range(layer_count):
        kind_code, rank = reader.unpack(_RECORD_HEAD, "layer record")
        if kind_code not in KIND_NAMES:
            raise ContainerError(f"unknown layer kind code {kind_code}")
        dims = tuple(reader.unpack(_U32, "layer dims")[0] for _ in range(rank))
        scale, tag, length = reader.unpack(_RECORD_TAIL, "layer record")
        payload = reader.take(length, "mask payload")
        layer = _layer_from_dims(KIND_NAMES[kind_code], dims)
        layers.append(layer)
        if layer.has_weights:
            records.append((layer, np.float32(scale), tag, payload))

    explicit = None
    if flags & FLAG_EXPLICIT_PROTOTYPE:
        (count,) = reader.unpack(_U64, "prototype count")
        raw = reader.take(4 * count, "prototype values")
        explicit = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if reader.pos != body_end:
        raise ContainerError(f"{body_end - reader.pos} unexpected bytes before checksum")

    body = data[:body_end]
    expected = _checksum_bytes(body, double)
    if data[body_end:] != expected:
        raise ChecksumError("CRC32 mismatch")

    try:
        spec = NetworkSpec(tuple(layers), input_shape, num_classes)
        strategy = Strategy.from_code(strategy_code)
        scheme = "kaiming_uniform" if flags & FLAG_UNIFORM_INIT else "kaiming_normal"
        source = PrototypeSource(strategy, seed, d_v=d_v if strategy is Strategy.RP else None,
                                 init_scheme=scheme)
        k = Fraction(k_num, k_den)
    except (ValueError, ZeroDivisionError) as e:
        raise ContainerError(f"invalid container contents: {e}") from e

    masks = MaskSet([decode_mask(tag, payload, layer.weight_shape)
                     for layer, _, tag, payload in records])
    scales = [scale for _, scale, _, _ in records]
    if explicit is not None:
        try:
            filled = fill_from_payload(spec, strategy, explicit, scales)
        except ValueError as e:
            raise ContainerError(f"explicit prototype does not fit the network: {e}") from e
    else:
        try:
            filled = fill(spec, source)
        except ValueError as e:
            raise ContainerError(f"seed cannot fill the network: {e}") from e
        filled = FilledWeights(raw=filled.raw, scales=scales, payload=filled.payload)
    return PemnModel(spec, source, masks, scales, k, filled,
                     explicit_prototype=explicit is not None, double_checksum=double)


def save(model: PemnModel, path) -> int:
    """Write a .pemn file; returns the byte count."""
    data = serialize(model)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    logger.info(f"Container written to {path} ({len(data)} bytes)")
    return len(data)


def load(path) -> PemnModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"No such container: {path}")
    return deserialize(path.read_bytes())


def conventional_cost(p: int, r: float, layer_shapes: Sequence[Tuple[int, ...]] = None) -> ConventionalCost:
    """Bytes to store a conventionally pruned model of p weights at sparsity r.

    Values are fp32; positions are modeled as 2p(1-r) two-byte entries. With
    layer_shapes the exact CSR size (fp32 values, u32 column indices, u32 row
    pointers, nonzeros spread evenly) is reported alongside.
    """
    if not 0 <= r <= 1:
        raise ValueError(f"sparsity must lie in [0, 1], got {r}")
    kept = p * (1.0 - r)
    value_bytes = int(round(4 * kept))
    index_bytes = int(round(2 * 2 * kept))
    exact = None
    if layer_shapes is not None:
        exact = 0
        for shape in layer_shapes:
            rows = shape[0]
            d = int(np.prod(shape))
            nnz = int(math.floor(d * (1.0 - r) + 0.5))
            exact += 8 * nnz + 4 * (rows + 1)
    return ConventionalCost(value_bytes, index_bytes, exact)


def equiv_storage_ratio(total: int, p: int) -> float:
    """Sparsity a conventional sparse model of p weights needs to fit in `total` bytes.

    A conventional store never exceeds the dense fp32 baseline, so anything at
    or above 4p bytes maps to 0.
    """
    dense = 4 * p
    if p <= 0 or total >= dense:
        return 0.0
    return 1.0 - total / conventional_cost(p, 0.0).total


def storage_cost(model: PemnModel) -> StorageReport:
    """C = C_w + C_m (+ header overhead), from the writer's own segment table."""
    segments = _segments(model)
    sizes = {SEG_WEIGHTS: 0, SEG_MASKS: 0, SEG_OVERHEAD: 0}
    for seg in segments:
        sizes[seg.kind] += len(seg.data)
    sizes[SEG_OVERHEAD] += 8 if model.double_checksum else 4
    total = sum(sizes.values())
    p = model.spec.num_params
    dense = 4 * p
    explicit_bytes = 4 * model.filled.payload.size if model.explicit_prototype else 0
    kept = sum(int(np.count_nonzero(m)) for m in model.masks)
    conventional = conventional_cost(p, 1.0 - kept / p if p else 0.0).total
    return StorageReport(
        c_w=sizes[SEG_WEIGHTS],
        c_m=sizes[SEG_MASKS],
        overhead=sizes[SEG_OVERHEAD],
        total=total,
        dense_baseline=dense,
        conventional_estimate=conventional,
        ratio=1.0 - total / dense if dense else 0.0,
        explicit_prototype_bytes=explicit_bytes,
    )
