"""
Test suite for the .pemn container codec and storage accounting.
"""

import json
import struct
import sys
import zlib
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.container import (
    TAG_BITMAP,
    TAG_INDEX_LIST,
    BadMagicError,
    ChecksumError,
    ContainerError,
    LayoutError,
    PemnModel,
    TruncatedError,
    UnsupportedVersionError,
    conventional_cost,
    decode_mask,
    deserialize,
    encode_mask,
    equiv_storage_ratio,
    load,
    save,
    serialize,
    storage_cost,
)
from src.gradcore import LayerSpec, NetworkSpec, build_preset, forward
from src.protogen import PrototypeSource, Strategy, fill, fill_from_payload
from src.sparse_select import MaskSet, init_scores, make_mask


DATA_DIR = Path(__file__).parent / "data"


def random_masks(net, seed, density=0.5):
    rng = np.random.default_rng(seed)
    return MaskSet([(rng.random(l.weight_shape) < density).astype(np.uint8)
                    for l in net.weighted_layers])


def tiny_model(**options):
    net = NetworkSpec((LayerSpec.linear(4, 3),), (4,), 3)
    return PemnModel.build(net, PrototypeSource(Strategy.DENSE, 9), random_masks(net, 0), 0.5, **options)


class TestMaskEncoding:
    """Bitmap versus index-list selection."""

    def test_half_full_uses_bitmap(self):
        mask = np.zeros(64, dtype=np.uint8)
        mask[::2] = 1
        tag, payload = encode_mask(mask)
        assert tag == TAG_BITMAP and len(payload) == 8

    def test_sparse_uses_index_list(self):
        mask = np.zeros(1024, dtype=np.uint8)
        mask[700] = 1
        tag, payload = encode_mask(mask)
        assert tag == TAG_INDEX_LIST and len(payload) == 8
        np.testing.assert_array_equal(decode_mask(tag, payload, (1024,)), mask)

    def test_all_zeros(self):
        tag, payload = encode_mask(np.zeros((8, 8), dtype=np.uint8))
        assert tag == TAG_INDEX_LIST and payload == b"\x00\x00\x00\x00"

    def test_bitmap_is_lsb_first(self):
        tag, payload = encode_mask(np.array([1, 0, 1, 1, 0, 0, 0, 0, 1] + [1] * 40, dtype=np.uint8))
        assert tag == TAG_BITMAP and payload[0] == 0b00001101

    def test_non_binary_rejected(self):
        with pytest.raises(LayoutError):
            encode_mask(np.array([0, 2, 1]))


class TestRoundTrip:
    """serialize / deserialize."""

    @pytest.mark.parametrize("strategy,extra", [
        (Strategy.DENSE, {}), (Strategy.ONE_LAYER, {}), (Strategy.MP, {}), (Strategy.RP, {"d_v": 17}),
    ])
    @pytest.mark.parametrize("explicit", [False, True])
    def test_conv_model(self, strategy, extra, explicit):
        net = build_preset("conv_small", (3, 8, 8), 4)
        src = PrototypeSource(strategy, 123, **extra)
        model = PemnModel.build(net, src, random_masks(net, 1), Fraction(1, 2),
                                explicit_prototype=explicit, double_checksum=explicit)
        restored = deserialize(serialize(model))
        assert restored.spec == net
        assert restored.source == model.source
        assert restored.k == Fraction(1, 2)
        assert restored.explicit_prototype == explicit
        for a, b in zip(restored.masks, model.masks):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(restored.weights, model.weights):
            np.testing.assert_array_equal(a, b)

    def test_uniform_init_flag(self):
        net = NetworkSpec((LayerSpec.linear(5, 3),), (5,), 3)
        src = PrototypeSource(Strategy.MP, 4, init_scheme="kaiming_uniform")
        model = PemnModel.build(net, src, random_masks(net, 2), 0.5)
        restored = deserialize(serialize(model))
        assert restored.source.init_scheme == "kaiming_uniform"
        np.testing.assert_array_equal(restored.weights[0], model.weights[0])

    def test_restored_logits(self):
        net = build_preset("mlp_small", (1, 6, 6), 3)
        model = PemnModel.build(net, PrototypeSource(Strategy.RP, 8, d_v=50), random_masks(net, 3), 0.5)
        restored = deserialize(serialize(model))
        batch = np.random.default_rng(0).standard_normal((5, 1, 6, 6)).astype(np.float32)
        a, _ = forward(net, model.weights, model.masks.as_float(), batch)
        b, _ = forward(restored.spec, restored.weights, restored.masks.as_float(), batch)
        np.testing.assert_array_equal(a, b)

    def test_save_and_load(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "nested" / "model.pemn"
        size = save(model, path)
        assert size == path.stat().st_size == storage_cost(model).total
        np.testing.assert_array_equal(load(path).masks[0], model.masks[0])

    def test_load_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="missing.pemn"):
            load(tmp_path / "missing.pemn")


class TestHandBuiltContainer:
    """A container assembled byte by byte decodes to known logits."""

    def _bytes(self):
        body = struct.pack("<4sHBBQQIII", b"PEMN", 1, 3, 0x01, 0, 2, 1, 2, 1)
        body += struct.pack("<BII", 1, 2, 2)
        body += struct.pack("<BBII", 0, 2, 2, 2)
        body += struct.pack("<fBQ", 0.5, TAG_BITMAP, 1) + bytes([0b1101])
        body += struct.pack("<Q2f", 2, 1.0, 2.0)
        return body + struct.pack("<I", zlib.crc32(body))

    def test_golden_logits(self):
        model = deserialize(self._bytes())
        assert model.source.strategy is Strategy.RP and model.explicit_prototype
        np.testing.assert_array_equal(model.masks[0], [[1, 0], [1, 1]])
        logits, _ = forward(model.spec, model.weights, model.masks.as_float(),
                            np.array([[1.0, 1.0], [2.0, -1.0]], dtype=np.float32))
        np.testing.assert_array_equal(logits, [[0.5, 1.5], [1.0, 0.0]])

    def test_reencodes_identically(self):
        data = self._bytes()
        assert serialize(deserialize(data)) == data

    def test_seed_only_fill_failure_is_container_error(self):
        """A seed-only mp container over a network without weighted layers."""
        body = struct.pack("<4sHBBQQIII", b"PEMN", 1, 2, 0x00, 5, 0, 1, 2, 1)
        body += struct.pack("<BII", 1, 2, 2)
        body += struct.pack("<BB", 2, 0) + struct.pack("<fBQ", 1.0, 0, 0)
        data = body + struct.pack("<I", zlib.crc32(body))
        with pytest.raises(ContainerError, match="seed cannot fill"):
            deserialize(data)


class TestGoldenContainers:
    """Committed seed-only containers: seed -> fill -> masked forward, bit for bit.

    Network: linear 6->3 with two kept weights per row, relu, linear 3->3 with
    the identity mask; every logit is a single product, so it is exact in float32.
    """

    BATCH = np.vstack([np.eye(6), -np.eye(6)]).astype(np.float32)

    @staticmethod
    def _floats(values):
        return np.array([float.fromhex(v) for v in values], dtype=np.float32)

    def _expected(self, name):
        golden = json.loads((DATA_DIR / "golden_logits.json").read_text())[name]
        logits = np.array([self._floats(row) for row in golden["logits"]], dtype=np.float32)
        return self._floats(golden["payload"]), logits

    @pytest.mark.parametrize("name,strategy,seed,scheme", [
        ("rp", Strategy.RP, 7, "kaiming_normal"),
        ("mp", Strategy.MP, 11, "kaiming_uniform"),
    ])
    def test_logits_match(self, name, strategy, seed, scheme):
        model = load(DATA_DIR / f"golden_{name}.pemn")
        assert model.source.strategy is strategy and model.source.seed == seed
        assert model.source.init_scheme == scheme
        assert not model.explicit_prototype and model.k == Fraction(1, 3)
        payload, expected = self._expected(name)
        np.testing.assert_array_equal(model.filled.payload, payload)
        logits, _ = forward(model.spec, model.weights, model.masks.as_float(), self.BATCH)
        assert logits.dtype == np.float32
        np.testing.assert_array_equal(logits, expected)

    @pytest.mark.parametrize("name", ["rp", "mp"])
    def test_reencodes_identically(self, name):
        path = DATA_DIR / f"golden_{name}.pemn"
        assert serialize(load(path)) == path.read_bytes()

    def test_rp_scales(self):
        model = load(DATA_DIR / "golden_rp.pemn")
        assert model.source.d_v == 5
        assert [float(s) for s in model.scales] == [float(np.float32(np.sqrt(2 / 6))),
                                                     float(np.float32(np.sqrt(2 / 3)))]


class TestCorruption:
    """Integrity checks on load."""

    def test_bad_magic(self):
        data = bytearray(serialize(tiny_model()))
        data[0:4] = b"NOPE"
        with pytest.raises(BadMagicError):
            deserialize(bytes(data))

    def test_unsupported_version(self):
        data = bytearray(serialize(tiny_model()))
        data[4:6] = struct.pack("<H", 9)
        with pytest.raises(UnsupportedVersionError):
            deserialize(bytes(data))

    def test_mask_byte_flip_fails_checksum(self):
        data = bytearray(serialize(tiny_model()))
        data[-5] ^= 0xFF
        with pytest.raises(ChecksumError):
            deserialize(bytes(data))

    @pytest.mark.parametrize("double", [False, True])
    def test_any_byte_flip_rejected(self, double):
        data = serialize(tiny_model(double_checksum=double))
        for i in range(len(data)):
            corrupted = bytearray(data)
            corrupted[i] ^= 0x5A
            with pytest.raises(ContainerError):
                deserialize(bytes(corrupted))

    def test_double_checksum_copies_must_agree(self):
        data = bytearray(serialize(tiny_model(double_checksum=True)))
        data[-1] ^= 0x01
        with pytest.raises(ChecksumError):
            deserialize(bytes(data))

    @pytest.mark.parametrize("explicit", [False, True])
    def test_every_truncation(self, explicit):
        data = serialize(tiny_model(explicit_prototype=explicit))
        for cut in range(len(data)):
            with pytest.raises(TruncatedError):
                deserialize(data[:cut])

    def test_layout_checked_before_writing(self):
        model = tiny_model()
        model.masks = MaskSet([np.ones((4, 3), dtype=np.uint8)])
        with pytest.raises(LayoutError):
            serialize(model)


class TestStorageCost:
    """Byte accounting on the MNIST-sized MLP."""

    def setup_method(self):
        self.net = build_preset("mlp_small", (1, 28, 28), 10)
        self.masks = make_mask(init_scores(self.net, 0), 0.5)

    def test_dense_baseline_and_mask_bytes(self):
        model = PemnModel.build(self.net, PrototypeSource(Strategy.DENSE, 0), self.masks, 0.5)
        report = storage_cost(model)
        assert self.net.num_params == 268_800
        assert report.dense_baseline == 1_075_200
        assert report.c_m == 33_600
        assert report.c_w == 8 + 4 * 3
        assert report.total == len(serialize(model))
        assert report.c_w + report.c_m + report.overhead == report.total

    def test_rp_explicit_prototype(self):
        src = PrototypeSource(Strategy.RP, 0, rp_rate=1e-2).resolve(self.net)
        assert src.d_v == 2007
        model = PemnModel.build(self.net, src, self.masks, 0.5, explicit_prototype=True)
        report = storage_cost(model)
        assert report.c_w == 8_040
        assert report.explicit_prototype_bytes == 4 * 2007
        assert report.ratio == pytest.approx(0.961, abs=1e-3)

    def test_seed_only_rp_stores_no_values(self):
        src = PrototypeSource(Strategy.RP, 0, d_v=655)
        model = PemnModel.build(self.net, src, self.masks, 0.5)
        report = storage_cost(model)
        assert report.explicit_prototype_bytes == 0
        assert report.c_w == 20


def repeated_mlp():
    """64-32-32-32-10: two hidden layers share a shape, so one-layer has something to share."""
    return NetworkSpec((
        LayerSpec.linear(64, 32), LayerSpec.relu(),
        LayerSpec.linear(32, 32), LayerSpec.relu(),
        LayerSpec.linear(32, 32), LayerSpec.relu(),
        LayerSpec.linear(32, 10),
    ), (64,), 10)


class TestStorageOrdering:
    """Totals across strategies and prototype lengths on one network and K."""

    @pytest.mark.parametrize("k", [Fraction(1, 10), Fraction(1, 2), Fraction(1)])
    @pytest.mark.parametrize("double", [False, True])
    def test_strategy_totals_ordered(self, k, double):
        net = repeated_mlp()
        masks = make_mask(init_scores(net, 0), k)
        totals = {}
        for strategy, extra in [(Strategy.DENSE, {}), (Strategy.ONE_LAYER, {}),
                                (Strategy.MP, {}), (Strategy.RP, {"d_v": 200})]:
            model = PemnModel.build(net, PrototypeSource(strategy, 3, **extra), masks, k,
                                    explicit_prototype=True, double_checksum=double)
            totals[strategy] = storage_cost(model).total
        assert (totals[Strategy.DENSE] > totals[Strategy.ONE_LAYER]
                > totals[Strategy.MP] > totals[Strategy.RP])

    @pytest.mark.parametrize("k", [Fraction(1, 4), Fraction(1, 2)])
    def test_ratio_grows_as_prototype_shrinks(self, k):
        """With stored prototype values every dropped scalar saves four bytes."""
        net = repeated_mlp()
        masks = make_mask(init_scores(net, 1), k)
        ratios = []
        for d_v in [2048, 1024, 256, 32, 4, 1]:
            model = PemnModel.build(net, PrototypeSource(Strategy.RP, 5, d_v=d_v), masks, k,
                                    explicit_prototype=True)
            ratios.append(equiv_storage_ratio(storage_cost(model).total, net.num_params))
        assert all(a < b for a, b in zip(ratios, ratios[1:]))

    def test_seed_only_total_ignores_prototype_length(self):
        net = repeated_mlp()
        masks = make_mask(init_scores(net, 1), 0.5)
        totals = {storage_cost(PemnModel.build(net, PrototypeSource(Strategy.RP, 5, d_v=d_v), masks, 0.5)).total
                  for d_v in [2048, 256, 1]}
        assert len(totals) == 1


class TestPaddingIdempotent:
    """Re-padding a filled network from its own payload changes nothing."""

    @pytest.mark.parametrize("strategy,extra", [
        (Strategy.MP, {}),
        (Strategy.MP, {"init_scheme": "kaiming_uniform"}),
        (Strategy.RP, {"d_v": 7}),
        (Strategy.RP, {"d_v": 100}),
        (Strategy.RP, {"d_v": 5000}),
    ])
    @pytest.mark.parametrize("preset", ["repeated", "conv_small"])
    def test_refill_from_payload(self, strategy, extra, preset):
        net = repeated_mlp() if preset == "repeated" else build_preset("conv_small", (3, 8, 8), 4)
        filled = fill(net, PrototypeSource(strategy, 21, **extra))
        once = fill_from_payload(net, strategy, filled.payload, filled.scales)
        twice = fill_from_payload(net, strategy, once.payload, once.scales)
        for a, b, c in zip(filled.raw, once.raw, twice.raw):
            np.testing.assert_array_equal(a, b)
            np.testing.assert_array_equal(b, c)
        for a, b in zip(filled.weights, twice.weights):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("d_v", [3, 32, 1024])
    def test_rp_layers_are_prefixes_of_one_tiling(self, d_v):
        net = repeated_mlp()
        filled = fill(net, PrototypeSource(Strategy.RP, 2, d_v=d_v))
        longest = max(filled.raw, key=lambda r: r.size).ravel()
        for raw in filled.raw:
            np.testing.assert_array_equal(raw.ravel(), longest[:raw.size])
            np.testing.assert_array_equal(raw.ravel()[:min(d_v, raw.size)], filled.payload[:min(d_v, raw.size)])

    def test_mp_layers_are_prefixes_of_largest(self):
        net = repeated_mlp()
        filled = fill(net, PrototypeSource(Strategy.MP, 2))
        largest = filled.raw[0].ravel()
        np.testing.assert_array_equal(largest, filled.payload)
        for raw in filled.raw[1:]:
            np.testing.assert_array_equal(raw.ravel(), largest[:raw.size])


class TestConventionalCost:
    def test_fully_pruned(self):
        assert conventional_cost(268_800, 1.0).total == 0

    def test_ninety_percent(self):
        cost = conventional_cost(268_800, 0.9)
        assert cost.value_bytes == 107_520
        assert cost.index_bytes == 107_520

    def test_monotone(self):
        totals = [conventional_cost(10_000, r).total for r in np.linspace(0, 1, 21)]
        assert all(a >= b for a, b in zip(totals, totals[1:]))

    def test_exact_csr(self):
        cost = conventional_cost(20, 0.5, layer_shapes=[(4, 5)])
        assert cost.exact_csr_bytes == 8 * 10 + 4 * 5

    def test_equivalent_ratio(self):
        p = 268_800
        assert equiv_storage_ratio(4 * p, p) == 0.0
        assert equiv_storage_ratio(conventional_cost(p, 0.94).total, p) == pytest.approx(0.94)
        assert equiv_storage_ratio(conventional_cost(p, 0.3).total, p) == 0.0

    def test_invalid_sparsity(self):
        with pytest.raises(ValueError):
            conventional_cost(10, 1.5)


@pytest.mark.parametrize("batch", range(5))
def test_randomized_round_trips(batch):
    """100 random models per batch: bit-exact round trip, logits and length."""
    rng = np.random.default_rng(batch)
    strategies = [Strategy.DENSE, Strategy.ONE_LAYER, Strategy.MP, Strategy.RP]
    for _ in range(100):
        dims = [int(d) for d in rng.integers(1, 10, size=rng.integers(2, 5))]
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            if i:
                layers.append(LayerSpec.relu())
            layers.append(LayerSpec.linear(a, b))
        net = NetworkSpec(tuple(layers), (dims[0],), dims[-1])
        strategy = strategies[int(rng.integers(0, 4))]
        extra = {"d_v": int(rng.integers(1, 30))} if strategy is Strategy.RP else {}
        src = PrototypeSource(strategy, int(rng.integers(0, 2 ** 63)), **extra)
        model = PemnModel.build(net, src, random_masks(net, int(rng.integers(0, 1000)), rng.random()),
                                Fraction(int(rng.integers(1, 5)), 4),
                                explicit_prototype=bool(rng.integers(0, 2)),
                                double_checksum=bool(rng.integers(0, 2)))
        data = serialize(model)
        assert len(data) == storage_cost(model).total
        restored = deserialize(data)
        assert serialize(restored) == data
        batch_x = rng.standard_normal((3, dims[0])).astype(np.float32)
        a, _ = forward(net, model.weights, model.masks.as_float(), batch_x)
        b, _ = forward(restored.spec, restored.weights, restored.masks.as_float(), batch_x)
        np.testing.assert_array_equal(a, b)
