import math

import numpy as np
import pytest

from lightcnn.layers import ConvPair, FullyConnected
from lightcnn.tensor import make_rng
from lightcnn.zoo import (
    CASIA_IDENTITIES,
    arch_spec,
    build_network,
    build_network_a,
    build_network_b,
    count_parameters,
    format_thousands,
    init_weights,
)
from layer_tables import TABLES, decimals, truncate_k


@pytest.fixture(scope="module")
def nets():
    return {"A": build_network_a(), "B": build_network_b()}


@pytest.mark.parametrize("arch", ["A", "B"])
def test_shape_trace_matches_table(nets, arch):
    rows, _ = TABLES[arch]
    assert nets[arch].trace() == [(name, size) for name, size, _ in rows]


def test_default_class_count(nets):
    assert nets["A"].num_classes == CASIA_IDENTITIES == 10575


def test_batch_extent_propagates():
    net = build_network("A", num_classes=10, width=0.25)
    seen = []
    net.forward(np.zeros((2, 1, 128, 128), np.float32), hook=lambda l, o: seen.append(o.shape[0]))
    assert set(seen) == {2}


def test_network_b_details(nets):
    trace = dict(nets["B"].trace())
    assert trace["conv1_1"] == (128, 128, 48)
    assert trace["conv3_a"] == (32, 32, 96)
    assert trace["pool5"] == (4, 4, 128)
    assert nets["B"].layer("fc1").in_dim == 2048


@pytest.mark.parametrize("arch", ["A", "B"])
def test_displayed_parameter_counts(nets, arch):
    rows, total = TABLES[arch]
    counts = count_parameters(nets[arch], "paper")
    for name, _, cell in rows:
        if cell is not None:
            assert truncate_k(counts.per_layer[name], decimals(cell)) == cell, name
    assert truncate_k(counts.total, 0) == total


def test_compact_totals_exact(nets):
    assert count_parameters(nets["A"]).total == 3_961_120
    assert count_parameters(nets["B"]).total == 3_244_144


def test_true_count_oracle(nets):
    net = nets["A"]
    weights = 0
    for d in arch_spec("A").layers:
        if d.kind == "conv_pair":
            layer = net.layer(d.name)
            weights += d.kernel * d.kernel * layer.in_c * d.out * 2
        elif d.kind == "fc":
            weights += net.layer(d.name).in_dim * d.out
    assert weights == 5_575_008
    biases = sum(p.value.size for p in net.params() if p.name.endswith(".bias"))
    assert count_parameters(net, "true").total == weights + biases
    stored = sum(p.value.size for p in net.params())
    assert count_parameters(net, "true").total == stored


def test_format_thousands():
    assert format_thousands(3888, 1) == "3.8K"
    assert format_thousands(48, 2) == "0.04K"
    assert format_thousands(3_961_120) == "3,961K"


class TestInit:
    def test_xavier_bound_conv1(self):
        net = build_network_a()
        init_weights(net, make_rng(0))
        bound = math.sqrt(3 / 81)
        assert bound == pytest.approx(0.19245, abs=1e-5)
        w = net.layer("conv1").halves[0][0].value
        assert np.all(np.abs(w) < bound)
        assert np.abs(w).max() > 0.9 * bound

    def test_fc_gaussian_and_zero_bias(self):
        net = build_network("B", num_classes=50)
        init_weights(net, make_rng(1))
        w = net.layer("fc1").weight.value
        assert abs(w.std() - 0.01) < 0.0005
        assert all(np.all(p.value == 0) for p in net.params() if p.name.endswith(".bias"))

    def test_deterministic(self):
        a = init_weights(build_network("A", num_classes=20, width=0.25), make_rng(3))
        b = init_weights(build_network("A", num_classes=20, width=0.25), make_rng(3))
        for p, q in zip(a.params(), b.params()):
            assert p.value.tobytes() == q.value.tobytes()

    def test_forward_is_finite(self):
        net = init_weights(build_network_b(num_classes=100), make_rng(4))
        out = net.forward(make_rng(5).random((2, 1, 128, 128)))
        assert np.all(np.isfinite(out))


class TestOptions:
    def test_width_keeps_embedding(self):
        net = build_network("B", num_classes=7, width=0.25)
        assert net.layer("fc1").out_dim == 256
        assert net.num_classes == 7

    def test_relu_mode(self):
        net = build_network("A", num_classes=5, activation="relu", width=0.25)
        kinds = [l.kind for l in net.layers]
        assert "mfm" not in kinds and "relu" in kinds
        assert not any(isinstance(l, ConvPair) for l in net.layers)

    def test_nin_mfm_flag(self):
        net = build_network("B", num_classes=5, width=0.25, nin_mfm=True)
        assert isinstance(net.layer("conv2_a"), ConvPair)
        assert net.layer("mfm2_a").kind == "mfm"

    def test_unknown_arch(self):
        with pytest.raises(ValueError):
            build_network("C")

    def test_fc_layers(self, nets):
        assert isinstance(nets["A"].layer("fc2"), FullyConnected)
        assert nets["A"].layer("fc1").in_dim == 4800
