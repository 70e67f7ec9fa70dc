import numpy as np
import pytest

from lightcnn.embeddings import (
    EmbeddingTable,
    Pair,
    extract_embedding,
    extract_embeddings,
    mfm_stats,
    read_embeddings,
    read_pairs,
    read_probe_list,
    write_embeddings,
    write_histogram_csv,
    write_pairs,
)
from lightcnn.tensor import ShapeError, make_rng
from lightcnn.zoo import build_network, init_weights


@pytest.fixture(scope="module")
def small_a():
    return init_weights(build_network("A", num_classes=5, width=0.25), make_rng(0))


@pytest.mark.parametrize("arch", ["A", "B"])
def test_embedding_length(arch):
    net = init_weights(build_network(arch, num_classes=5, width=0.25), make_rng(1))
    e = extract_embedding(net, make_rng(2).random((1, 128, 128)))
    assert e.shape == (256,) and np.all(np.isfinite(e))


def test_deterministic_and_batch_independent(small_a):
    x = make_rng(3).random((5, 1, 128, 128)).astype(np.float32)
    small_a.train()  # extraction must ignore the mode and disable dropout
    a = extract_embeddings(small_a, x, batch_size=2)
    b = extract_embeddings(small_a, x, batch_size=5)
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)
    np.testing.assert_array_equal(a, extract_embeddings(small_a, x, batch_size=2))
    assert small_a.mode == "train"


def test_zero_model_zero_image():
    net = build_network("B", num_classes=5, width=0.25)  # all parameters start at 0
    assert np.all(extract_embedding(net, np.zeros((1, 128, 128))) == 0)


def test_wrong_geometry(small_a):
    with pytest.raises(ShapeError):
        extract_embedding(small_a, np.zeros((1, 144, 144)))


class TestLCNE:
    def test_round_trip(self, tmp_path):
        v = make_rng(0).standard_normal((3, 256)).astype(np.float32)
        ids = ["a/1", "b", "ü"]
        write_embeddings(tmp_path / "e.lcne", ids, v)
        got_ids, got = read_embeddings(tmp_path / "e.lcne")
        assert got_ids == ids
        assert got.tobytes() == v.tobytes()

    def test_layout(self, tmp_path):
        write_embeddings(tmp_path / "e.lcne", ["x"], np.ones((1, 256)))
        raw = (tmp_path / "e.lcne").read_bytes()
        assert raw[:4] == b"LCNE"
        assert raw[4:16] == (1).to_bytes(4, "little") * 2 + (256).to_bytes(4, "little")
        assert len(raw) == 16 + 1024 + 1 and raw.endswith(b"x")

    def test_empty(self, tmp_path):
        write_embeddings(tmp_path / "e.lcne", [], np.zeros((0, 256)))
        ids, v = read_embeddings(tmp_path / "e.lcne")
        assert ids == [] and v.shape == (0, 256)

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"nope")
        with pytest.raises(ValueError, match="not an LCNE"):
            read_embeddings(tmp_path / "bad")

    def test_table_lookup(self):
        t = EmbeddingTable(["v1/0", "v1/1", "v2/0"], np.eye(3))
        assert t.get("v2/0")[2] == 1
        with pytest.raises(KeyError, match="'zz' not found"):
            t.get("zz")
        assert sorted(t.videos()) == ["v1", "v2"]
        assert t.videos()["v1"].shape == (2, 3)


def test_pair_and_probe_lists(tmp_path):
    pairs = [Pair("a", "b", True, 0), Pair("c", "d", False, 9)]
    write_pairs(tmp_path / "p.txt", pairs)
    assert read_pairs(tmp_path / "p.txt") == pairs
    (tmp_path / "bad.txt").write_text("a b 2 0\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        read_pairs(tmp_path / "bad.txt")
    (tmp_path / "g.txt").write_text("# id identity role\nx 1 gallery\ny 1 genuine\nz 9 impostor\n")
    roles = [e.role for e in read_probe_list(tmp_path / "g.txt")]
    assert roles == ["gallery", "genuine", "impostor"]
    (tmp_path / "g2.txt").write_text("x 1 probe\n")
    with pytest.raises(ValueError):
        read_probe_list(tmp_path / "g2.txt")


class TestMFMStats:
    def test_counts_and_sparsity(self, small_a, tmp_path):
        x = make_rng(4).random((3, 1, 128, 128)).astype(np.float32)
        rows, summary = mfm_stats(small_a, x, bins=20)
        shapes = {}
        small_a.forward(x[:1], hook=lambda l, o: shapes.setdefault(l.name, o.shape) if l.kind == "mfm" else None)
        for name, shape in shapes.items():
            n_out = int(np.prod(shape[1:])) * 3
            assert summary[(name, "value")][0] == n_out
            assert summary[(name, "gradient")][0] == 2 * n_out
            assert summary[(name, "gradient")][1] >= 0.5
            for kind, expected in (("value", n_out), ("gradient", 2 * n_out)):
                assert sum(r.count for r in rows if r.layer == name and r.kind == kind) == expected
        write_histogram_csv(tmp_path / "h.csv", rows)
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "layer,kind,bin_lo,bin_hi,count"
        assert len(lines) == len(rows) + 1

    def test_zero_model_values_at_zero(self):
        net = build_network("A", num_classes=5, width=0.25)
        rows, summary = mfm_stats(net, np.ones((1, 1, 128, 128)))
        assert all(v[1] == 1.0 for (layer, kind), v in summary.items() if kind == "value")
        assert all(r.count == 0 for r in rows if r.kind == "value" and r.hi != 0)

    def test_needs_images(self, small_a):
        with pytest.raises(ValueError):
            mfm_stats(small_a, np.zeros((0, 1, 128, 128)))
