"""Embedding extraction, the ``.lcne`` embedding file, protocol list files and
MFM activation/gradient histograms."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layers import softmax_cross_entropy
from .tensor import ShapeError
from .zoo import EMBEDDING_DIM, NetworkModel

MAGIC = b"LCNE"
VERSION = 1


def extract_embeddings(model: NetworkModel, images, batch_size: int = 32) -> np.ndarray:
    """fc1 activations for (N, 1, 128, 128) inputs already scaled to [0, 1]."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != tuple(model.spec.input_shape):
        raise ShapeError(f"expected (N, 1, 128, 128) images, got {images.shape}")
    out = [model.embed(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(out).astype(np.float32) if out else np.zeros((0, EMBEDDING_DIM), np.float32)


def extract_embedding(model: NetworkModel, image) -> np.ndarray:
    image = np.asarray(image)
    if image.shape == tuple(model.spec.input_shape):
        image = image[None]
    if image.shape != (1,) + tuple(model.spec.input_shape):
        raise ShapeError(f"expected a 1x128x128 image, got {image.shape}")
    return extract_embeddings(model, image)[0]


# ---------------------------------------------------------------------------
# .lcne: magic, u32 version, u32 count, u32 dim, count*dim f32 LE, ids
# ---------------------------------------------------------------------------

def write_embeddings(path, ids, vectors) -> None:
    vectors = np.asarray(vectors, dtype="<f4")
    ids = [str(i) for i in ids]
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise ValueError(f"{len(ids)} ids for embedding matrix of shape {vectors.shape}")
    for i in ids:
        if "\n" in i:
            raise ValueError(f"embedding id contains a newline: {i!r}")
    head = MAGIC + struct.pack("<III", VERSION, len(ids), vectors.shape[1])
    Path(path).write_bytes(head + vectors.tobytes() + "\n".join(ids).encode("utf-8"))


def read_embeddings(path):
    """Returns (ids, vectors[count, dim] float32)."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise ValueError(f"{path}: not an LCNE embedding file")
    version, count, dim = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unknown embedding file version {version}")
    end = 16 + count * dim * 4
    if len(data) < end:
        raise ValueError(f"{path}: truncated embedding block")
    vectors = np.frombuffer(data[16:end], dtype="<f4").reshape(count, dim).astype(np.float32)
    tail = data[end:].decode("utf-8")
    ids = tail.split("\n") if count else []
    if len(ids) != count:
        raise ValueError(f"{path}: {count} embeddings but {len(ids)} ids")
    return ids, vectors


class EmbeddingTable:
    def __init__(self, ids, vectors):
        self.ids = list(ids)
        self.vectors = np.asarray(vectors)
        self.index = {k: i for i, k in enumerate(self.ids)}

    @classmethod
    def load(cls, path):
        return cls(*read_embeddings(path))

    def get(self, key) -> np.ndarray:
        try:
            return self.vectors[self.index[key]]
        except KeyError:
            raise KeyError(f"id {key!r} not found in embedding file") from None

    def stack(self, keys) -> np.ndarray:
        return np.stack([self.get(k) for k in keys]) if keys else np.zeros((0, self.vectors.shape[1]))

    def videos(self) -> dict:
        """Group ids of the form ``<video>/<frame>`` by video."""
        groups: dict[str, list[int]] = {}
        for i, k in enumerate(self.ids):
            groups.setdefault(k.rsplit("/", 1)[0], []).append(i)
        return {v: self.vectors[idx] for v, idx in groups.items()}


# ---------------------------------------------------------------------------
# list files
# ---------------------------------------------------------------------------

def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if text and not text.startswith("#"):
                yield lineno, text.split()


@dataclass(frozen=True)
class Pair:
    a: str
    b: str
    same: bool
    fold: int


def read_pairs(path) -> list[Pair]:
    """``idA idB label(1/0) fold`` per line."""
    pairs = []
    for lineno, f in _lines(path):
        if len(f) != 4 or f[2] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected 'idA idB 1|0 fold'")
        pairs.append(Pair(f[0], f[1], f[2] == "1", int(f[3])))
    return pairs


def write_pairs(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.a} {p.b} {int(p.same)} {p.fold}\n")


ROLES = ("gallery", "genuine", "impostor")


@dataclass(frozen=True)
class ProbeEntry:
    id: str
    identity: str
    role: str


def read_probe_list(path) -> list[ProbeEntry]:
    """``id identity role`` per line, role one of gallery|genuine|impostor."""
    out = []
    for lineno, f in _lines(path):
        if len(f) != 3 or f[2] not in ROLES:
            raise ValueError(f"{path}:{lineno}: expected 'id identity gallery|genuine|impostor'")
        out.append(ProbeEntry(*f))
    return out


# ---------------------------------------------------------------------------
# MFM histograms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HistRow:
    layer: str
    kind: str  # value | gradient
    lo: float
    hi: float
    count: int


def _histogram(layer, kind, values, bins):
    """Exact zeros get their own [0, 0] row; the remaining values share ``bins`` bins."""
    values = np.asarray(values, dtype=np.float64).ravel()
    zero = values == 0
    rows = [HistRow(layer, kind, 0.0, 0.0, int(zero.sum()))]
    rest = values[~zero]
    if rest.size:
        counts, edges = np.histogram(rest, bins=bins)
        rows += [HistRow(layer, kind, float(lo), float(hi), int(c))
                 for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    return rows


def mfm_stats(model: NetworkModel, images, labels=None, bins: int = 50, batch_size: int = 16):
    """Histograms of MFM outputs and of the loss gradient w.r.t. MFM inputs.

    Runs a test-mode forward (no dropout) and a backward from the softmax
    loss. Without ``labels`` the network's own predictions are used as
    targets. Returns ``(rows, summary)`` where ``summary`` maps
    ``(layer, kind)`` to (element count, zero fraction).
    """
    images = np.asarray(images)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("mfm_stats needs at least one (1, 128, 128) image")
    values: dict[str, list] = {}
    grads: dict[str, list] = {}
    mode = model.mode
    model.eval()
    try:
        for start in range(0, len(images), batch_size):
            x = images[start:start + batch_size]

            def on_forward(layer, out):
                if layer.kind == "mfm":
                    values.setdefault(layer.name, []).append(out.ravel().copy())

            def on_backward(layer, din):
                if layer.kind == "mfm":
                    grads.setdefault(layer.name, []).append(din.ravel().copy())

            logits = model.forward(x, hook=on_forward)
            y = logits.argmax(axis=1) if labels is None else np.asarray(labels)[start:start + batch_size]
            _, dlogits = softmax_cross_entropy(logits, y)
            model.backward(dlogits, hook=on_backward)
    finally:
        model.mode = mode
    rows, summary = [], {}
    for name in values:
        for kind, store in (("value", values), ("gradient", grads)):
            data = np.concatenate(store[name])
            rows += _histogram(name, kind, data, bins)
            summary[(name, kind)] = (data.size, float(np.mean(data == 0)))
    return rows, summary


def write_histogram_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer,kind,bin_lo,bin_hi,count\n")
        for r in rows:
            fh.write(f"{r.layer},{r.kind},{r.lo:.9g},{r.hi:.9g},{r.count}\n")
