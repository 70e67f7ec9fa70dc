"""SGD training: momentum, per-layer weight decay, step-decayed learning rate,
random crop/mirror augmentation and a one-image-per-identity validation split."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .layers import softmax_cross_entropy
from .tensor import crop, make_rng, mirror
from .zoo import NetworkModel

log = logging.getLogger(__name__)

TRAIN_SIZE = 144
CROP_SIZE = 128
MAX_OFFSET = TRAIN_SIZE - CROP_SIZE
PIXEL_SCALE = 1.0 / 255.0


@dataclass
class SolverConfig:
    momentum: float = 0.9
    base_lr: float = 1e-3
    final_lr: float = 5e-5
    gamma: float = 0.457
    step_iters: int = 0  # 0 -> max_iters // 10
    weight_decay: float = 5e-4
    fc2_weight_decay: float = 5e-3
    dropout_ratio: float = 0.7
    batch_size: int = 64
    max_iters: int = 10000
    seed: int = 42
    augment: bool = True
    val_interval: int = 0  # 0 -> validate only after the last iteration
    checkpoint_interval: int = 0
    # architecture overrides
    width: float = 1.0
    num_classes: int = 0  # 0 -> inferred from the data
    activation: str = "mfm"

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.final_lr > self.base_lr:
            raise ValueError(f"final_lr {self.final_lr} exceeds base_lr {self.base_lr}")
        if self.weight_decay < 0 or self.fc2_weight_decay < 0:
            raise ValueError("weight decays must be non-negative")
        if self.batch_size < 1 or self.max_iters < 0:
            raise ValueError("batch_size must be >= 1 and max_iters >= 0")

    @property
    def step(self) -> int:
        return self.step_iters if self.step_iters > 0 else max(1, self.max_iters // 10)

    def lr(self, iteration: int) -> float:
        return max(self.base_lr * self.gamma ** (iteration // self.step), self.final_lr)


def _coerce(field: dataclasses.Field, raw: str):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    if kind == "bool":
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"{field.name}: not a boolean: {raw!r}")
        return low in ("1", "true", "yes", "on")
    if kind == "int":
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    if kind == "float":
        return float(raw)
    return raw.strip()


def parse_config(text: str, **overrides) -> SolverConfig:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(SolverConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(fields[key], raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return SolverConfig(**values)


def load_config(path, **overrides) -> SolverConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), **overrides)


def format_config(config: SolverConfig) -> str:
    return "\n".join(f"{k} = {v}" for k, v in dataclasses.asdict(config).items())


@dataclass
class TrainSample:
    image: np.ndarray  # 144x144 (or pre-cropped 128x128) grayscale, 0..255
    label: int


def split_train_val(labels, rng: np.random.Generator, num_classes: int | None = None):
    """Pick one random sample per identity for validation.

    Returns ``(train_indices, val_indices)`` as sorted index arrays.
    """
    labels = np.asarray(labels, dtype=np.int64)
    by_id: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        by_id.setdefault(int(lab), []).append(i)
    if num_classes is not None:
        empty = [k for k in range(num_classes) if k not in by_id]
        if empty:
            raise ValueError(f"identities without images: {empty[:10]}")
    val = []
    for ident in sorted(by_id):
        members = by_id[ident]
        if len(members) == 1:
            log.warning("identity %d has a single image; it contributes no training images", ident)
        val.append(members[int(rng.integers(len(members)))])
    val_set = set(val)
    train = [i for i in range(len(labels)) if i not in val_set]
    return np.array(train, dtype=np.int64), np.array(sorted(val), dtype=np.int64)


def draw_augmentation(rng: np.random.Generator):
    """Random (top, left, mirrored) for one training crop."""
    top, left = rng.integers(0, MAX_OFFSET + 1, size=2)
    return int(top), int(left), bool(rng.random() < 0.5)


def augment(image, rng: np.random.Generator) -> np.ndarray:
    """Random 128x128 crop of a 144x144 image, mirrored with p=0.5, scaled to [0, 1]."""
    image = np.asarray(image)
    if image.shape != (TRAIN_SIZE, TRAIN_SIZE):
        raise ValueError(f"augment expects a {TRAIN_SIZE}x{TRAIN_SIZE} image, got {image.shape}")
    top, left, flip = draw_augmentation(rng)
    out = crop(image, top, left, CROP_SIZE, CROP_SIZE)
    if flip:
        out = mirror(out)
    return (out * PIXEL_SCALE).astype(np.float32)[None]


def center_view(image) -> np.ndarray:
    """Evaluation input: center crop for 144x144, as-is for 128x128; scaled to [0, 1]."""
    image = np.asarray(image)
    if image.shape == (TRAIN_SIZE, TRAIN_SIZE):
        image = crop(image, MAX_OFFSET // 2, MAX_OFFSET // 2, CROP_SIZE, CROP_SIZE)
    elif image.shape != (CROP_SIZE, CROP_SIZE):
        raise ValueError(f"expected a {TRAIN_SIZE}x{TRAIN_SIZE} or {CROP_SIZE}x{CROP_SIZE} image, "
                         f"got {image.shape}")
    return (image * PIXEL_SCALE).astype(np.float32)[None]


def make_batch(samples, indices, rng, augmented: bool):
    views = []
    for i in indices:
        img = samples[i].image
        if augmented and np.shape(img) == (TRAIN_SIZE, TRAIN_SIZE):
            views.append(augment(img, rng))
        else:
            views.append(center_view(img))
    return np.stack(views), np.array([samples[i].label for i in indices], dtype=np.int64)


def sgd_step(model: NetworkModel, config: SolverConfig, iteration: int) -> float:
    """One momentum update over every parameter block; returns the lr used.

    v <- momentum * v - lr * lr_mult * (g + decay * w);  w <- w + v
    """
    lr = config.lr(iteration)
    for p in model.params():
        layer = p.name.split(".", 1)[0]
        decay = config.fc2_weight_decay if layer == "fc2" else config.weight_decay
        decay *= p.decay_mult
        dt = p.value.dtype.type
        p.momentum *= dt(config.momentum)
        p.momentum -= dt(lr * p.lr_mult) * (p.grad + dt(decay) * p.value)
        p.value += p.momentum
    return lr


class LogRow(NamedTuple):
    iter: int
    lr: float
    loss: float
    val_accuracy: float | None


class TrainingDiverged(RuntimeError):
    pass


def evaluate_accuracy(model: NetworkModel, samples, indices, batch_size: int = 64) -> float:
    if len(indices) == 0:
        return float("nan")
    mode = model.mode
    model.eval()
    correct = 0
    try:
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            x, y = make_batch(samples, chunk, None, augmented=False)
            correct += int((model.forward(x).argmax(axis=1) == y).sum())
    finally:
        model.mode = mode
    return correct / len(indices)


def train_loop(model: NetworkModel, samples, config: SolverConfig, train_idx=None, val_idx=None,
               rng: np.random.Generator | None = None, start_iter: int = 0, log_rows=None,
               on_checkpoint=None, on_iteration=None) -> list[LogRow]:
    """Minibatch SGD over ``samples[train_idx]`` until ``config.max_iters``.

    ``on_checkpoint(iteration_done, rows)`` fires every
    ``config.checkpoint_interval`` iterations; ``rng`` drives batch
    sampling, augmentation and dropout.
    """
    if not samples:
        raise ValueError("training set is empty")
    rng = rng if rng is not None else make_rng(config.seed)
    train_idx = np.arange(len(samples)) if train_idx is None else np.asarray(train_idx)
    if len(train_idx) == 0:
        raise ValueError("no training samples after the validation split")
    val_idx = np.array([], dtype=np.int64) if val_idx is None else np.asarray(val_idx)
    rows = list(log_rows or [])
    model.train()
    model.set_dropout_rng(rng)
    bs = min(config.batch_size, len(train_idx))
    recent: list[float] = []
    for it in range(start_iter, config.max_iters):
        batch = train_idx[rng.choice(len(train_idx), size=bs, replace=False)]
        x, y = make_batch(samples, batch, rng, augmented=config.augment)
        logits = model.forward(x)
        loss, dlogits = softmax_cross_entropy(logits, y)
        if not math.isfinite(loss):
            finite = logits[np.isfinite(logits)]
            span = f"[{finite.min():.3g}, {finite.max():.3g}]" if finite.size else "all non-finite"
            raise TrainingDiverged(
                f"non-finite loss {loss} at iteration {it} (lr={config.lr(it):.3g}); "
                f"recent losses: {recent[-5:]}; finite logits range {span}")
        model.backward(dlogits)
        lr = sgd_step(model, config, it)
        recent.append(loss)
        last = it + 1 == config.max_iters
        val_due = (config.val_interval and (it + 1) % config.val_interval == 0) or last
        val_acc = None
        if val_due and len(val_idx):
            val_acc = evaluate_accuracy(model, samples, val_idx)
            model.train()
        rows.append(LogRow(it, lr, loss, val_acc))
        if on_iteration is not None:
            on_iteration(rows[-1])
        if on_checkpoint is not None and config.checkpoint_interval and \
                ((it + 1) % config.checkpoint_interval == 0 or last):
            on_checkpoint(it + 1, rows)
    model.eval()
    return rows


def write_log(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,lr,loss,val_accuracy\n")
        for r in rows:
            val = "" if r.val_accuracy is None else f"{r.val_accuracy:.6f}"
            fh.write(f"{r.iter},{r.lr:.9g},{r.loss:.9g},{val}\n")
