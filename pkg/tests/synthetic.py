"""Small deterministic datasets shared by the trainer, CLI and acceptance tests."""

import numpy as np

from lightcnn.tensor import make_rng
from lightcnn.trainer import SolverConfig, TrainSample


def identity_images(n_ids=16, per_id=8, size=128, seed=0, noise=20.0):
    """Per identity: a coarse 8x8 random pattern blown up to ``size``, plus pixel noise.

    Returns (images[n_ids * per_id, size, size] in 0..255, labels).
    """
    rng = make_rng(seed)
    block = size // 8
    images, labels = [], []
    for k in range(n_ids):
        proto = np.kron(rng.uniform(0, 255, (8, 8)), np.ones((block, block)))
        for _ in range(per_id):
            images.append(np.clip(proto + rng.normal(0, noise, (size, size)), 0, 255))
            labels.append(k)
    return np.stack(images), np.array(labels)


def smoke_samples(seed=0):
    images, labels = identity_images(seed=seed)
    return [TrainSample(img, int(lab)) for img, lab in zip(images, labels)]


SMOKE_ITERS = 500
SMOKE_CONFIG = dict(
    base_lr=1e-3, final_lr=5e-5, gamma=0.457, step_iters=250, momentum=0.9,
    weight_decay=5e-4, fc2_weight_decay=5e-3, dropout_ratio=0.7,
    batch_size=16, max_iters=SMOKE_ITERS, augment=False, width=0.25, num_classes=16,
)


def smoke_config(**overrides):
    return SolverConfig(**{**SMOKE_CONFIG, **overrides})
