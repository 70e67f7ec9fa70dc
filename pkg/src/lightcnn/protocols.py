"""Face verification and identification metrics over cosine similarities.

All thresholds are step-function (no ROC interpolation) and every routine is
deterministic given its inputs and, where it samples, its generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(1, -1) if x.ndim == 1 else x
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    return x / norms


def cosine_matrix(a, b) -> np.ndarray:
    return normalize_rows(a) @ normalize_rows(b).T


@dataclass
class ScoreSet:
    """Verification scores with binary labels (True = same identity)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels, dtype=bool).ravel()
        if self.scores.shape != self.labels.shape:
            raise ValueError(f"{self.scores.size} scores but {self.labels.size} labels")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")


def _accuracy_at(scores, labels, threshold) -> float:
    pred = scores >= threshold
    return float(np.mean(pred == labels))


def best_threshold(scores, labels) -> float:
    """Threshold maximizing accuracy of ``score >= t => same``.

    Candidates are midpoints of adjacent distinct sorted scores; ties pick
    the lowest candidate. A single distinct score is its own threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    uniq = np.unique(scores)
    if uniq.size == 1:
        return float(uniq[0])
    cand = (uniq[:-1] + uniq[1:]) / 2
    order = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tp = order.size - np.searchsorted(order, cand, side="left")
    tn = np.searchsorted(neg, cand, side="left")
    return float(cand[int(np.argmax(tp + tn))])


@dataclass
class VerificationResult:
    mean_accuracy: float
    fold_accuracies: list
    thresholds: list


def verification_10fold(folds) -> VerificationResult:
    """Leave-one-fold-out accuracy: threshold picked on the other folds."""
    folds = [f if isinstance(f, ScoreSet) else ScoreSet(*f) for f in folds]
    if len(folds) < 2:
        raise ValueError(f"need at least 2 folds, got {len(folds)}")
    if any(f.scores.size == 0 for f in folds):
        raise ValueError("every fold needs at least one scored pair")
    accs, taus = [], []
    for i, test in enumerate(folds):
        train_s = np.concatenate([f.scores for j, f in enumerate(folds) if j != i])
        train_l = np.concatenate([f.labels for j, f in enumerate(folds) if j != i])
        tau = best_threshold(train_s, train_l)
        taus.append(tau)
        accs.append(_accuracy_at(test.scores, test.labels, tau))
    return VerificationResult(float(np.mean(accs)), accs, taus)


def far_threshold(negatives, far: float, candidates=None) -> float:
    """Smallest threshold whose false-accept fraction (negatives >= t) is <= ``far``.

    Searched over the observed scores plus +inf. A negative ``far`` is
    unattainable and yields the strictest observed threshold.
    """
    negatives = np.sort(np.asarray(negatives, dtype=np.float64))
    if negatives.size == 0:
        raise ValueError("at least one negative score is required")
    cand = np.unique(negatives if candidates is None else
                     np.concatenate([negatives, np.asarray(candidates, dtype=np.float64)]))
    if far < 0:
        return float(cand[-1])
    rate = (negatives.size - np.searchsorted(negatives, cand, side="left")) / negatives.size
    ok = np.nonzero(rate <= far)[0]
    return float(cand[ok[0]]) if ok.size else float("inf")


def tpr_at_far(scores: ScoreSet, far: float) -> float:
    if not isinstance(scores, ScoreSet):
        scores = ScoreSet(*scores)
    pos = scores.scores[scores.labels]
    neg = scores.scores[~scores.labels]
    if pos.size == 0:
        raise ValueError("at least one positive pair is required")
    tau = far_threshold(neg, far, pos)
    return float(np.mean(pos >= tau))


def rank1_matches(gallery, probes):
    """Index of the most similar gallery row per probe (lowest index on ties) and its score."""
    sims = cosine_matrix(probes, gallery)
    best = sims.argmax(axis=1)
    return best, sims[np.arange(sims.shape[0]), best]


def closed_set_rank1(gallery, gallery_ids, probes, probe_ids) -> float:
    gallery_ids = np.asarray(gallery_ids)
    if gallery_ids.size == 0:
        raise ValueError("gallery is empty")
    if np.unique(gallery_ids).size != gallery_ids.size:
        raise ValueError("gallery identities must be unique")
    best, _ = rank1_matches(gallery, probes)
    return float(np.mean(gallery_ids[best] == np.asarray(probe_ids)))


def open_set_dir_far(gallery, gallery_ids, genuine, genuine_ids, impostors, far: float = 0.01) -> float:
    """Rank-1 detection and identification rate at a false-alarm rate over impostors."""
    gallery_ids = np.asarray(gallery_ids)
    if gallery_ids.size == 0:
        raise ValueError("gallery is empty")
    impostors = np.asarray(impostors, dtype=np.float64)
    if impostors.size == 0:
        raise ValueError("impostor probe set is empty; the rejection threshold is undefined")
    if np.asarray(genuine).size == 0:
        raise ValueError("genuine probe set is empty")
    g_best, g_score = rank1_matches(gallery, genuine)
    _, i_score = rank1_matches(gallery, impostors)
    tau = far_threshold(i_score, far, g_score)
    hit = (gallery_ids[g_best] == np.asarray(genuine_ids)) & (g_score >= tau)
    return float(np.mean(hit))


def ytf_video_similarity(frames_a, frames_b, n: int = 100, rng: np.random.Generator | None = None) -> float:
    """Mean cosine similarity over all cross pairs of up to ``n`` sampled frames per video."""
    a = np.asarray(frames_a, dtype=np.float64)
    b = np.asarray(frames_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both videos need at least one frame")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(a) > n:
        a = a[np.sort(rng.choice(len(a), size=n, replace=False))]
    if len(b) > n:
        b = b[np.sort(rng.choice(len(b), size=n, replace=False))]
    return float(cosine_matrix(a, b).mean())
