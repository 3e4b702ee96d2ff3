"""Scalar evaluation: Pearson correlation, equal error rate, feature distances."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatchError, InvalidInputError, UndefinedCorrelationError


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise DimensionMismatchError(f"sequences have lengths {x.size} and {y.size}")
    if x.size < 2:
        raise InvalidInputError("need at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(dx @ dx)
    sy = np.sqrt(dy @ dy)
    if sx == 0 and sy == 0:
        raise UndefinedCorrelationError("both sequences are constant")
    if sx == 0 or sy == 0:
        return 0.0
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def eer(genuine_scores, impostor_scores) -> tuple[float, float]:
    """Equal error rate and its threshold; higher scores mean more genuine.

    A trial is accepted when ``score >= threshold``.  Thresholds sweep all
    distinct scores (plus one just above the maximum); the rate is read off
    where the false-reject and false-accept curves cross, interpolating
    linearly between the two bracketing operating points.
    """
    gen = np.asarray(genuine_scores, dtype=np.float64).reshape(-1)
    imp = np.asarray(impostor_scores, dtype=np.float64).reshape(-1)
    if gen.size == 0 or imp.size == 0:
        raise InvalidInputError("genuine and impostor score lists must be non-empty")
    if not (np.all(np.isfinite(gen)) and np.all(np.isfinite(imp))):
        raise InvalidInputError("scores must be finite")
    thresholds = np.unique(np.concatenate([gen, imp]))
    thresholds = np.append(thresholds, np.nextafter(thresholds[-1], np.inf))
    gen_sorted = np.sort(gen)
    imp_sorted = np.sort(imp)
    frr = np.searchsorted(gen_sorted, thresholds, side="left") / gen.size
    far = 1.0 - np.searchsorted(imp_sorted, thresholds, side="left") / imp.size
    diff = frr - far  # non-decreasing, <= 0 at the first threshold, > 0 at the last
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0 or i == 0:
        return float(far[i]), float(thresholds[i])
    a = -diff[i - 1] / (diff[i] - diff[i - 1])
    rate = far[i - 1] + a * (far[i] - far[i - 1])
    thr = thresholds[i - 1] + a * (thresholds[i] - thresholds[i - 1])
    return float(rate), float(thr)


def _matrix(a) -> np.ndarray:
    arr = np.asarray(a.data if hasattr(a, "data") else a, dtype=np.float64)
    return arr[:, None] if arr.ndim == 1 else arr


def feature_distance(a, b, kind: str = "l2") -> float:
    """Frame-averaged distance between two equally shaped feature matrices.

    ``l2`` is the mean per-frame Euclidean distance; ``cosine`` is one minus
    the mean per-frame cosine similarity (a zero frame has similarity 0).
    This is a feature-space stand-in for spectral distances.
    """
    x, y = _matrix(a), _matrix(b)
    if x.shape != y.shape:
        raise DimensionMismatchError(f"shapes {x.shape} and {y.shape} differ")
    if kind == "l2":
        return float(np.mean(np.linalg.norm(x - y, axis=1)))
    if kind == "cosine":
        nx = np.linalg.norm(x, axis=1)
        ny = np.linalg.norm(y, axis=1)
        denom = nx * ny
        sims = np.where(denom > 0, np.einsum("ij,ij->i", x, y) / np.where(denom > 0, denom, 1.0), 0.0)
        return float(1.0 - np.mean(sims))
    raise InvalidInputError(f"unknown distance kind {kind!r}; use 'l2' or 'cosine'")


def nearest_centroid_purity(vectors, labels) -> float:
    """Leave-one-out nearest-class-centroid accuracy.

    Each vector is assigned to the class whose centroid (computed without
    that vector) is closest; returns the fraction assigned to their own
    class.  Chance level is about ``1 / n_classes``.
    """
    X = np.asarray(vectors, dtype=np.float64)
    y = np.asarray(labels)
    classes, inv = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise InvalidInputError("need at least two classes")
    sums = np.zeros((classes.size, X.shape[1]))
    np.add.at(sums, inv, X)
    counts = np.bincount(inv, minlength=classes.size).astype(np.float64)
    correct = 0
    for i in range(X.shape[0]):
        s = sums.copy()
        c = counts.copy()
        s[inv[i]] -= X[i]
        c[inv[i]] -= 1
        valid = c > 0
        cents = s[valid] / c[valid, None]
        d = np.sum((cents - X[i]) ** 2, axis=1)
        pick = np.flatnonzero(valid)[int(np.argmin(d))]
        correct += pick == inv[i]
    return correct / X.shape[0]


def best_match_correlations(truth, estimate) -> np.ndarray:
    """For each column of ``truth``, the largest |PCC| with any column of ``estimate``."""
    t = _matrix(truth)
    e = _matrix(estimate)
    out = np.empty(t.shape[1])
    for k in range(t.shape[1]):
        best = 0.0
        for j in range(e.shape[1]):
            try:
                best = max(best, abs(pearson(t[:, k], e[:, j])))
            except UndefinedCorrelationError:
                pass
        out[k] = best
    return out
