"""Privacy and utility metric kernels: EER, UAR and token error rate."""

from typing import Sequence

import numpy as np
from sklearn.metrics import recall_score, roc_curve

from .errors import MetricError


def far_frr(genuine: Sequence[float], impostor: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """False-acceptance and false-rejection rates at every distinct score threshold
    (accept when score >= threshold), starting from +inf."""
    genuine = np.asarray(genuine, dtype=np.float64).ravel()
    impostor = np.asarray(impostor, dtype=np.float64).ravel()
    if genuine.size == 0 or impostor.size == 0:
        raise MetricError("EER needs at least one genuine and one impostor score")
    if not (np.all(np.isfinite(genuine)) and np.all(np.isfinite(impostor))):
        raise MetricError("EER scores must be finite")
    labels = np.concatenate([np.ones(genuine.size), np.zeros(impostor.size)])
    scores = np.concatenate([genuine, impostor])
    fpr, tpr, _ = roc_curve(labels, scores, drop_intermediate=False)
    return fpr, 1.0 - tpr


def eer(genuine: Sequence[float], impostor: Sequence[float]) -> float:
    far, frr = far_frr(genuine, impostor)
    gap = frr - far  # non-increasing along the sweep
    k = int(np.argmax(gap <= 0))
    if gap[k] == 0 or k == 0:
        return float(far[k])
    t = gap[k - 1] / (gap[k - 1] - gap[k])
    return float(far[k - 1] + t * (far[k] - far[k - 1]))


def uar(confusion: np.ndarray) -> float:
    """Mean per-class recall of a (true x predicted) count matrix."""
    confusion = np.asarray(confusion, dtype=np.float64)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1] or confusion.shape[0] == 0:
        raise MetricError(f"confusion matrix must be square and non-empty, got {confusion.shape}")
    support = confusion.sum(axis=1)
    if np.any(support <= 0):
        raise MetricError(f"class {int(np.argmin(support))} has no samples")
    return float(np.mean(np.diag(confusion) / support))


def uar_from_labels(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    """UAR over the classes present in ``y_true``."""
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise MetricError("no labels to score")
    return float(
        recall_score(y_true, np.asarray(y_pred), labels=np.unique(y_true), average="macro", zero_division=0)
    )


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    ref, hyp = list(ref), list(hyp)
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    previous = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        current = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            current[j] = min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (r != h))
        previous = current
    return previous[-1]


def token_error_rate(ref: Sequence, hyp: Sequence) -> float:
    if len(ref) == 0:
        raise MetricError("reference token sequence is empty")
    return edit_distance(ref, hyp) / len(ref)


def collapse_repeats(tokens: Sequence) -> list:
    out = []
    for t in tokens:
        if not out or out[-1] != t:
            out.append(t)
    return out
