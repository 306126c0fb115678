from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import stats

from ..arith import TaskVector, cosine, diff
from ..mininet import MlpSpec, forward
from ..store import Checkpoint, validate_compat


def _logits(ckpt: Checkpoint, spec: MlpSpec, data, split: str) -> tuple[np.ndarray, np.ndarray]:
    x, y = data.split(split)
    if y is None:
        raise ValueError("accuracy needs labelled data")
    if len(x) == 0:
        raise ValueError(f"empty {split} split")
    full = forward(ckpt, spec, x).logits
    return np.take_along_axis(full, data.split_slots(split), axis=1), y


def predictions(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(logits, axis=1)


def accuracy(ckpt: Checkpoint, spec: MlpSpec, data, split: str = "test") -> float:
    """Fraction of rows whose arg-max over the task's head slots equals the label."""
    logits, y = _logits(ckpt, spec, data, split)
    return float(np.mean(predictions(logits) == y))


def normalized_accuracy(acc: float, finetuned_acc: float) -> float:
    if finetuned_acc <= 0:
        raise ZeroDivisionError("fine-tuned accuracy is zero; normalized accuracy undefined")
    return acc / finetuned_acc


def ensemble_accuracy(theta1: Checkpoint, theta2: Checkpoint, alpha: float, spec: MlpSpec, data,
                      split: str = "test") -> float:
    """Accuracy of the logit mixture ``(1 - alpha) f1 + alpha f2``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    l1, y = _logits(theta1, spec, data, split)
    l2, _ = _logits(theta2, spec, data, split)
    return float(np.mean(predictions((1.0 - alpha) * l1 + alpha * l2) == y))


def cosine_matrix(ts: Sequence[TaskVector]) -> np.ndarray:
    """Pairwise cosine similarities; exactly symmetric with a unit diagonal."""
    n = len(ts)
    for t in ts[1:]:
        validate_compat(ts[0].delta, t.delta)
    flat = [t.delta.flatten() for t in ts]
    norms = [np.sqrt(np.dot(f, f)) for f in flat]
    if any(nv == 0.0 for nv in norms):
        raise ZeroDivisionError("zero-norm task vector")
    m = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            m[i, j] = m[j, i] = np.clip(np.dot(flat[i], flat[j]) / (norms[i] * norms[j]), -1.0, 1.0)
    return m


def trajectory_cosines(snapshots: Sequence[tuple[int, Checkpoint]], pre: Checkpoint,
                       final_tv: TaskVector) -> list[tuple[int, float | None]]:
    """Cosine between each intermediate task vector and the final one.

    Snapshots whose task vector is all zeros (e.g. step 0) get ``None``.
    """
    if not snapshots:
        raise ValueError("no snapshots")
    out = []
    for step, ck in snapshots:
        tv = diff(ck, pre)
        if tv.norm() == 0.0:
            out.append((step, None))
        else:
            out.append((step, cosine(tv, final_tv)))
    return out


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two equal-length 1-D sequences")
    if len(x) < 2:
        raise ValueError("pearson needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson correlation undefined for a constant sequence")
    # one sqrt of the product keeps pearson(x, x) at exactly 1.0
    return float(np.clip(np.dot(dx, dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    return pearson(stats.rankdata(xs), stats.rankdata(ys))
