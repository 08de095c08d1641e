"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and results match the compiled module; both are exercised by the
test suite and compared in ``benchmarks/bench_kernels.py``.
"""
from __future__ import annotations

import numpy as np


def softmax_row(phi: np.ndarray, theta: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Softmax of ``phi @ theta`` restricted to tokens with ``allowed`` nonzero."""
    ok = allowed != 0
    logits = phi @ theta
    logits = logits - logits[ok].max()
    e = np.where(ok, np.exp(logits), 0.0)
    return e / e.sum()


def sample_index(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw: first index whose cumulative mass exceeds ``u``."""
    c = np.cumsum(probs)
    idx = int(np.searchsorted(c, u * c[-1], side="right"))
    return min(idx, len(probs) - 1)


def batch_log_probs(feats: np.ndarray, theta: np.ndarray, tokens: np.ndarray,
                    allowed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row log-probability of ``tokens`` and the softmax matrix, each row
    restricted to its ``allowed`` tokens (a disallowed token scores -inf)."""
    ok = allowed != 0
    logits = np.where(ok, feats @ theta, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        lse = np.log(np.exp(logits).sum(axis=1, keepdims=True))
    logp = logits - lse
    rows = np.arange(len(tokens))
    return logp[rows, tokens], np.exp(logp)


def weighted_grad(feats: np.ndarray, probs: np.ndarray, tokens: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_r w_r * phi_r (onehot(token_r) - p_r)^T."""
    resid = -probs * weights[:, None]
    resid[np.arange(len(tokens)), tokens] += weights
    return feats.T @ resid


def pool_labels(crop: np.ndarray, resolution: int, min_share: float) -> np.ndarray:
    """Downsample a label crop to at most resolution x resolution.

    A pooled cell takes a nonzero label only if that label covers at least
    ``min_share`` of its block; otherwise it reads as normal (0).
    """
    h, w = crop.shape
    block = max(1, -(-max(h, w) // resolution))
    if block == 1:
        return crop.copy()
    ph, pw = -(-h // block), -(-w // block)
    out = np.zeros((ph, pw), dtype=crop.dtype)
    for i in range(ph):
        for j in range(pw):
            cell = crop[i * block:(i + 1) * block, j * block:(j + 1) * block]
            labels, counts = np.unique(cell[cell > 0], return_counts=True)
            if len(labels):
                k = int(np.argmax(counts))
                if counts[k] >= min_share * block * block:
                    out[i, j] = labels[k]
    return out


def separated_pairs(boxes: np.ndarray, eps: float) -> int:
    """Number of pairs i < j with IoU(box_i, box_j) < eps; boxes is (k, 4) int."""
    k = len(boxes)
    count = 0
    for i in range(k):
        for j in range(i + 1, k):
            a, b = boxes[i], boxes[j]
            w = min(a[2], b[2]) - max(a[0], b[0])
            h = min(a[3], b[3]) - max(a[1], b[1])
            inter = w * h if w > 0 and h > 0 else 0
            union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
            if inter / union < eps:
                count += 1
    return count
