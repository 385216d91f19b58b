"""Masking and the two training losses, each returning (loss, d loss / d output)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numeric import SeededRng


@dataclass(frozen=True)
class MaskSpec:
    fraction: float = 0.15
    stream: str = "mask"

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"mask fraction must lie in [0, 1], got {self.fraction}")

    def count(self, pad_len: int) -> int:
        if self.fraction == 0.0:
            return 0
        return min(pad_len, max(1, int(math.floor(self.fraction * pad_len + 0.5))))


def sample_mask(seq, spec: MaskSpec, rng: SeededRng) -> np.ndarray:
    """Sorted masked positions, drawn without replacement among valid positions."""
    k = spec.count(seq.pad_len)
    return np.sort(rng.choice(seq.pad_len, k))


def sample_masks(pad_len, length: int, spec: MaskSpec, rng: SeededRng) -> np.ndarray:
    """Boolean (B, L) mask; sequences draw from ``rng`` in batch order."""
    pad_len = np.asarray(pad_len, dtype=np.int64)
    mask = np.zeros((len(pad_len), length), dtype=bool)
    for b, n in enumerate(pad_len):
        k = spec.count(int(n))
        if k:
            mask[b, rng.choice(int(n), k)] = True
    return mask


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def spt_loss(pred, target, mask, kind: str = "continuous"):
    """Mean masked reconstruction loss over all masked positions of the batch.

    continuous: 0.5 * ||r - u||^2 with ``target`` (B, L, d);
    discrete: -log softmax(r)[u] with integer ``target`` (B, L).
    Single sequences without the batch axis are accepted too.
    """
    pred = np.asarray(pred, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    squeeze = mask.ndim == 1
    if squeeze:
        pred, mask, target = pred[None], mask[None], np.asarray(target)[None]
    n = int(mask.sum())
    if n == 0:
        raise ValueError("spt_loss needs a non-empty mask")
    grad = np.zeros_like(pred)
    if kind == "continuous":
        target = np.asarray(target, dtype=np.float64)
        if target.shape != pred.shape:
            raise ValueError(f"target shape {target.shape} does not match predictions {pred.shape}")
        diff = pred[mask] - target[mask]
        loss = 0.5 * float(np.sum(diff * diff)) / n
        grad[mask] = diff / n
    elif kind == "discrete":
        target = np.asarray(target, dtype=np.int64)
        logp = _log_softmax(pred[mask])
        u = target[mask]
        if np.any(u < 0) or np.any(u >= pred.shape[-1]):
            raise ValueError("target token outside the prediction vocabulary")
        loss = -float(logp[np.arange(n), u].sum()) / n
        g = np.exp(logp)
        g[np.arange(n), u] -= 1.0
        grad[mask] = g / n
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return loss, (grad[0] if squeeze else grad)


def cls_loss(logits, labels):
    """Mean cross-entropy and its gradient. Accepts (K,) with an int label or (B, K)."""
    logits = np.asarray(logits, dtype=np.float64)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"label out of range for {K} classes")
    logp = _log_softmax(logits)
    loss = -float(logp[np.arange(B), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    grad /= B
    return loss, (grad[0] if squeeze else grad)
