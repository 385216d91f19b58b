"""Attention probes, band mass, weight histograms and heatmap export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import forward

STOCHASTIC_TOL = 1e-9
DEFAULT_BANDWIDTH = 5


@dataclass
class AttentionProbe:
    """Per-layer raw scores and attention weights, each (H, L, L)."""

    scores: list
    attention: list
    source: str  # "real-input" | "positional-only"
    pad_len: int

    def head(self, layer=0, head=0):
        """(S, A) restricted to the valid positions."""
        n = self.pad_len
        return self.scores[layer][head, :n, :n], self.attention[layer][head, :n, :n]


def _as_batch(seq, cfg):
    x = np.asarray(seq.x if hasattr(seq, "x") else seq)
    pad_len = int(getattr(seq, "pad_len", x.shape[0]))
    if pad_len < 1:
        raise ValueError("cannot probe a sequence with no valid positions")
    if cfg.input_kind == "continuous" and x.ndim == 1:
        x = x[:, None]
    return x[None], pad_len


def _probe(ckpt, x, pad_len, source, zero_content=False):
    _, cache = forward(ckpt.params, ckpt.config, x, [pad_len], zero_content=zero_content)
    maps = cache.attention_maps()
    return AttentionProbe([S[0] for S, _ in maps], [A[0] for _, A in maps], source, pad_len)


def attention_probe(ckpt, seq) -> AttentionProbe:
    """Eval-mode forward on one sequence; padded keys get zero weight."""
    x, pad_len = _as_batch(seq, ckpt.config)
    return _probe(ckpt, x, pad_len, "real-input")


def positional_probe(ckpt, length: int = 100) -> AttentionProbe:
    """Forward with the encoded content set to zero, so only the positional encoding reaches Q and K."""
    cfg = ckpt.config
    if not cfg.uses_abs_pe:
        raise ValueError(f"positional probe needs an absolute positional encoding; pe_variant is {cfg.pe_variant!r}")
    if cfg.input_kind == "continuous":
        x = np.zeros((1, length, cfg.input_dim))
    else:
        x = np.zeros((1, length), dtype=np.int64)
    return _probe(ckpt, x, length, "positional-only", zero_content=True)


def band_mass(A, w: int = DEFAULT_BANDWIDTH) -> float:
    """Mean over rows of the attention mass within ``w`` of the diagonal."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    L = A.shape[0]
    if not 0 <= w < L:
        raise ValueError(f"bandwidth must satisfy 0 <= w < {L}, got {w}")
    if np.any(A < -STOCHASTIC_TOL) or np.abs(A.sum(axis=1) - 1.0).max() > STOCHASTIC_TOL:
        raise ValueError("attention matrix is not row-stochastic")
    idx = np.arange(L)
    band = np.abs(idx[:, None] - idx[None, :]) <= w
    return float((A * band).sum(axis=1).mean())


def weight_histogram(block, bins: int = 30):
    """Equal-width histogram over [min, max]. Returns (edges, counts)."""
    if bins < 2:
        raise ValueError("bins must be at least 2")
    v = np.asarray(block, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty block")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        return np.array([lo, hi]), np.array([v.size])
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return edges, counts


def histogram_csv(edges, counts, name: str = "") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "bin_lo", "bin_hi", "count"])
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        w.writerow([name, repr(float(lo)), repr(float(hi)), int(c)])
    return buf.getvalue()


def export_pgm(matrix, path, meta: dict | None = None) -> Path:
    """8-bit binary PGM, min-max scaled, plus a JSON sidecar holding the scale."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("heatmaps need a 2-D matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    lo, hi = float(m.min()), float(m.max())
    span = hi - lo
    img = np.zeros(m.shape, dtype=np.uint8) if span == 0 else np.rint((m - lo) / span * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode()
    path.write_bytes(header + img.tobytes())
    side = {"min": lo, "max": hi, "rows": m.shape[0], "cols": m.shape[1], **(meta or {})}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    cols, rows = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


def qk_product(params, layer: int = 0) -> np.ndarray:
    """W_Q W_K^T, the bilinear form acting on (content + position)."""
    return params[f"layer{layer}.WQ"] @ params[f"layer{layer}.WK"].T
