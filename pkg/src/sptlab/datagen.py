"""Synthetic two-anchor trajectory task and JSONL dataset ingestion.

Per-sequence draw order from its keyed stream (documented so other ports agree):

1. two uniforms -> speed warp ``s ~ U(0.12, 0.28)`` and phase ``phi ~ U(0, 2pi)``
2. one Box-Muller pair, first member -> amplitude ``alpha = 1 + 0.1 z``
3. ``2L`` normals -> observation noise, row-major (L, 2), scaled by sigma
4. one integer in {0..3} -> number of outliers
5. partial Fisher-Yates over range(L) -> outlier positions
6. ``2 * n_outliers`` normals -> outlier offsets, row-major

Noise and outliers are always drawn even when disabled, so switching them off
leaves the rest of the sequence unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import SeededRng

SEQ_LEN = 100
NOISE_STD = 0.55
DRIFT_AMP = 0.30
DEFAULT_SIZES = {"train": 100, "val": 200, "test": 400, "unlabeled": 12000}
LABELED_SPLITS = ("train", "val", "test")
SPLITS = LABELED_SPLITS + ("unlabeled",)

# (c1, c2) per label
ANCHORS = {
    0: (np.array([0.66, 0.55]), np.array([-0.495, -0.605])),
    1: (np.array([0.605, -0.55]), np.array([-0.55, 0.605])),
}


@dataclass
class Sequence:
    x: np.ndarray  # (L, d) float, or (L,) int token ids
    label: int | None
    pad_len: int

    @property
    def length(self) -> int:
        return int(self.x.shape[0])


@dataclass
class SequenceSet:
    """A split stored as stacked arrays. ``labels`` uses -1 for "no label"."""

    x: np.ndarray
    labels: np.ndarray
    pad_len: np.ndarray
    kind: str = "continuous"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.pad_len = np.asarray(self.pad_len, dtype=np.int64)
        if self.kind not in ("continuous", "token"):
            raise ValueError(f"unknown sequence kind {self.kind!r}")
        n = len(self.labels)
        if self.x.shape[0] != n or self.pad_len.shape[0] != n:
            raise ValueError("x, labels and pad_len disagree on the number of sequences")
        if n and (self.pad_len.min() < 1 or self.pad_len.max() > self.x.shape[1]):
            raise ValueError("pad_len must lie in [1, L]")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sequence:
        lab = int(self.labels[i])
        return Sequence(self.x[i], None if lab < 0 else lab, int(self.pad_len[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def length(self) -> int:
        return int(self.x.shape[1]) if self.x.ndim > 1 else 0

    @property
    def input_dim(self) -> int:
        return int(self.x.shape[2]) if self.kind == "continuous" else 1

    @property
    def labeled(self) -> bool:
        return len(self) > 0 and bool(np.all(self.labels >= 0))

    def subset(self, idx) -> "SequenceSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SequenceSet(self.x[idx], self.labels[idx], self.pad_len[idx], self.kind)

    def padded_to(self, length: int) -> "SequenceSet":
        cur = self.x.shape[1]
        if length == cur:
            return self
        if length < cur:
            raise ValueError("cannot shrink padded length")
        pad = [(0, 0), (0, length - cur)] + [(0, 0)] * (self.x.ndim - 2)
        return SequenceSet(np.pad(self.x, pad), self.labels, self.pad_len, self.kind)

    @classmethod
    def from_sequences(cls, seqs: list[Sequence], kind: str = "continuous", dim: int = 2):
        if not seqs:
            shape = (0, 0, dim) if kind == "continuous" else (0, 0)
            dtype = np.float64 if kind == "continuous" else np.int64
            return cls(np.zeros(shape, dtype=dtype), np.zeros(0), np.zeros(0), kind)
        length = max(s.length for s in seqs)
        dtype = np.float64 if kind == "continuous" else np.int64
        inner = seqs[0].x.shape[1:]
        x = np.zeros((len(seqs), length) + inner, dtype=dtype)
        for i, s in enumerate(seqs):
            x[i, : s.length] = s.x
        labels = [-1 if s.label is None else s.label for s in seqs]
        return cls(x, labels, [s.pad_len for s in seqs], kind)


@dataclass
class SyntheticDataset:
    train: SequenceSet
    val: SequenceSet
    test: SequenceSet
    unlabeled: SequenceSet
    master_seed: int
    flip_fraction: float
    sizes: dict = field(default_factory=lambda: dict(DEFAULT_SIZES))
    flipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def split(self, name: str) -> SequenceSet:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


def warped_time(length: int, s: float) -> np.ndarray:
    t = np.arange(length) / (length - 1)
    return t + s * np.sin(2 * np.pi * t) * (0.5 + 0.5 * np.cos(2 * np.pi * t))


def clean_trajectory(label: int, s: float, phi: float, alpha: float, length: int = SEQ_LEN):
    """Noise-free path alpha * (mu_j + d_j)."""
    c1, c2 = ANCHORS[label]
    tw = warped_time(length, s)
    m = 0.5 + 0.35 * np.sin(2 * np.pi * tw + phi)
    mu = m[:, None] * c1 + (1.0 - m)[:, None] * c2
    drift = DRIFT_AMP * np.stack([np.sin(2 * np.pi * tw), np.cos(2 * np.pi * tw)], axis=1)
    return alpha * (mu + drift)


def generate_sequence(
    label: int,
    rng: SeededRng,
    length: int = SEQ_LEN,
    noise_std: float = NOISE_STD,
    outliers: bool = True,
) -> Sequence:
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    u = rng.uniform(2)
    s = 0.12 + 0.16 * u[0]
    phi = 2 * np.pi * u[1]
    alpha = 1.0 + 0.1 * rng.normal()
    eps = rng.normal(2 * length).reshape(length, 2)
    n_sp = rng.integers(4)
    where = rng.choice(length, n_sp)
    delta = rng.normal(2 * n_sp).reshape(n_sp, 2)

    x = clean_trajectory(label, s, phi, alpha, length) + noise_std * eps
    if outliers and n_sp:
        x[where] += delta
    return Sequence(x, label, length)


def _sequence_rng(master_seed: int, split: str, index: int) -> SeededRng:
    return SeededRng(master_seed, "datagen", split, index)


def n_flips(flip_fraction: float, n: int) -> int:
    # guard against 0.29 * 100 = 28.999...
    return int(math.floor(flip_fraction * n + 1e-9))


def flip_indices(master_seed: int, n_train: int, flip_fraction: float) -> np.ndarray:
    """Sorted train indices whose labels get flipped."""
    k = n_flips(flip_fraction, n_train)
    return np.sort(SeededRng(master_seed, "datagen", "flips").choice(n_train, k))


def generate_split(
    master_seed: int, split: str, size: int, noise_std: float = NOISE_STD, outliers: bool = True
) -> SequenceSet:
    x = np.zeros((size, SEQ_LEN, 2))
    for i in range(size):
        x[i] = generate_sequence(i % 2, _sequence_rng(master_seed, split, i),
                                 noise_std=noise_std, outliers=outliers).x
    if split == "unlabeled":
        labels = np.full(size, -1)
    else:
        labels = np.arange(size) % 2
    return SequenceSet(x, labels, np.full(size, SEQ_LEN))


def generate_dataset(
    master_seed: int,
    sizes: dict | None = None,
    flip_fraction: float = 0.15,
    noise_std: float = NOISE_STD,
    outliers: bool = True,
) -> SyntheticDataset:
    """Four splits; labeled splits alternate 0/1 by index, train gets exact-count flips."""
    sizes = {**DEFAULT_SIZES, **(sizes or {})}
    unknown = set(sizes) - set(SPLITS)
    if unknown:
        raise ValueError(f"unknown splits {sorted(unknown)}")
    for name in LABELED_SPLITS:
        n = sizes[name]
        if n <= 0 or n % 2:
            raise ValueError(f"split {name!r} needs a positive even size for balance, got {n}")
    if sizes["unlabeled"] < 0:
        raise ValueError("unlabeled size must be nonnegative")
    if not 0.0 <= flip_fraction <= 1.0:
        raise ValueError("flip_fraction must lie in [0, 1]")

    splits = {name: generate_split(master_seed, name, sizes[name], noise_std, outliers) for name in SPLITS}
    flipped = flip_indices(master_seed, sizes["train"], flip_fraction)
    splits["train"].labels[flipped] = 1 - splits["train"].labels[flipped]
    return SyntheticDataset(**splits, master_seed=master_seed, flip_fraction=flip_fraction,
                            sizes=sizes, flipped=flipped)


# ---------------------------------------------------------------- JSONL


class DatasetFormatError(ValueError):
    pass


def _parse_line(obj, lineno: int, schema: str):
    if not isinstance(obj, dict):
        raise DatasetFormatError(f"line {lineno}: expected a JSON object")
    key = "x" if schema == "continuous" else "tokens"
    extra = set(obj) - {"label", key}
    if extra or key not in obj:
        raise DatasetFormatError(f"line {lineno}: expected keys 'label' and {key!r}, got {sorted(obj)}")
    label = obj.get("label")
    if label is not None and (isinstance(label, bool) or not isinstance(label, int) or label < 0):
        raise DatasetFormatError(f"line {lineno}: label must be a nonnegative integer or null")
    body = obj[key]
    if not isinstance(body, list) or not body:
        raise DatasetFormatError(f"line {lineno}: {key!r} must be a non-empty list")
    if schema == "continuous":
        if not all(isinstance(row, list) and row for row in body):
            raise DatasetFormatError(f"line {lineno}: 'x' must be a list of non-empty lists")
        dims = {len(row) for row in body}
        if len(dims) != 1:
            raise DatasetFormatError(f"line {lineno}: inconsistent inner dimension {sorted(dims)}")
        try:
            arr = np.array(body, dtype=np.float64)
        except (TypeError, ValueError) as err:
            raise DatasetFormatError(f"line {lineno}: non-numeric entry in 'x'") from err
        if not np.all(np.isfinite(arr)):
            raise DatasetFormatError(f"line {lineno}: non-finite entry in 'x'")
    else:
        if not all(isinstance(t, int) and not isinstance(t, bool) and t >= 0 for t in body):
            raise DatasetFormatError(f"line {lineno}: tokens must be nonnegative integers")
        arr = np.array(body, dtype=np.int64)
    return Sequence(arr, label, arr.shape[0])


def load_jsonl_dataset(path, schema: str = "continuous") -> SequenceSet:
    """Read one split. Sequences are zero-padded to the longest one in the file."""
    if schema not in ("continuous", "token"):
        raise ValueError(f"schema must be 'continuous' or 'token', got {schema!r}")
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetFormatError(f"line {lineno}: invalid JSON ({err.msg})") from None
            seqs.append(_parse_line(obj, lineno, schema))
    if schema == "continuous" and seqs:
        dims = {s.x.shape[1] for s in seqs}
        if len(dims) != 1:
            raise DatasetFormatError(f"inconsistent inner dimension across lines: {sorted(dims)}")
    dim = seqs[0].x.shape[1] if seqs and schema == "continuous" else 2
    return SequenceSet.from_sequences(seqs, kind=schema, dim=dim)


def write_jsonl(seqset: SequenceSet, path) -> None:
    key = "x" if seqset.kind == "continuous" else "tokens"
    with open(path, "w", encoding="utf-8") as fh:
        for seq in seqset:
            body = seq.x[: seq.pad_len].tolist()
            fh.write(json.dumps({"label": seq.label, key: body}) + "\n")


def load_split_dir(directory, schema: str = "continuous") -> dict[str, SequenceSet]:
    """Load ``<split>.jsonl`` files present in a directory, padded to one shared length."""
    directory = Path(directory)
    splits = {}
    for name in SPLITS:
        p = directory / f"{name}.jsonl"
        if p.exists():
            splits[name] = load_jsonl_dataset(p, schema)
    if not splits:
        raise FileNotFoundError(f"no split files found in {directory}")
    length = max(s.length for s in splits.values())
    return {k: v.padded_to(length) if len(v) else v for k, v in splits.items()}


def write_dataset(ds: SyntheticDataset, directory, extra_manifest: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        write_jsonl(ds.split(name), directory / f"{name}.jsonl")
    manifest = {
        "master_seed": ds.master_seed,
        "sizes": ds.sizes,
        "flip_fraction": ds.flip_fraction,
        "flipped_train_indices": ds.flipped.tolist(),
        "schema": "continuous",
        **(extra_manifest or {}),
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
