"""Checkpoint directories: ``manifest.json`` plus a raw little-endian float64 ``payload.bin``.

Blocks are concatenated in sorted-name order. Integrity is checked through
lengths and shapes only; there is no checksum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .model import ModelConfig, check_params

FORMAT = "sptlab-checkpoint"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict
    config: ModelConfig
    provenance: dict = field(default_factory=dict)


def save_checkpoint(params: dict, meta, path) -> Path:
    """``meta`` is a Checkpoint-free pair: a ModelConfig, or (ModelConfig, provenance dict)."""
    cfg, prov = (meta, {}) if isinstance(meta, ModelConfig) else meta
    check_params(params, cfg)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "config": cfg.to_dict(),
        "blocks": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "provenance": prov,
    }
    payload = b"".join(np.ascontiguousarray(params[n], dtype=_DTYPE).tobytes() for n in names)
    (path / "payload.bin").write_bytes(payload)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_checkpoint(ckpt: Checkpoint, path) -> Path:
    return save_checkpoint(ckpt.params, (ckpt.config, ckpt.provenance), path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no manifest.json in {path}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not an sptlab checkpoint")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {manifest.get('format_version')} unsupported (expected {FORMAT_VERSION})"
        )
    cfg = ModelConfig.from_dict(manifest["config"])
    payload = (path / "payload.bin").read_bytes()
    sizes = [int(np.prod(b["shape"])) for b in manifest["blocks"]]
    expected = 8 * sum(sizes)
    if len(payload) != expected:
        raise CheckpointError(f"payload has {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype=_DTYPE).astype(np.float64)
    params, offset = {}, 0
    for block, n in zip(manifest["blocks"], sizes):
        params[block["name"]] = flat[offset : offset + n].reshape(block["shape"]).copy()
        offset += n
    try:
        check_params(params, cfg)
    except ValueError as err:
        raise CheckpointError(str(err)) from None
    return Checkpoint(params, cfg, manifest.get("provenance", {}))
