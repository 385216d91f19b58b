"""Pretrain / finetune / scratch pipelines, sweeps, and displacement tables.

All randomness for a run flows from ``RunConfig.seed`` through keyed streams:
``(seed, "spt", "shuffle" | "mask" | "dropout", epoch)`` for pretraining and
``(seed, "label", "shuffle" | "dropout", epoch)`` for label training, shared by
finetune and scratch runs so both arms see the same batch order.
Initialization uses ``(seed, "init", block)``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .config import RunConfig
from .datagen import SequenceSet, generate_dataset, load_split_dir
from .model import ModelConfig, backward, check_params, forward, init_params
from .numeric import SeededRng, frobenius_distance
from .objectives import MaskSpec, cls_loss, sample_masks, spt_loss
from .optim import AdamWState, adamw_step, hybrid_init, select_params

log = logging.getLogger(__name__)

EVAL_CHUNK = 32


def idle_blocks(params, objective: str) -> set[str]:
    """Blocks an objective never reads; they stay fixed instead of being decayed."""
    if objective == "spt":
        return {k for k in params if k.startswith("head.cls.")}
    return {k for k in params if k.startswith("head.spt.") or k == "encoder.mask"}


class PipelineError(ValueError):
    pass


# ------------------------------------------------------------------- metrics


@dataclass
class MetricsHistory:
    records: list = field(default_factory=list)  # (epoch, split, loss, accuracy|None)
    initial: dict = field(default_factory=dict)  # split -> (loss, accuracy) before training

    def add(self, epoch, split, loss, accuracy=None):
        self.records.append((int(epoch), split, float(loss), None if accuracy is None else float(accuracy)))

    def series(self, split, what="accuracy"):
        i = 2 if what == "loss" else 3
        return [(r[0], r[i]) for r in self.records if r[1] == split]

    @property
    def summary(self) -> dict:
        """Peak accuracies. Test is reported at the best-validation epoch (first on ties)."""
        val = self.series("val")
        if not val and "val" in self.initial:
            val = [(0, self.initial["val"][1])]
        out = {}
        if val:
            best_epoch, best_val = max(val, key=lambda r: (r[1], -r[0]))
            out["best_val_acc"] = best_val
            out["best_epoch"] = best_epoch
            test = dict(self.series("test"))
            if best_epoch == 0 and "test" in self.initial:
                test[0] = self.initial["test"][1]
            if best_epoch in test:
                out["test_at_best_val"] = test[best_epoch]
        for split in ("train", "test"):
            acc = [a for _, a in self.series(split) if a is not None]
            if not acc and split in self.initial and self.initial[split][1] is not None:
                acc = [self.initial[split][1]]
            if acc:
                out[f"peak_{split}_acc"] = max(acc)
        return out

    def to_csv(self, header: dict | None = None) -> str:
        buf = io.StringIO()
        for k, v in (header or {}).items():
            buf.write(f"# {k}={v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "accuracy"])
        for e, s, loss, acc in self.records:
            w.writerow([e, s, repr(loss), "" if acc is None else repr(acc)])
        return buf.getvalue()


# ---------------------------------------------------------------------- data


@lru_cache(maxsize=4)
def _synthetic(seed, sizes_items, flip_fraction):
    ds = generate_dataset(seed, dict(sizes_items) if sizes_items else None, flip_fraction)
    return {name: ds.split(name) for name in ("train", "val", "test", "unlabeled")}


def resolve_dataset(ref) -> dict[str, SequenceSet]:
    if ref.kind == "synthetic":
        items = tuple(sorted(ref.sizes.items())) if ref.sizes else None
        return _synthetic(ref.seed, items, ref.flip_fraction)
    return load_split_dir(ref.dir, ref.schema)


def model_config_for(splits: dict, model: ModelConfig) -> ModelConfig:
    """Check that the data fits the model's input side."""
    for name, s in splits.items():
        if not len(s):
            continue
        if s.kind == "continuous" and (model.input_kind != "continuous" or s.input_dim != model.input_dim):
            raise PipelineError(f"split {name!r} has input dim {s.input_dim}; model expects {model.input_dim}")
        if s.kind == "token" and model.input_kind != "token":
            raise PipelineError(f"split {name!r} holds tokens but the model expects continuous input")
    return model


# ------------------------------------------------------------------ training


def evaluate(params, cfg: ModelConfig, data: SequenceSet, head="cls", mask_seed=None, mask_fraction=0.15):
    """Mean loss and accuracy (classification) or mean masked loss (reconstruction)."""
    n = len(data)
    if n == 0:
        return float("nan"), None
    if head == "cls":
        total, correct = 0.0, 0
        for s in range(0, n, EVAL_CHUNK):
            x, pl, y = data.x[s : s + EVAL_CHUNK], data.pad_len[s : s + EVAL_CHUNK], data.labels[s : s + EVAL_CHUNK]
            logits, _ = forward(params, cfg, x, pl, head="cls")
            loss, _ = cls_loss(logits, y)
            total += loss * len(y)
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
        return total / n, correct / n
    rng = SeededRng(mask_seed, "eval-mask")
    spec = MaskSpec(mask_fraction)
    kind = "continuous" if cfg.input_kind == "continuous" else "discrete"
    total, count = 0.0, 0
    for s in range(0, n, EVAL_CHUNK):
        x, pl = data.x[s : s + EVAL_CHUNK], data.pad_len[s : s + EVAL_CHUNK]
        mask = sample_masks(pl, x.shape[1], spec, rng)
        if not mask.any():
            continue
        r, _ = forward(params, cfg, x, pl, head="spt", mask=mask)
        loss, _ = spt_loss(r, x, mask, kind)
        total += loss * mask.sum()
        count += int(mask.sum())
    return (total / count if count else float("nan")), None


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_reconstruction(
    params, cfg: ModelConfig, data: SequenceSet, *, epochs, lr, batch_size, seed,
    weight_decay=0.0, mask_fraction=0.15, frozen=(), val: SequenceSet | None = None,
    snapshots=(), on_snapshot=None,
):
    """Masked-reconstruction training. Returns (params, history)."""
    if len(data) == 0:
        raise PipelineError("reconstruction training needs unlabeled sequences")
    spec = MaskSpec(mask_fraction)
    if spec.fraction == 0:
        raise PipelineError("mask_fraction must be positive for reconstruction training")
    kind = "continuous" if cfg.input_kind == "continuous" else "discrete"
    frozen = set(frozen) | idle_blocks(params, "spt")
    state = AdamWState()
    hist = MetricsHistory()
    for epoch in range(1, epochs + 1):
        shuffle = SeededRng(seed, "spt", "shuffle", epoch)
        mrng = SeededRng(seed, "spt", "mask", epoch)
        drng = SeededRng(seed, "spt", "dropout", epoch)
        total, count = 0.0, 0
        for idx in _epoch_batches(len(data), batch_size, shuffle):
            x, pl = data.x[idx], data.pad_len[idx]
            mask = sample_masks(pl, x.shape[1], spec, mrng)
            r, cache = forward(params, cfg, x, pl, head="spt", mask=mask, mode="train", rng=drng)
            loss, g = spt_loss(r, x, mask, kind)
            grads = backward(cache, g, frozen)
            params, state = adamw_step(params, grads, state, lr, weight_decay=weight_decay, frozen=frozen)
            total += loss * mask.sum()
            count += int(mask.sum())
        hist.add(epoch, "train", total / count)
        if val is not None and len(val):
            hist.add(epoch, "val", evaluate(params, cfg, val, "spt", mask_seed=seed, mask_fraction=mask_fraction)[0])
        log.info("spt epoch %d loss %.5f", epoch, total / count)
        if on_snapshot is not None and epoch in snapshots:
            on_snapshot(epoch, params)
    return params, hist


def train_classifier(
    params, cfg: ModelConfig, splits: dict, *, epochs, lr, batch_size, seed,
    weight_decay=0.0, frozen=(), stream="label",
):
    """Cross-entropy training on ``splits['train']`` with per-epoch evaluation of every labeled split."""
    train = splits["train"]
    if not train.labeled:
        raise PipelineError("the train split must be fully labeled")
    frozen = set(frozen) | idle_blocks(params, "label")
    state = AdamWState()
    hist = MetricsHistory()
    eval_splits = [s for s in ("train", "val", "test") if s in splits and len(splits[s]) and splits[s].labeled]
    for s in eval_splits:
        hist.initial[s] = evaluate(params, cfg, splits[s])
    for epoch in range(1, epochs + 1):
        shuffle = SeededRng(seed, stream, "shuffle", epoch)
        drng = SeededRng(seed, stream, "dropout", epoch)
        for idx in _epoch_batches(len(train), batch_size, shuffle):
            logits, cache = forward(params, cfg, train.x[idx], train.pad_len[idx], head="cls", mode="train", rng=drng)
            _, g = cls_loss(logits, train.labels[idx])
            grads = backward(cache, g, frozen)
            params, state = adamw_step(params, grads, state, lr, weight_decay=weight_decay, frozen=frozen)
        for s in eval_splits:
            loss, acc = evaluate(params, cfg, splits[s])
            hist.add(epoch, s, loss, acc)
    return params, hist


# ----------------------------------------------------------------- pipelines


def _provenance(cfg: RunConfig, **extra) -> dict:
    from .config import config_hash

    return {"stage": cfg.stage, "seed": cfg.seed, "config_hash": config_hash(cfg),
            "dataset": cfg.dataset.to_dict(), "dataset_hash": config_hash(cfg.dataset.to_dict()), **extra}


def run_pretrain(cfg: RunConfig, out_dir=None):
    """Masked-reconstruction stage. Returns (Checkpoint, MetricsHistory).

    With ``out_dir`` set, snapshot checkpoints go to ``out_dir/snapshots/epoch_NNNN``.
    """
    if cfg.stage != "spt":
        raise PipelineError(f"run_pretrain needs stage 'spt', got {cfg.stage!r}")
    if cfg.init is not None:
        raise PipelineError("pretraining starts from random initialization; drop 'init'")
    splits = resolve_dataset(cfg.dataset)
    data = splits.get("unlabeled")
    if data is None or len(data) == 0:
        raise PipelineError("dataset has no unlabeled split to pretrain on")
    model = model_config_for(splits, cfg.model)
    params = init_params(model, cfg.seed)
    frozen = select_params(cfg.frozen, params)

    on_snapshot = None
    if out_dir is not None:
        from pathlib import Path

        from .checkpoint import save_checkpoint

        def on_snapshot(epoch, p):
            save_checkpoint(p, (model, _provenance(cfg, epochs_done=epoch)),
                            Path(out_dir) / "snapshots" / f"epoch_{epoch:04d}")

    params, hist = train_reconstruction(
        params, model, data, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed,
        weight_decay=cfg.weight_decay, mask_fraction=cfg.mask_fraction, frozen=frozen,
        val=splits.get("val"), snapshots=cfg.snapshots, on_snapshot=on_snapshot,
    )
    return Checkpoint(params, model, _provenance(cfg, epochs_done=cfg.epochs)), hist


def run_finetune(cfg: RunConfig, init_ckpt: Checkpoint | None = None):
    """Label training (stage finetune or scratch). Returns (Checkpoint, MetricsHistory).

    A finetune run reads ``cfg.init['checkpoint']`` unless ``init_ckpt`` is given;
    the checkpoint may come from pretraining on a different dataset.
    """
    if cfg.stage not in ("finetune", "scratch"):
        raise PipelineError(f"run_finetune needs stage 'finetune' or 'scratch', got {cfg.stage!r}")
    splits = resolve_dataset(cfg.dataset)
    model = model_config_for(splits, cfg.model)
    if cfg.stage == "scratch":
        params = init_params(model, cfg.seed)
        select = ()
    else:
        if init_ckpt is None:
            if cfg.init is None:
                raise PipelineError("finetune needs an init checkpoint")
            init_ckpt = load_checkpoint(cfg.init["checkpoint"])
        if init_ckpt.config != model:
            raise PipelineError("checkpoint config does not match the run's model config")
        select = select_params(cfg.init["select"] if cfg.init else "all", init_ckpt.params)
        params = hybrid_init(init_ckpt, cfg.seed, select, model)
    frozen = select_params(cfg.frozen, params)
    params, hist = train_classifier(
        params, model, splits, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed,
        weight_decay=cfg.weight_decay, frozen=frozen,
    )
    prov = _provenance(cfg, epochs_done=cfg.epochs, loaded=list(select), frozen=list(frozen))
    return Checkpoint(params, model, prov), hist


# -------------------------------------------------------------------- sweeps

SWEEP_COLUMNS = ["lr", "seed", "pretrain_epochs", "init", "peak_train_acc", "peak_test_acc"]
SUMMARY_COLUMNS = ["lr", "pretrain_epochs", "init", "n",
                   "train_mean", "train_min", "train_max", "test_mean", "test_min", "test_max"]


@dataclass
class SweepResult:
    rows: list  # dicts keyed by SWEEP_COLUMNS plus "error"
    summary: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])
        for r in self.rows:
            if r["error"]:
                buf.write(f"# error lr={r['lr']!r} seed={r['seed']} pretrain_epochs={r['pretrain_epochs']} "
                          f"init={r['init']}: {r['error']}\n")
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in self.summary:
            w.writerow([_fmt(r[c]) for c in SUMMARY_COLUMNS])
        return buf.getvalue()

    def best(self, pretrain_epochs, init, what="test_mean"):
        cands = [r for r in self.summary if r["pretrain_epochs"] == pretrain_epochs and r["init"] == init and r["n"]]
        return max(cands, key=lambda r: (r[what], -r["lr"])) if cands else None


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _normalize_grid(grid: dict) -> dict:
    if not isinstance(grid, dict):
        raise PipelineError("grid must be a mapping")
    out = {}
    for key, alias, default in (("lr", "lrs", None), ("seed", "seeds", None),
                                ("pretrain_epochs", None, [0]), ("init", None, ["all"])):
        val = grid.get(key, grid.get(alias) if alias else None)
        if val is None:
            val = default
        if val is None:
            raise PipelineError(f"grid is missing {key!r}")
        val = list(val) if isinstance(val, (list, tuple)) else [val]
        if not val:
            raise PipelineError(f"grid axis {key!r} is empty")
        out[key] = val
    return out


def _sweep_cell(base: RunConfig, pretrain: RunConfig, lr, seed, pe, init, ckpt):
    if pe == 0 or init == "scratch":
        cfg = base.replace(stage="scratch", seed=seed, lr=float(lr), init=None)
        _, hist = run_finetune(cfg)
    else:
        cfg = base.replace(stage="finetune", seed=seed, lr=float(lr),
                           init={"checkpoint": f"<spt seed={seed} epochs={pe}>", "select": init})
        _, hist = run_finetune(cfg, init_ckpt=ckpt)
    return hist.summary


def _pretrain_cached(pretrain: RunConfig, seed, pe, cache_dir):
    if cache_dir is not None:
        from pathlib import Path

        from .checkpoint import write_checkpoint
        from .config import config_hash

        cfg = pretrain.replace(seed=seed, epochs=pe, snapshots=())
        path = Path(cache_dir) / f"spt-{config_hash(cfg)}"
        if (path / "manifest.json").exists():
            return load_checkpoint(path)
        ckpt, _ = run_pretrain(cfg)
        write_checkpoint(ckpt, path)
        return ckpt
    return run_pretrain(pretrain.replace(seed=seed, epochs=pe, snapshots=()))[0]


def _run_seed_group(base, pretrain, g, seed, cache_dir):
    """All cells sharing one seed, so each SPT checkpoint is computed once."""
    out = {}
    ckpts = {}
    for pe in g["pretrain_epochs"]:
        if pe and any(i != "scratch" for i in g["init"]):
            try:
                ckpts[pe] = _pretrain_cached(pretrain, seed, pe, cache_dir)
            except Exception as err:  # recorded per cell
                ckpts[pe] = err
    for lr in g["lr"]:
        for pe in g["pretrain_epochs"]:
            for init in g["init"]:
                key = (float(lr), seed, pe, init)
                ck = ckpts.get(pe)
                try:
                    if isinstance(ck, Exception) and pe and init != "scratch":
                        raise ck
                    out[key] = (_sweep_cell(base, pretrain, lr, seed, pe, init, ck), None)
                except Exception as err:
                    out[key] = (None, f"{type(err).__name__}: {err}")
    return out


def run_sweep(grid: dict, base: RunConfig, pretrain: RunConfig | None = None, *,
              workers: int | None = None, cache_dir=None, metric: str = "peak_test_acc") -> SweepResult:
    """One label-training run per (lr, seed, pretrain_epochs, init) cell.

    ``init`` entries are selection expressions for hybrid init, or ``"scratch"``;
    cells with ``pretrain_epochs == 0`` are scratch runs. The SPT stage uses
    ``pretrain`` (default: ``base`` with stage ``spt``). Cells run in
    ``workers`` processes (default ``$SPTLAB_THREADS`` or 1); results are
    ordered by cell key regardless of completion order.
    """
    import os

    g = _normalize_grid(grid)
    if pretrain is None:
        pretrain = RunConfig(stage="spt", seed=base.seed, dataset=base.dataset, model=base.model,
                             mask_fraction=base.mask_fraction)
    if pretrain.stage != "spt":
        raise PipelineError("pretrain config must have stage 'spt'")
    if workers is None:
        workers = int(os.environ.get("SPTLAB_THREADS", "1") or 1)
    results = {}
    if workers > 1 and len(g["seed"]) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_run_seed_group, base, pretrain, g, s, cache_dir) for s in g["seed"]]
            for f in futs:
                results.update(f.result())
    else:
        for s in g["seed"]:
            results.update(_run_seed_group(base, pretrain, g, s, cache_dir))

    rows = []
    for key in sorted(results, key=lambda k: (k[0], k[1], k[2], str(k[3]))):
        lr, seed, pe, init = key
        summ, err = results[key]
        rows.append({"lr": lr, "seed": seed, "pretrain_epochs": pe, "init": init,
                     "peak_train_acc": summ.get("peak_train_acc") if summ else None,
                     "peak_test_acc": summ.get(metric) if summ else None, "error": err})
    summary = []
    for lr in sorted({r["lr"] for r in rows}):
        for pe in g["pretrain_epochs"]:
            for init in g["init"]:
                cell = [r for r in rows if r["lr"] == lr and r["pretrain_epochs"] == pe and r["init"] == init
                        and r["error"] is None]
                tr = [r["peak_train_acc"] for r in cell]
                te = [r["peak_test_acc"] for r in cell]
                summary.append({
                    "lr": lr, "pretrain_epochs": pe, "init": init, "n": len(cell),
                    "train_mean": float(np.mean(tr)) if tr else None,
                    "train_min": min(tr) if tr else None, "train_max": max(tr) if tr else None,
                    "test_mean": float(np.mean(te)) if te else None,
                    "test_min": min(te) if te else None, "test_max": max(te) if te else None,
                })
    return SweepResult(rows, summary)


def default_lr_grid(n: int = 8, lo: float = 1e-4, hi: float = 1e-1) -> list[float]:
    return [float(v) for v in np.logspace(math.log10(lo), math.log10(hi), n)]


# -------------------------------------------------------------- displacement

PAIRS = (("R", "SPT"), ("R", "SC"), ("SPT", "FT"), ("SC", "FT"), ("R", "FT"))
STAGES = ("R", "SPT", "SC", "FT")


def _group_rows(names):
    """(row label, member blocks): encoder aggregate first, then per-layer components, then each block."""
    groups = [("encoder", [n for n in names if n.startswith("encoder.")])]
    layers = sorted({n.split(".")[0] for n in names if n.startswith("layer")}, key=lambda s: int(s[5:]))
    for layer in layers:
        attn = [n for n in names if n.startswith(f"{layer}.W")]
        groups.append((f"{layer}.attention", attn))
        mlp = [n for n in names if n.startswith(f"{layer}.mlp.")]
        if mlp:
            groups.append((f"{layer}.mlp", mlp))
    mlp_all = [n for n in names if ".mlp." in n]
    if mlp_all:
        groups.append(("mlp(all)", mlp_all))
    groups.extend((n, [n]) for n in names)
    return [(label, members) for label, members in groups if members]


def displacement_table(checkpoints: dict) -> list[dict]:
    if not checkpoints:
        raise PipelineError("no checkpoints given")
    unknown = set(checkpoints) - set(STAGES)
    if unknown:
        raise PipelineError(f"unknown stage labels {sorted(unknown)}; use {STAGES}")
    cks = {k: (v if isinstance(v, Checkpoint) else load_checkpoint(v)) for k, v in checkpoints.items()}
    cfgs = {k: c.config for k, c in cks.items()}
    ref = next(iter(cfgs.values()))
    for k, c in cfgs.items():
        if c != ref:
            raise PipelineError(f"checkpoint {k!r} has a different model config")
    names = sorted(next(iter(cks.values())).params)
    for c in cks.values():
        check_params(c.params, ref)

    def flat(stage, members):
        return np.concatenate([cks[stage].params[n].ravel() for n in members])

    rows = []
    for label, members in _group_rows(names):
        row = {"block": label}
        for a, b in PAIRS:
            key = f"{a}->{b}"
            row[key] = frobenius_distance(flat(a, members), flat(b, members)) if a in cks and b in cks else None
        for s in STAGES:
            row[f"|{s}|"] = float(np.linalg.norm(flat(s, members))) if s in cks else None
        rows.append(row)
    return rows


def displacement_report(checkpoints: dict) -> str:
    """CSV of Frobenius displacements between stages and per-stage norms."""
    rows = displacement_table(checkpoints)
    cols = ["block"] + [f"{a}->{b}" for a, b in PAIRS] + [f"|{s}|" for s in STAGES]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()
