"""``sptlab`` command line.

Every command writes into a run directory named ``<command>-<config hash>``
under ``--out`` and refuses to touch an existing one unless ``--force`` is
given. Failures print one JSON line ``{"error": ..., "message": ...}`` to
stderr and exit with status 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path


from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, write_checkpoint
from .config import DEFAULT_BATCH, DatasetRef, RunConfig, config_hash, parse_config, serialize_config
from .datagen import generate_dataset, load_jsonl_dataset, write_dataset
from .experiments import (
    default_lr_grid, displacement_report, resolve_dataset, run_finetune, run_pretrain, run_sweep,
)
from .inspection import attention_probe, band_mass, export_pgm, histogram_csv, positional_probe, weight_histogram
from .model import ModelConfig
from .theory import preset_cases, verify_proposition

log = logging.getLogger("sptlab")

FIG4_SEEDS = list(range(10))


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


# ------------------------------------------------------------------ helpers


def _header(h: str) -> str:
    return f"# config_hash={h}\n# tool_version={__version__}\n"


def _run_dir(out, command: str, identity: dict, force: bool) -> tuple[Path, str]:
    h = config_hash(identity)
    d = Path(out) / f"{command}-{h}"
    if d.exists():
        if not force:
            raise CliError(f"run directory {d} exists; pass --force to overwrite")
        shutil.rmtree(d)
    d.mkdir(parents=True)
    return d, h


def _dataset_ref(args) -> DatasetRef:
    if getattr(args, "data", None):
        return DatasetRef(kind="jsonl", dir=args.data, schema=args.schema)
    return DatasetRef(seed=args.data_seed)


def _model_cfg(args) -> ModelConfig:
    if getattr(args, "model", None):
        return ModelConfig.from_dict(json.loads(Path(args.model).read_text()))
    return ModelConfig(pe_variant=args.pe)


def _run_config(args, stage: str) -> RunConfig:
    if args.config:
        cfg = parse_config(args.config)
        if cfg.stage != stage:
            cfg = cfg.replace(stage=stage)
    else:
        cfg = RunConfig(stage=stage, seed=args.seed, dataset=_dataset_ref(args), model=_model_cfg(args))
    over = {}
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size"),
                      ("weight_decay", "weight_decay"), ("mask_fraction", "mask_fraction"), ("frozen", "frozen")):
        val = getattr(args, flag, None)
        if val is not None:
            over[key] = val
    if args.config and args.seed_given:
        over["seed"] = args.seed
    if getattr(args, "init", None):
        over["init"] = {"checkpoint": str(Path(args.init).resolve()), "select": args.select or "all"}
    return cfg.replace(**over) if over else cfg


def _write_metrics(d: Path, hist, h: str):
    (d / "metrics.csv").write_text(hist.to_csv({"config_hash": h, "tool_version": __version__}))


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# ----------------------------------------------------------------- commands


def cmd_gen_data(args):
    sizes = None
    if args.sizes:
        sizes = {k: int(v) for k, v in (item.split("=") for item in args.sizes.split(","))}
    ds = generate_dataset(args.seed, sizes, args.flip_fraction)
    ident = {"command": "gen-data", "seed": args.seed, "sizes": ds.sizes, "flip_fraction": args.flip_fraction}
    d, h = _run_dir(args.out, "data", ident, args.force)
    write_dataset(ds, d, {"config_hash": h, "tool_version": __version__})
    _emit({"dataset": str(d), "config_hash": h})


def cmd_pretrain(args):
    cfg = _run_config(args, "spt")
    d, h = _run_dir(args.out, "spt", cfg.to_dict(), args.force)
    (d / "config.json").write_text(serialize_config(cfg))
    ckpt, hist = run_pretrain(cfg, out_dir=d)
    write_checkpoint(ckpt, d / "checkpoint")
    _write_metrics(d, hist, h)
    last = hist.series("train", "loss")
    _emit({"run": str(d), "checkpoint": str(d / "checkpoint"), "config_hash": h,
           "final_train_loss": last[-1][1] if last else None})


def _label_run(cfg: RunConfig, args, prefix: str):
    d, h = _run_dir(args.out, prefix, cfg.to_dict(), args.force)
    (d / "config.json").write_text(serialize_config(cfg))
    ckpt, hist = run_finetune(cfg)
    write_checkpoint(ckpt, d / "checkpoint")
    _write_metrics(d, hist, h)
    return {"run": str(d), "config_hash": h, **hist.summary}


def cmd_finetune(args):
    if not args.init and not args.config:
        raise CliError("finetune needs --init CHECKPOINT (or a config with 'init')")
    _emit(_label_run(_run_config(args, "finetune"), args, "finetune"))


def cmd_scratch(args):
    _emit(_label_run(_run_config(args, "scratch"), args, "scratch"))


def cmd_ablate_freeze(args):
    """A scratch or finetune run with a frozen selection (default: attention)."""
    stage = "finetune" if args.init else "scratch"
    cfg = _run_config(args, stage)
    if args.frozen is None:
        cfg = cfg.replace(frozen="attention")
    _emit(_label_run(cfg, args, f"freeze-{stage}"))


def cmd_ablate_init(args):
    """Hybrid-init finetunes from one checkpoint, one per selection, plus a scratch baseline."""
    if not args.init:
        raise CliError("ablate-init needs --init CHECKPOINT")
    selections = [s.strip() for s in args.selections.split(";") if s.strip()]
    base = _run_config(args, "finetune")
    ident = {"command": "ablate-init", "base": base.to_dict(), "selections": selections}
    d, h = _run_dir(args.out, "ablate-init", ident, args.force)
    ckpt = load_checkpoint(args.init)
    rows = []
    for sel in selections + ["scratch"]:
        if sel == "scratch":
            cfg = base.replace(stage="scratch", init=None)
            _, hist = run_finetune(cfg)
        else:
            cfg = base.replace(init={"checkpoint": base.init["checkpoint"], "select": sel})
            _, hist = run_finetune(cfg, init_ckpt=ckpt)
        rows.append({"select": sel, **hist.summary})
    lines = [_header(h), "select,peak_train_acc,peak_test_acc,best_val_acc,test_at_best_val\n"]
    for r in rows:
        lines.append(f"{r['select']},{r.get('peak_train_acc')!r},{r.get('peak_test_acc')!r},"
                     f"{r.get('best_val_acc')!r},{r.get('test_at_best_val')!r}\n")
    (d / "ablate_init.csv").write_text("".join(lines))
    _emit({"run": str(d), "config_hash": h, "results": rows})


def _fig4_grid():
    return {"lr": default_lr_grid(), "seed": FIG4_SEEDS, "pretrain_epochs": [0, 10], "init": ["all"]}


def cmd_sweep(args):
    if args.grid == "fig4":
        grid = _fig4_grid()
    else:
        grid = json.loads(Path(args.grid).read_text())
    if args.seeds:
        grid["seed"] = [int(s) for s in args.seeds.split(",")]
    base = _run_config(args, "finetune").replace(init=None, stage="scratch")
    spt = RunConfig(stage="spt", seed=base.seed, dataset=base.dataset, model=base.model,
                    lr=args.spt_lr, batch_size=args.spt_batch_size, mask_fraction=base.mask_fraction)
    ident = {"command": "sweep", "grid": grid, "base": base.to_dict(), "pretrain": spt.to_dict()}
    d, h = _run_dir(args.out, "sweep", ident, args.force)
    (d / "grid.json").write_text(json.dumps(ident, indent=2, sort_keys=True) + "\n")
    res = run_sweep(grid, base, spt, workers=args.workers)
    (d / "sweep.csv").write_text(_header(h) + res.to_csv())
    (d / "sweep_summary.csv").write_text(_header(h) + res.summary_csv())
    best = {}
    for pe in grid.get("pretrain_epochs", [0]):
        for init in grid.get("init", ["all"]):
            b = res.best(pe, init)
            if b:
                best[f"pretrain_epochs={pe},init={init}"] = {"lr": b["lr"], "test_mean": b["test_mean"]}
    _emit({"run": str(d), "config_hash": h, "best": best})


def cmd_displacement(args):
    cks = {k: getattr(args, k.lower()) for k in ("R", "SPT", "SC", "FT") if getattr(args, k.lower())}
    if not cks:
        raise CliError("give at least one of --r/--spt/--sc/--ft")
    ident = {"command": "displacement", **{k: str(Path(v).resolve()) for k, v in cks.items()}}
    d, h = _run_dir(args.out, "displacement", ident, args.force)
    (d / "displacement.csv").write_text(_header(h) + displacement_report(cks))
    _emit({"report": str(d / "displacement.csv"), "config_hash": h})


def _probe_sequence(args, ckpt: Checkpoint):
    if args.seq_file:
        data = load_jsonl_dataset(args.seq_file, args.schema)
    else:
        data = resolve_dataset(DatasetRef(seed=args.data_seed))[args.split]
    if not 0 <= args.index < len(data):
        raise CliError(f"sequence index {args.index} out of range for {len(data)} sequences")
    return data[args.index]


def cmd_inspect_attn(args):
    ckpt = load_checkpoint(args.ckpt)
    ident = {"command": "inspect-attn", "ckpt": str(Path(args.ckpt).resolve()), "positional": args.positional,
             "index": args.index, "split": args.split, "seq_file": args.seq_file, "w": args.w}
    d, h = _run_dir(args.out, "inspect", ident, args.force)
    probe = positional_probe(ckpt, args.length) if args.positional else attention_probe(ckpt, _probe_sequence(args, ckpt))
    report = {"config_hash": h, "tool_version": __version__, "source": probe.source, "bandwidth": args.w, "heads": []}
    for l in range(len(probe.attention)):
        for hd in range(probe.attention[l].shape[0]):
            S, A = probe.head(l, hd)
            tag = f"layer{l}_head{hd}"
            export_pgm(S, d / f"{tag}_scores.pgm", {"config_hash": h, "kind": "scores"})
            export_pgm(A, d / f"{tag}_attention.pgm", {"config_hash": h, "kind": "attention"})
            report["heads"].append({"layer": l, "head": hd, "band_mass": band_mass(A, args.w)})
    hist = []
    for name in sorted(ckpt.params):
        if name.endswith((".WQ", ".WK")):
            edges, counts = weight_histogram(ckpt.params[name], args.bins)
            hist.append(histogram_csv(edges, counts, name).split("\n", 1)[1])
    (d / "histograms.csv").write_text(_header(h) + "block,bin_lo,bin_hi,count\n" + "".join(hist))
    (d / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit({"report": str(d / "report.json"), **{f"band_mass_{r['layer']}_{r['head']}": r["band_mass"]
                                               for r in report["heads"]}})


def cmd_verify_theory(args):
    if args.preset is None:
        raise CliError("verify-theory needs --preset")
    cases = preset_cases(args.preset)
    ident = {"command": "verify-theory", "preset": args.preset, "n_mc": args.n_mc, "seed": args.seed}
    d, h = _run_dir(args.out, "theory", ident, args.force)
    reports = [verify_proposition(p, tm, n_mc=args.n_mc, seed=args.seed) for p, tm in cases]
    doc = {"config_hash": h, "tool_version": __version__, "preset": args.preset,
           "all_pass": all(r["pass"] for r in reports), "cases": reports}
    (d / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _emit({"report": str(d / "report.json"), "all_pass": doc["all_pass"]})


# ------------------------------------------------------------------- parser


def _common(p, *, data=True, training=True):
    p.add_argument("--out", default="runs", help="root directory for run directories")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    if data:
        p.add_argument("--config", help="JSON run config; flags override it")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--data", help="directory of <split>.jsonl files (default: synthetic task)")
        p.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic dataset")
        p.add_argument("--schema", default="continuous", choices=("continuous", "token"))
        p.add_argument("--model", help="JSON model config (default: the one-layer toy model)")
        p.add_argument("--pe", default="abs-sin", help="positional encoding variant")
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--weight-decay", type=float)
        p.add_argument("--mask-fraction", type=float)
        p.add_argument("--frozen", help="selection expression of blocks kept fixed")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sptlab", description="Self-pretraining experiments on a toy attention model.")
    ap.add_argument("--version", action="version", version=f"sptlab {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic task as JSONL splits")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", help="e.g. train=100,val=200,test=400,unlabeled=12000")
    p.add_argument("--flip-fraction", type=float, default=0.15)
    p.add_argument("--out", default="runs")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    for name, func, hlp in (("finetune", cmd_finetune, "label training from a checkpoint"),
                            ("scratch", cmd_scratch, "label training from random init"),
                            ("ablate-freeze", cmd_ablate_freeze, "label training with frozen blocks")):
        p = sub.add_parser(name, help=hlp)
        _common(p)
        p.add_argument("--init", help="checkpoint directory to initialise from")
        p.add_argument("--select", help="blocks taken from --init, e.g. 'qk' or 'all \\ qk'")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate-init", help="hybrid-init finetunes, one per selection, plus scratch")
    _common(p)
    p.add_argument("--init", required=True)
    p.add_argument("--select", help=argparse.SUPPRESS)
    p.add_argument("--selections", default="all;qk;all \\ qk", help="';'-separated selection expressions")
    p.set_defaults(func=cmd_ablate_init)

    p = sub.add_parser("sweep", help="lr x seed x pretrain-epochs x init grid")
    _common(p)
    p.add_argument("--grid", required=True, help="'fig4' or a JSON file with lr/seed/pretrain_epochs/init lists")
    p.add_argument("--seeds", help="comma-separated seeds overriding the grid")
    p.add_argument("--spt-lr", type=float, default=1e-3)
    p.add_argument("--spt-batch-size", type=int, default=DEFAULT_BATCH["spt"])
    p.add_argument("--workers", type=int, help="parallel processes (default $SPTLAB_THREADS or 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("displacement", help="Frobenius displacement table between stages")
    for k in ("r", "spt", "sc", "ft"):
        p.add_argument(f"--{k}", help=f"{k.upper()} checkpoint directory")
    p.add_argument("--out", default="runs")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_displacement)

    p = sub.add_parser("inspect-attn", help="attention heatmaps, band mass and weight histograms")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--positional", action="store_true", help="zero the content and probe positions only")
    p.add_argument("--length", type=int, default=100, help="sequence length for --positional")
    p.add_argument("--seq-file", help="JSONL file holding the sequence to probe")
    p.add_argument("--schema", default="continuous", choices=("continuous", "token"))
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--w", type=int, default=5, help="band-mass bandwidth")
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--out", default="runs")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_inspect_attn)

    p = sub.add_parser("verify-theory", help="Monte Carlo check of the loss slopes at uniform attention")
    p.add_argument("--preset", default=None)
    p.add_argument("--n-mc", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_verify_theory)
    return ap


def run_command(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except CliError as err:
        _fail("UsageError", str(err))
        return 2
    args.seed_given = "--seed" in argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as err:
        _fail("UsageError", str(err))
        return 2
    except Exception as err:  # every failure becomes one parsable line
        _fail(type(err).__name__, str(err))
        return 1
    return 0


def _fail(kind: str, message: str):
    print(json.dumps({"error": kind, "message": " ".join(message.split())}), file=sys.stderr)


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
