"""Command-line harness: dataset builds, training stages, evaluation,
sweeps, and BEV image export.

Every command reads one experiment config; its fingerprint is embedded
in all outputs and checked when artifacts are chained (--force skips the
check and allows overwrites).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autolabel as al
from . import dataset as ds
from .bev import export_bev
from .config import ConfigError, ExperimentConfig
from .model import OccupancyModel
from .nn.params import CheckpointError, FingerprintMismatchError, load_checkpoint
from .training import (
    PlanError,
    evaluate,
    finetune,
    pretrain_binary,
    train_offboard,
)
from .voxel import GridFileError, load_grid, save_grid


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _say(msg: str):
    print(msg, flush=True)


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise CliError("config", "this command requires --config")
    cfg = ExperimentConfig.load(args.config)
    if args.out:
        cfg.values["out.dir"] = args.out
    return cfg


def _load_manifest(cfg, force=False) -> ds.DatasetManifest:
    manifest = ds.read_manifest(cfg.dataset_dir())
    if manifest.fingerprint != cfg.fingerprint() and not force:
        raise CliError("fingerprint",
                       f"dataset fingerprint {manifest.fingerprint} does not match "
                       f"config {cfg.fingerprint()} (use --force to override)")
    return manifest


def _split(cfg, manifest, split, start=0, count=0):
    scenes = ds.load_split(cfg.dataset_dir(), manifest, split, start,
                           count if count > 0 else None)
    if not scenes:
        raise CliError("dataset", f"no scenes selected from split {split!r}")
    return scenes


def _build_model(cfg, manifest, strategy=None) -> OccupancyModel:
    rig = cfg.scene_params().rig
    return OccupancyModel(cfg.model_config(strategy), manifest.spec, rig,
                          manifest.num_classes, init_seed=cfg["model.init_seed"])


def _stage_ckpt(cfg, stage) -> Path:
    return cfg.out_dir() / stage / "ckpt_final.b2sc"


def _load_into(model, path, cfg, force, allow_missing=False):
    if not Path(path).exists():
        raise CliError("checkpoint", f"missing checkpoint {path}")
    expected = None if force else cfg.fingerprint()
    try:
        return load_checkpoint(model.store, path, expected_fingerprint=expected,
                               allow_missing=allow_missing)
    except FingerprintMismatchError as e:
        raise CliError("fingerprint", f"{e} (use --force to override)") from e


# --- commands -----------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _load_config(args)
    root = cfg.dataset_dir()
    seed = args.seed if args.seed is not None else cfg["dataset.seed"]
    counts = {"pretrain": cfg["dataset.pretrain_scenes"],
              "train": cfg["dataset.train_scenes"],
              "val": cfg["dataset.val_scenes"]}
    try:
        manifest = ds.build_dataset(
            root, cfg.scene_params(), seed, counts, fingerprint=cfg.fingerprint(),
            force=args.force, workers=args.workers,
            progress=lambda i, n: _say(f"  scene {i}/{n}") if i % 50 == 0 else None)
    except ds.DatasetError as e:
        raise CliError("dataset", str(e)) from e
    _say(f"dataset at {root}: {len(manifest.scenes)} scenes "
         f"({counts['pretrain']} pretrain / {counts['train']} train / "
         f"{counts['val']} val), fingerprint {manifest.fingerprint}")


def _train_log_out(cfg, stage, log):
    out = cfg.out_dir() / stage
    out.mkdir(parents=True, exist_ok=True)
    log.to_csv(out / "trainlog.csv", fingerprint=cfg.fingerprint())
    last = log.records[-1]
    _say(f"{stage}: {len(log.records)} epochs in {log.wall_seconds:.1f}s, "
         f"final loss {last.loss:.4f}, val mIoU {last.val_miou}")


def cmd_pretrain(args):
    cfg = _load_config(args)
    manifest = _load_manifest(cfg, args.force)
    scenes = _split(cfg, manifest, "pretrain", cfg["pretrain.scenes_from"],
                    cfg["pretrain.scenes_count"])
    val = _split(cfg, manifest, "val")
    model = _build_model(cfg, manifest, strategy="intermediate")
    plan = cfg.plan("pretrain_binary", seed=args.seed)
    log = pretrain_binary(model, scenes, plan, val_scenes=val,
                          checkpoint_dir=cfg.out_dir() / "pretrain",
                          fingerprint=cfg.fingerprint(), log_fn=_say)
    _train_log_out(cfg, "pretrain", log)


def cmd_finetune(args):
    cfg = _load_config(args)
    manifest = _load_manifest(cfg, args.force)
    scenes = _split(cfg, manifest, "train", cfg["finetune.scenes_from"],
                    cfg["finetune.scenes_count"])
    val = _split(cfg, manifest, "val")
    model = _build_model(cfg, manifest)
    if cfg["finetune.init"] == "pretrain":
        dropped = _load_into(model, _stage_ckpt(cfg, "pretrain"), cfg, args.force,
                             allow_missing=cfg["model.strategy"] != "intermediate")
        if dropped:
            _say(f"dropped checkpoint entries: {', '.join(sorted(dropped)[:4])} ...")
    binary_scenes = None
    plan = cfg.plan("finetune", seed=args.seed)
    if plan.regime == "S+B":
        binary_scenes = _split(cfg, manifest, "pretrain",
                               cfg["pretrain.scenes_from"],
                               cfg["pretrain.scenes_count"])
    log = finetune(model, scenes, plan, binary_scenes=binary_scenes,
                   val_scenes=val, checkpoint_dir=cfg.out_dir() / "finetune",
                   fingerprint=cfg.fingerprint(), log_fn=_say)
    _train_log_out(cfg, "finetune", log)


def cmd_offboard(args):
    cfg = _load_config(args)
    manifest = _load_manifest(cfg, args.force)
    scenes = _split(cfg, manifest, "train", cfg["offboard.scenes_from"],
                    cfg["offboard.scenes_count"])
    val = _split(cfg, manifest, "val")
    model = _build_model(cfg, manifest, strategy="intermediate")
    plan = cfg.plan("offboard", seed=args.seed)
    log = train_offboard(model, scenes, plan, val_scenes=val,
                         checkpoint_dir=cfg.out_dir() / "offboard",
                         fingerprint=cfg.fingerprint(), log_fn=_say)
    _train_log_out(cfg, "offboard", log)


def cmd_autolabel(args):
    cfg = _load_config(args)
    manifest = _load_manifest(cfg, args.force)
    ckpt = _stage_ckpt(cfg, "offboard")
    if not ckpt.exists():
        raise CliError("checkpoint",
                       f"autolabel requires an offboard checkpoint at {ckpt}")
    model = _build_model(cfg, manifest, strategy="intermediate")
    _load_into(model, ckpt, cfg, args.force)
    scenes = _split(cfg, manifest, "train", cfg["autolabel.scenes_from"],
                    cfg["autolabel.scenes_count"])
    mode = cfg["autolabel.mode"]
    out = cfg.out_dir() / "labels" / mode
    paths = al.generate_pseudo_labels(model, scenes, mode, out)
    (out / "labels.txt").write_text(
        f"fingerprint = {cfg.fingerprint()}\nmode = {mode}\n"
        f"checkpoint = {ckpt}\ncount = {len(paths)}\n")
    _say(f"wrote {len(paths)} {mode} pseudo-label files to {out}")


def cmd_student(args):
    cfg = _load_config(args)
    manifest = _load_manifest(cfg, args.force)
    gt = _split(cfg, manifest, "train", cfg["student.gt_from"],
                cfg["student.gt_count"])
    mode = cfg["autolabel.mode"]
    labels_dir = Path(cfg["student.labels_dir"]) if cfg["student.labels_dir"] \
        else cfg.out_dir() / "labels" / mode
    if not labels_dir.exists():
        raise CliError("dataset", f"no pseudo labels at {labels_dir}")
    gt_ids = {s.scene_id for s in gt}
    pseudo = []
    for path in sorted(labels_dir.glob("*.b2sp")):
        sid = path.stem
        if sid in gt_ids:
            continue
        scene = ds.read_scene(cfg.dataset_dir() / "scenes" / sid)
        pseudo.append((scene, al.load_pseudo(path, manifest.num_classes)))
    val = _split(cfg, manifest, "val")
    model = _build_model(cfg, manifest)
    plan = cfg.plan("student", seed=args.seed)
    log = al.train_on_pseudo(model, gt, pseudo, plan, val_scenes=val,
                             checkpoint_dir=cfg.out_dir() / "student",
                             fingerprint=cfg.fingerprint(), log_fn=_say)
    _say(f"student trained on {len(gt)} GT + {len(pseudo)} pseudo scenes")
    _train_log_out(cfg, "student", log)


def _resolve_checkpoint(cfg, name) -> Path:
    path = Path(name)
    if path.suffix == ".b2sc" or path.exists():
        return path
    return _stage_ckpt(cfg, name)


def cmd_eval(args):
    cfg = _load_config(args)
    manifest = _load_manifest(cfg, args.force)
    name = cfg["eval.checkpoint"]
    ckpt = _resolve_checkpoint(cfg, name)
    strategy = "intermediate" if name in ("pretrain", "offboard") else None
    model = _build_model(cfg, manifest, strategy=strategy)
    _load_into(model, ckpt, cfg, args.force)
    scenes = _split(cfg, manifest, cfg["eval.split"])
    stats = evaluate(model, scenes, mode=cfg["eval.mode"])

    out_dir = cfg.out_dir() / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = f"{Path(name).stem}_{cfg['eval.split']}"
    out = out_dir / f"{tag}.csv"
    k = manifest.num_classes
    header = ["checkpoint", "split", "mode", "scenes", "iou", "miou"]
    header += [f"class_{c}" for c in range(1, k + 1)]
    header += ["fingerprint"]
    row = [str(ckpt), cfg["eval.split"], cfg["eval.mode"], str(len(scenes)),
           repr(stats["iou"]), repr(stats["miou"])]
    row += [repr(v) for v in stats["per_class"]]
    row += [cfg.fingerprint()]
    out.write_text(",".join(header) + "\n" + ",".join(row) + "\n")

    if cfg["eval.dump"] > 0:
        for scene in scenes[:cfg["eval.dump"]]:
            gt = scene.binary if cfg["eval.mode"] == "offboard" else None
            res = model.forward(scene.views, mode=cfg["eval.mode"], gt_binary=gt)
            save_grid(res.prediction, out_dir / f"pred_{scene.scene_id}.b2so")
    _say(f"eval {tag}: IoU {stats['iou']:.4f} mIoU {stats['miou']:.4f} -> {out}")


def _sweep_cells(cfg):
    cells = []
    for strategy in cfg["sweep.strategies"]:
        for regime in cfg["sweep.regimes"]:
            if regime == "S" and strategy != "replacing":
                continue
            if regime != "S" and strategy == "replacing":
                continue
            if regime == "S+B" and strategy == "multi_head":
                continue
            for count in cfg["sweep.pretrain_counts"]:
                for seed in cfg["sweep.seeds"]:
                    cells.append((strategy, regime, int(count), int(seed)))
    return cells


SWEEP_COLUMNS = ("strategy,regime,pretrain_scenes,seed,val_iou,val_miou,"
                 "decoder_iou_pretrain_end,decoder_iou_final,fingerprint")


def run_sweep_cell(cfg, manifest, cell) -> str:
    """One sweep cell: optional pretrain, then fine-tune; returns a CSV row."""
    strategy, regime, count, seed = cell
    val = _split(cfg, manifest, "val")
    pre_model = _build_model(cfg, manifest, strategy="intermediate")
    decoder_iou_pre = ""
    if count > 0:
        scenes = _split(cfg, manifest, "pretrain", 0, count)
        plan = cfg.plan("pretrain_binary", seed=seed)
        log = pretrain_binary(pre_model, scenes, plan, val_scenes=val)
        decoder_iou_pre = repr(log.records[-1].binary_iou)

    model = _build_model(cfg, manifest, strategy=strategy)
    if count > 0:
        for name, p in zip(pre_model.store.names(), pre_model.store.all()):
            if name in model.store:
                model.store[name].tensor.data = p.data.copy()
    train = _split(cfg, manifest, "train", 0, cfg["sweep.finetune_scenes"])
    plan = cfg.plan("finetune", seed=seed, regime=regime)
    binary_scenes = _split(cfg, manifest, "pretrain", 0, count) \
        if regime == "S+B" and count > 0 else None
    if regime == "S+B" and count == 0:
        plan = cfg.plan("finetune", seed=seed, regime="S+B*")
    log = finetune(model, train, plan, binary_scenes=binary_scenes, val_scenes=val)
    last = log.records[-1]
    return ",".join([strategy, regime, str(count), str(seed),
                     repr(last.val_iou), repr(last.val_miou),
                     decoder_iou_pre, repr(last.binary_iou), cfg.fingerprint()])


def cmd_sweep(args):
    cfg = _load_config(args)
    manifest = _load_manifest(cfg, args.force)
    cells = _sweep_cells(cfg)
    cell_dir = cfg.out_dir() / "sweep" / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)

    def cell_id(cell):
        strategy, regime, count, seed = cell
        tag = regime.replace("+", "").replace("*", "s")
        return f"{strategy}_{tag}_{count}_{seed}"

    pending = [c for c in cells if not (cell_dir / f"{cell_id(c)}.csv").exists()]
    _say(f"sweep: {len(cells)} cells, {len(pending)} to run")
    if args.workers > 1 and pending:
        from concurrent.futures import ProcessPoolExecutor
        worker = _SweepWorker(args.config, args.out, args.force)
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            for i, (cell, row) in enumerate(zip(pending, pool.map(worker, pending))):
                (cell_dir / f"{cell_id(cell)}.csv").write_text(row + "\n")
                _say(f"  [{i + 1}/{len(pending)}] {cell_id(cell)} done")
    else:
        for i, cell in enumerate(pending):
            row = run_sweep_cell(cfg, manifest, cell)
            (cell_dir / f"{cell_id(cell)}.csv").write_text(row + "\n")
            _say(f"  [{i + 1}/{len(pending)}] {cell_id(cell)} done")

    rows = [(cell, (cell_dir / f"{cell_id(cell)}.csv").read_text().strip())
            for cell in cells]
    results = cfg.out_dir() / "sweep" / "results.csv"
    results.write_text(SWEEP_COLUMNS + "\n" + "\n".join(r for _, r in rows) + "\n")

    groups: dict[tuple, list] = {}
    for cell, row in rows:
        key = cell[:3]
        groups.setdefault(key, []).append(float(row.split(",")[5]))
    summary = cfg.out_dir() / "sweep" / "summary.csv"
    lines = ["strategy,regime,pretrain_scenes,seeds,mean_val_miou,fingerprint"]
    for key in sorted(groups, key=str):
        vals = groups[key]
        lines.append(",".join([key[0], key[1], str(key[2]), str(len(vals)),
                               repr(float(np.mean(vals))), cfg.fingerprint()]))
    summary.write_text("\n".join(lines) + "\n")
    _say(f"sweep results -> {results}")


class _SweepWorker:
    """Picklable cell runner for parallel sweeps; reloads state per process."""

    def __init__(self, config_path, out_override, force):
        self.config_path = config_path
        self.out_override = out_override
        self.force = force

    def __call__(self, cell) -> str:
        cfg = ExperimentConfig.load(self.config_path)
        if self.out_override:
            cfg.values["out.dir"] = self.out_override
        manifest = _load_manifest(cfg, self.force)
        return run_sweep_cell(cfg, manifest, cell)


def cmd_export_bev(args):
    cfg = _load_config(args)
    try:
        grid = load_grid(args.grid, num_classes=cfg["dataset.classes"])
    except GridFileError as e:
        raise CliError("grid", str(e)) from e
    z = cfg["bev.z"]
    out = Path(args.out) if args.out else Path(args.grid).with_suffix(".ppm")
    export_bev(grid, out, z_slice=None if z < 0 else z)
    _say(f"wrote {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occuseg",
        description="binary-to-semantic occupancy experiments on procedural scenes")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": (cmd_gen_data, "build and persist the scene dataset"),
        "pretrain": (cmd_pretrain, "binary occupancy pre-training (trunk only)"),
        "finetune": (cmd_finetune, "semantic fine-tuning with a data regime"),
        "offboard": (cmd_offboard, "offboard training with GT binary gather"),
        "autolabel": (cmd_autolabel, "generate Top1/Top2 pseudo-label files"),
        "student": (cmd_student, "train a student on GT + pseudo labels"),
        "eval": (cmd_eval, "evaluate a checkpoint; writes a results CSV"),
        "sweep": (cmd_sweep, "strategy/regime/scene-count/seed sweep"),
        "export-bev": (cmd_export_bev, "render a grid file to a BEV image"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the stage seed")
        p.add_argument("--out", default=None, help="override out.dir")
        p.add_argument("--force", action="store_true",
                       help="overwrite outputs / skip fingerprint checks")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel workers (gen-data)")
        if name == "export-bev":
            p.add_argument("grid", help="grid file to render")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except CliError as e:
        print(f"error: {e.category}: {e}", file=sys.stderr)
        return 1
    except (ConfigError, PlanError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 1
    except (ds.DatasetError, GridFileError) as e:
        print(f"error: dataset: {e}", file=sys.stderr)
        return 1
    except CheckpointError as e:
        print(f"error: checkpoint: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
