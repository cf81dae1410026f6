"""Two-stage training: binary pre-training, fine-tuning strategies with
their data regimes, and offboard training on GT binary occupancy.

All loops are deterministic given (plan, datasets, seed): batches come
from one seeded generator consumed in a fixed order, and updates run in
parameter registration order.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model.network import OccupancyModel
from .nn import tensor as T
from .nn.params import adamw_step, save_checkpoint, save_optimizer
from .voxel import ConfusionTable, binary_from_semantic, mask_iou

REGIMES = ("S", "S+B*", "S+B")
_REGIME_FOR_STRATEGY = {
    "replacing": ("S",),
    "multi_head": ("S+B*",),
    "intermediate": ("S+B*", "S+B"),
}


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class TrainPlan:
    stage: str  # pretrain_binary | finetune | offboard | student
    epochs: int
    batch_size: int = 4
    seed: int = 0
    lr: float = 2e-4
    weight_decay: float = 1e-2
    regime: str = "S+B*"
    binary_weight: float = 1.0
    eval_every: int = 0  # 0 = evaluate only after the last epoch

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise PlanError("epochs and batch_size must be positive")
        if self.regime not in REGIMES:
            raise PlanError(f"unknown data regime {self.regime!r}")


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    loss: float
    loss_semantic: float
    loss_binary: float
    binary_iou: float | None  # decoder IoU on val, at eval epochs
    val_iou: float | None
    val_miou: float | None
    rng_digest: str


@dataclass
class TrainLog:
    stage: str
    records: list[EpochRecord] = field(default_factory=list)
    best_val_miou: float | None = None
    wall_seconds: float = 0.0  # not serialized: CSVs stay bit-identical

    CSV_COLUMNS = ("epoch", "stage", "loss", "loss_semantic", "loss_binary",
                   "binary_iou", "val_iou", "val_miou", "rng_digest", "fingerprint")

    def to_csv(self, path, fingerprint: str = "") -> None:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        lines = [",".join(self.CSV_COLUMNS)]
        for r in self.records:
            lines.append(",".join([
                str(r.epoch), r.stage, fmt(r.loss), fmt(r.loss_semantic),
                fmt(r.loss_binary), fmt(r.binary_iou), fmt(r.val_iou),
                fmt(r.val_miou), r.rng_digest, fingerprint]))
        Path(path).write_text("\n".join(lines) + "\n")


def _rng_digest(rng) -> str:
    state = repr(rng.bit_generator.state).encode()
    return hashlib.sha256(state).hexdigest()[:16]


def _batches(rng, n, batch_size):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def evaluate(model: OccupancyModel, scenes, mode: str = "onboard") -> dict:
    """Aggregate semantic scores and binary-decoder IoU over a scene list."""
    table = None
    inter = union = 0
    for scene in scenes:
        gt = scene.binary if mode == "offboard" else None
        res = model.forward(scene.views, mode=mode, gt_binary=gt)
        t = ConfusionTable.from_grids(scene.semantic, res.prediction)
        table = t if table is None else table.add(t)
        if res.binary_logits is not None:
            pred_mask = res.binary_logits.data > _logit_threshold(model)
            gt_mask = model.downsample_binary_target(scene.binary) > 0.5
            inter += int(np.logical_and(pred_mask, gt_mask).sum())
            union += int(np.logical_or(pred_mask, gt_mask).sum())
    return {
        "miou": table.miou(),
        "iou": table.binary_iou(),
        "per_class": table.per_class_iou(),
        "decoder_iou": (inter / union) if union else 1.0,
    }


def _logit_threshold(model) -> float:
    tau = model.cfg.threshold
    return float(np.log(tau / (1.0 - tau)))


class _Trainer:
    """Shared scaffolding: epoch loop, eval cadence, checkpointing."""

    def __init__(self, model, plan, val_scenes, checkpoint_dir=None,
                 fingerprint="", eval_mode="onboard", log_fn=None):
        self.model = model
        self.plan = plan
        self.val_scenes = val_scenes or []
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.fingerprint = fingerprint
        self.eval_mode = eval_mode
        self.log = TrainLog(stage=plan.stage)
        self.rng = np.random.default_rng(
            np.random.SeedSequence([plan.seed, _stage_code(plan.stage)]))
        self.log_fn = log_fn or (lambda msg: None)

    def run_epochs(self, epoch_fn):
        start = time.monotonic()
        for epoch in range(1, self.plan.epochs + 1):
            sums = epoch_fn(self.rng)
            record = EpochRecord(
                epoch=epoch, stage=self.plan.stage,
                loss=sums["loss"], loss_semantic=sums["semantic"],
                loss_binary=sums["binary"], binary_iou=None, val_iou=None,
                val_miou=None, rng_digest=_rng_digest(self.rng))
            if self._should_eval(epoch) and self.val_scenes:
                self._evaluate_into(record)
            self.log.records.append(record)
            self.log_fn(f"epoch {epoch}/{self.plan.epochs} "
                        f"loss={record.loss:.4f} val_miou={record.val_miou}")
        self.log.wall_seconds = time.monotonic() - start
        if self.checkpoint_dir:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(self.model.store, self.checkpoint_dir / "ckpt_final.b2sc",
                            self.fingerprint)
            save_optimizer(self.model.store, self.checkpoint_dir / "ckpt_final.opt.b2sc",
                           self.fingerprint)
        return self.log

    def _should_eval(self, epoch) -> bool:
        if epoch == self.plan.epochs:
            return True
        return self.plan.eval_every > 0 and epoch % self.plan.eval_every == 0

    def _evaluate_into(self, record):
        stats = evaluate(self.model, self.val_scenes, mode=self.eval_mode)
        record.binary_iou = stats["decoder_iou"]
        record.val_iou = stats["iou"]
        record.val_miou = stats["miou"]
        if self.log.best_val_miou is None or stats["miou"] > self.log.best_val_miou:
            self.log.best_val_miou = stats["miou"]
            if self.checkpoint_dir:
                self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(self.model.store,
                                self.checkpoint_dir / "ckpt_best.b2sc",
                                self.fingerprint)


def _stage_code(stage: str) -> int:
    return {"pretrain_binary": 1, "finetune": 2, "offboard": 3, "student": 4}[stage]


def pretrain_binary(model: OccupancyModel, scenes, plan: TrainPlan,
                    val_scenes=None, checkpoint_dir=None, fingerprint="",
                    log_fn=None) -> TrainLog:
    """Stage one: optimize the binary loss through the trunk only."""
    if model.cfg.strategy != "intermediate":
        raise PlanError("pre-training requires the intermediate strategy")
    if not scenes:
        raise PlanError("pre-training dataset is empty")
    trunk = model.trunk_params()
    trainer = _Trainer(model, plan, val_scenes, checkpoint_dir, fingerprint,
                       log_fn=log_fn)

    def epoch_fn(rng):
        total = steps = 0.0
        for batch in _batches(rng, len(scenes), plan.batch_size):
            model.store.zero_grad()
            batch_loss = 0.0
            for i in batch:
                scene = scenes[i]
                _, logits = model.forward_binary(scene.views)
                loss = T.bce_with_logits(logits,
                                         model.downsample_binary_target(scene.binary))
                T.scale(loss, 1.0 / len(batch)).backward()
                batch_loss += loss.item() / len(batch)
            adamw_step(trunk, plan.lr, weight_decay=plan.weight_decay)
            total += batch_loss
            steps += 1
        mean = total / steps
        return {"loss": mean, "binary": mean, "semantic": 0.0}

    return trainer.run_epochs(epoch_fn)


def _semantic_batch_loss(model, scene, plan):
    """Per-scene fine-tuning loss for the model's strategy."""
    cfg = model.cfg
    res = model.forward(scene.views, mode="onboard", want_prediction=False)
    labels = scene.semantic.labels.ravel().astype(np.int64)
    loss_sem = T.focal_loss(res.semantic_logits, labels,
                            gamma=cfg.focal_gamma, alpha=cfg.focal_alpha)
    loss_bin = None
    if cfg.strategy != "replacing" and plan.regime != "S" and plan.binary_weight != 0.0:
        bstar = binary_from_semantic(scene.semantic)
        target = model.downsample_binary_target(bstar)
        loss_bin = T.bce_with_logits(res.binary_logits, target)
    if loss_bin is None:
        return loss_sem, float(loss_sem.item()), 0.0
    total = T.add(loss_sem, T.scale(loss_bin, plan.binary_weight))
    return total, float(loss_sem.item()), float(loss_bin.item())


def finetune(model: OccupancyModel, scenes, plan: TrainPlan, binary_scenes=None,
             val_scenes=None, checkpoint_dir=None, fingerprint="",
             log_fn=None) -> TrainLog:
    """Stage two: semantic + binary losses; S+B interleaves one batch of
    pre-training binary data per semantic batch, through the trunk only."""
    if plan.regime not in _REGIME_FOR_STRATEGY[model.cfg.strategy]:
        raise PlanError(f"regime {plan.regime} is not valid for "
                        f"strategy {model.cfg.strategy}")
    if plan.regime == "S+B" and not binary_scenes:
        raise PlanError("regime S+B needs the pre-training binary dataset")
    if not scenes:
        raise PlanError("fine-tuning dataset is empty")
    all_params = model.store.all()
    trunk = model.trunk_params()
    trainer = _Trainer(model, plan, val_scenes, checkpoint_dir, fingerprint,
                       log_fn=log_fn)

    def epoch_fn(rng):
        total = total_sem = total_bin = steps = 0.0
        for batch in _batches(rng, len(scenes), plan.batch_size):
            model.store.zero_grad()
            b_loss = b_sem = b_bin = 0.0
            for i in batch:
                loss, lsem, lbin = _semantic_batch_loss(model, scenes[i], plan)
                T.scale(loss, 1.0 / len(batch)).backward()
                b_loss += loss.item() / len(batch)
                b_sem += lsem / len(batch)
                b_bin += lbin / len(batch)
            adamw_step(all_params, plan.lr, weight_decay=plan.weight_decay)

            if plan.regime == "S+B":
                picks = rng.choice(len(binary_scenes), size=len(batch))
                model.store.zero_grad()
                for j in picks:
                    scene = binary_scenes[j]
                    _, logits = model.forward_binary(scene.views)
                    loss = T.bce_with_logits(
                        logits, model.downsample_binary_target(scene.binary))
                    T.scale(loss, 1.0 / len(picks)).backward()
                adamw_step(trunk, plan.lr, weight_decay=plan.weight_decay)

            total += b_loss
            total_sem += b_sem
            total_bin += b_bin
            steps += 1
        return {"loss": total / steps, "semantic": total_sem / steps,
                "binary": total_bin / steps}

    return trainer.run_epochs(epoch_fn)


def train_offboard(model: OccupancyModel, scenes, plan: TrainPlan,
                   val_scenes=None, checkpoint_dir=None, fingerprint="",
                   log_fn=None) -> TrainLog:
    """Offboard: gather from GT binary, optimize the focal loss only."""
    if model.cfg.strategy != "intermediate":
        raise PlanError("offboard training requires the intermediate strategy")
    for scene in scenes:
        if scene.binary is None:
            raise PlanError("offboard training needs GT binary for every scene")
    if not scenes:
        raise PlanError("offboard dataset is empty")
    all_params = model.store.all()
    trainer = _Trainer(model, plan, val_scenes, checkpoint_dir, fingerprint,
                       eval_mode="offboard", log_fn=log_fn)

    def epoch_fn(rng):
        total = steps = 0.0
        for batch in _batches(rng, len(scenes), plan.batch_size):
            model.store.zero_grad()
            b_loss = 0.0
            for i in batch:
                scene = scenes[i]
                res = model.forward(scene.views, mode="offboard",
                                    gt_binary=scene.binary, want_prediction=False)
                labels = scene.semantic.labels.ravel().astype(np.int64)
                loss = T.focal_loss(res.semantic_logits, labels,
                                    gamma=model.cfg.focal_gamma,
                                    alpha=model.cfg.focal_alpha)
                T.scale(loss, 1.0 / len(batch)).backward()
                b_loss += loss.item() / len(batch)
            adamw_step(all_params, plan.lr, weight_decay=plan.weight_decay)
            total += b_loss
            steps += 1
        mean = total / steps
        return {"loss": mean, "semantic": mean, "binary": 0.0}

    return trainer.run_epochs(epoch_fn)
