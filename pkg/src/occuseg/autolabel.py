"""Offboard pseudo-labels: Top1/Top2 codecs, label files, student training.

Top1 keeps only the argmax label per voxel, run-length encoded. Top2 keeps
the two best (class, logit) pairs per voxel with logits clamped to
[-LOGIT_CLAMP, LOGIT_CLAMP] and linearly quantized to 16 bits.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .model.network import OccupancyModel
from .nn import tensor as T
from .nn.params import adamw_step
from .training import TrainPlan, _batches, _semantic_batch_loss, _Trainer
from .voxel import GridSpec, SemanticGrid, binary_from_semantic

PSEUDO_MAGIC = b"B2SP"
PSEUDO_VERSION = 1
MODE_TOP1 = 0
MODE_TOP2 = 1
MODE_NAMES = {"top1": MODE_TOP1, "top2": MODE_TOP2}

LOGIT_CLAMP = 20.0
QUANT_LEVELS = 65535
QUANT_STEP = 2 * LOGIT_CLAMP / QUANT_LEVELS  # ~6.1e-4; max error is half this

_HEADER = struct.Struct("<4sHBIIIffff")


class PseudoFileError(Exception):
    pass


class RunOverflowError(PseudoFileError):
    """A label run exceeds the u32 run-length field."""


@dataclass
class PseudoLabels:
    """Decoded pseudo-label file contents."""

    mode: str  # "top1" | "top2"
    spec: GridSpec
    num_classes: int
    top1: SemanticGrid | None = None
    classes: np.ndarray | None = None  # (V, 2) u8, best first
    logits: np.ndarray | None = None  # (V, 2) dequantized

    def hard_labels(self) -> SemanticGrid:
        """Argmax view: Top1 grid, or the stored best class for Top2."""
        if self.mode == "top1":
            return self.top1
        labels = self.classes[:, 0].reshape(self.spec.dims)
        return SemanticGrid(self.spec, labels, self.num_classes)


def quantize_logits(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, -LOGIT_CLAMP, LOGIT_CLAMP)
    return np.rint((x + LOGIT_CLAMP) / (2 * LOGIT_CLAMP) * QUANT_LEVELS).astype(np.uint16)


def dequantize_logits(code: np.ndarray) -> np.ndarray:
    return code.astype(np.float64) / QUANT_LEVELS * (2 * LOGIT_CLAMP) - LOGIT_CLAMP


def encode_top1(sem: SemanticGrid) -> bytes:
    """Run-length encoding of the linear-index label stream."""
    labels = sem.labels.ravel()
    change = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [labels.size]])
    counts = ends - starts
    if (counts > 0xFFFFFFFF).any():
        raise RunOverflowError("run length exceeds u32")
    out = [struct.pack("<I", len(starts))]
    out += [struct.pack("<IB", int(c), int(labels[s])) for c, s in zip(counts, starts)]
    return b"".join(out)


def decode_top1(payload: bytes, spec: GridSpec, num_classes: int) -> SemanticGrid:
    if len(payload) < 4:
        raise PseudoFileError("truncated Top1 stream")
    (runs,) = struct.unpack_from("<I", payload)
    if len(payload) != 4 + 5 * runs:
        raise PseudoFileError(f"truncated Top1 stream: {runs} runs, "
                              f"{len(payload) - 4} payload bytes")
    labels = np.empty(spec.num_voxels, dtype=np.uint8)
    pos = 0
    off = 4
    for _ in range(runs):
        count, label = struct.unpack_from("<IB", payload, off)
        off += 5
        labels[pos:pos + count] = label
        pos += count
    if pos != spec.num_voxels:
        raise PseudoFileError(f"Top1 runs cover {pos} voxels, expected {spec.num_voxels}")
    return SemanticGrid(spec, labels.reshape(spec.dims), num_classes)


def encode_top2(classes: np.ndarray, logits: np.ndarray) -> bytes:
    """Fixed 6 bytes per voxel: two (class u8, quantized logit u16) pairs."""
    if classes.shape != logits.shape or classes.shape[1] != 2:
        raise ValueError("classes/logits must be (V, 2)")
    if (classes[:, 0] == classes[:, 1]).any():
        raise ValueError("top-2 classes must be distinct")
    codes = quantize_logits(logits)
    rec = np.empty((classes.shape[0], 6), dtype=np.uint8)
    rec[:, 0] = classes[:, 0]
    rec[:, 1] = classes[:, 1]
    rec[:, 2] = codes[:, 0] & 0xFF  # quantized logits little-endian
    rec[:, 3] = codes[:, 0] >> 8
    rec[:, 4] = codes[:, 1] & 0xFF
    rec[:, 5] = codes[:, 1] >> 8
    return rec.tobytes()


def decode_top2(payload: bytes, spec: GridSpec):
    n = spec.num_voxels
    if len(payload) != 6 * n:
        raise PseudoFileError(f"truncated Top2 stream: {len(payload)} bytes, "
                              f"expected {6 * n}")
    rec = np.frombuffer(payload, dtype=np.uint8).reshape(n, 6)
    classes = rec[:, :2].astype(np.uint8)
    codes = np.empty((n, 2), dtype=np.uint16)
    codes[:, 0] = rec[:, 2].astype(np.uint16) | (rec[:, 3].astype(np.uint16) << 8)
    codes[:, 1] = rec[:, 4].astype(np.uint16) | (rec[:, 5].astype(np.uint16) << 8)
    return classes, dequantize_logits(codes)


def top2_from_logits(sem_logits: np.ndarray, mask_flat: np.ndarray):
    """Best-two (class, logit) pairs per voxel of an offboard prediction.

    Inside the mask all K+1 class logits compete; outside, the record is
    (free, best non-free) so every voxel keeps a fixed-size entry. Ties
    store the lower class index first.
    """
    v, k1 = sem_logits.shape
    order = np.argsort(-sem_logits, axis=1, kind="stable")
    classes = order[:, :2].astype(np.uint8)
    rows = np.arange(v)
    logits = sem_logits[rows[:, None], order[:, :2]]

    best_obj = 1 + np.argmax(sem_logits[:, 1:], axis=1)
    outside = ~mask_flat
    classes[outside, 0] = 0
    classes[outside, 1] = best_obj[outside]
    logits[outside, 0] = sem_logits[outside, 0]
    logits[outside, 1] = sem_logits[outside, best_obj[outside]]
    return classes, logits


def save_pseudo(path, mode: str, spec: GridSpec, payload: bytes) -> None:
    header = _HEADER.pack(PSEUDO_MAGIC, PSEUDO_VERSION, MODE_NAMES[mode],
                          *spec.dims, spec.voxel_size, *spec.origin)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def load_pseudo(path, num_classes: int) -> PseudoLabels:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != PSEUDO_MAGIC:
        raise PseudoFileError(f"{path}: bad magic {raw[:4]!r}")
    magic, version, mode, h, w, z, vs, ox, oy, oz = _HEADER.unpack_from(raw)
    if version != PSEUDO_VERSION:
        raise PseudoFileError(f"{path}: unsupported version {version}")
    spec = GridSpec((h, w, z), vs, (ox, oy, oz))
    payload = raw[_HEADER.size:]
    if mode == MODE_TOP1:
        return PseudoLabels("top1", spec, num_classes,
                            top1=decode_top1(payload, spec, num_classes))
    if mode == MODE_TOP2:
        classes, logits = decode_top2(payload, spec)
        return PseudoLabels("top2", spec, num_classes, classes=classes, logits=logits)
    raise PseudoFileError(f"{path}: unknown mode byte {mode}")


def generate_pseudo_labels(model: OccupancyModel, scenes, mode: str,
                           out_dir) -> list[Path]:
    """Run the offboard model over scenes and persist one file per scene."""
    if mode not in MODE_NAMES:
        raise ValueError(f"unknown pseudo-label mode {mode!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for scene in scenes:
        res = model.forward(scene.views, mode="offboard", gt_binary=scene.binary)
        path = out_dir / f"{scene.scene_id}.b2sp"
        if mode == "top1":
            payload = encode_top1(res.prediction)
        else:
            classes, logits = top2_from_logits(res.semantic_logits.data,
                                               scene.binary.bits.ravel())
            payload = encode_top2(classes, logits)
        save_pseudo(path, mode, scene.spec, payload)
        paths.append(path)
    return paths


def _soft_pair_targets(labels: PseudoLabels):
    """Renormalized two-class softmax of the stored logit pairs."""
    l1, l2 = labels.logits[:, 0], labels.logits[:, 1]
    q1 = 1.0 / (1.0 + np.exp(l2 - l1))
    return labels.classes.astype(np.int64), np.stack([q1, 1.0 - q1], axis=1)


def train_on_pseudo(model: OccupancyModel, gt_scenes, pseudo, plan: TrainPlan,
                    val_scenes=None, checkpoint_dir=None, fingerprint="",
                    log_fn=None):
    """Student training on GT scenes mixed uniformly with pseudo scenes.

    `pseudo` is a list of (scene, PseudoLabels) pairs; Top1 entries train
    exactly like GT scenes with the decoded labels, Top2 entries use the
    soft two-class cross-entropy. With no pseudo scenes this is plain
    fine-tuning on the GT set.
    """
    modes = {labels.mode for _, labels in pseudo}
    if len(modes) > 1:
        raise ValueError(f"mixed pseudo-label modes in one dataset: {sorted(modes)}")
    samples = [("scene", s) for s in gt_scenes]
    for scene, labels in pseudo:
        if labels.mode == "top1":
            shim = SimpleNamespace(views=scene.views, semantic=labels.top1)
            samples.append(("scene", shim))
        else:
            samples.append(("top2", (scene, labels)))
    if not samples:
        raise ValueError("no training scenes")
    all_params = model.store.all()
    trainer = _Trainer(model, plan, val_scenes, checkpoint_dir, fingerprint,
                       log_fn=log_fn)

    def top2_loss(scene, labels: PseudoLabels):
        res = model.forward(scene.views, mode="onboard", want_prediction=False)
        pairs, probs = _soft_pair_targets(labels)
        loss_sem = T.soft_pair_cross_entropy(res.semantic_logits, pairs, probs)
        lbin = 0.0
        loss = loss_sem
        if plan.regime != "S" and plan.binary_weight != 0.0:
            bstar = binary_from_semantic(labels.hard_labels())
            bin_loss = T.bce_with_logits(res.binary_logits,
                                         model.downsample_binary_target(bstar))
            lbin = bin_loss.item()
            loss = T.add(loss_sem, T.scale(bin_loss, plan.binary_weight))
        return loss, float(loss_sem.item()), float(lbin)

    def epoch_fn(rng):
        total = total_sem = total_bin = steps = 0.0
        for batch in _batches(rng, len(samples), plan.batch_size):
            model.store.zero_grad()
            b_loss = b_sem = b_bin = 0.0
            for i in batch:
                kind, payload = samples[i]
                if kind == "scene":
                    loss, lsem, lbin = _semantic_batch_loss(model, payload, plan)
                else:
                    loss, lsem, lbin = top2_loss(*payload)
                T.scale(loss, 1.0 / len(batch)).backward()
                b_loss += loss.item() / len(batch)
                b_sem += lsem / len(batch)
                b_bin += lbin / len(batch)
            adamw_step(all_params, plan.lr, weight_decay=plan.weight_decay)
            total += b_loss
            total_sem += b_sem
            total_bin += b_bin
            steps += 1
        return {"loss": total / steps, "semantic": total_sem / steps,
                "binary": total_bin / steps}

    return trainer.run_epochs(epoch_fn)
