"""Dense voxel grids, occupancy metrics, and the grid file format.

All modules share one linear index convention for voxel (h, w, z) in an
(H, W, Z) grid: i = (h*W + w)*Z + z, i.e. C-order flattening.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

GRID_MAGIC = b"B2SO"
GRID_VERSION = 1
KIND_BINARY = 0
KIND_SEMANTIC = 1


class GridFileError(Exception):
    """Malformed or unreadable grid file."""


class BadMagicError(GridFileError):
    pass


class UnsupportedVersionError(GridFileError):
    pass


class TruncatedPayloadError(GridFileError):
    pass


def _f32(x: float) -> float:
    # Header floats are stored as f32; normalizing at construction keeps
    # save/load round trips exact.
    return float(np.float32(x))


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a dense (H, W, Z) voxel grid in the ego frame.

    `origin` is the ego-frame coordinate (meters) of the min corner of
    voxel (0, 0, 0); `voxel_size` is the cube edge length in meters.
    """

    dims: tuple[int, int, int]
    voxel_size: float
    origin: tuple[float, float, float]

    def __post_init__(self):
        h, w, z = self.dims
        if min(h, w, z) <= 0:
            raise ValueError(f"grid dims must be positive, got {self.dims}")
        if self.voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        object.__setattr__(self, "dims", (int(h), int(w), int(z)))
        object.__setattr__(self, "voxel_size", _f32(self.voxel_size))
        object.__setattr__(self, "origin", tuple(_f32(v) for v in self.origin))

    @property
    def num_voxels(self) -> int:
        h, w, z = self.dims
        return h * w * z

    def linear_index(self, h, w, z):
        """(h*W + w)*Z + z, vectorized over array inputs."""
        _, wd, zd = self.dims
        return (np.asarray(h) * wd + np.asarray(w)) * zd + np.asarray(z)

    def voxel_centers(self) -> np.ndarray:
        """(H, W, Z, 3) array of voxel center coordinates in meters."""
        h, w, z = self.dims
        idx = np.stack(np.meshgrid(np.arange(h), np.arange(w), np.arange(z),
                                   indexing="ij"), axis=-1)
        return np.asarray(self.origin) + (idx + 0.5) * self.voxel_size

    def voxel_of(self, points: np.ndarray) -> np.ndarray:
        """Integer voxel indices of (..., 3) points; may land out of range."""
        rel = (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / self.voxel_size
        return np.floor(rel).astype(np.int64)

    def in_bounds(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)


class BinaryGrid:
    """Occupied/free state per voxel (True = occupied)."""

    def __init__(self, spec: GridSpec, bits: np.ndarray):
        bits = np.ascontiguousarray(bits, dtype=bool)
        if bits.shape != spec.dims:
            raise ValueError(f"bits shape {bits.shape} != grid dims {spec.dims}")
        self.spec = spec
        self.bits = bits

    @classmethod
    def empty(cls, spec: GridSpec) -> "BinaryGrid":
        return cls(spec, np.zeros(spec.dims, dtype=bool))

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other) -> bool:
        return (isinstance(other, BinaryGrid) and self.spec == other.spec
                and np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f"BinaryGrid(dims={self.spec.dims}, occupied={self.count()})"


class SemanticGrid:
    """Per-voxel labels in {0..K}; label 0 is always 'free'."""

    def __init__(self, spec: GridSpec, labels: np.ndarray, num_classes: int):
        labels = np.ascontiguousarray(labels, dtype=np.uint8)
        if labels.shape != spec.dims:
            raise ValueError(f"labels shape {labels.shape} != grid dims {spec.dims}")
        if not 1 <= num_classes <= 255:
            raise ValueError(f"num_classes must be in [1, 255], got {num_classes}")
        if labels.max(initial=0) > num_classes:
            raise ValueError(f"label {labels.max()} exceeds num_classes {num_classes}")
        self.spec = spec
        self.labels = labels
        self.num_classes = num_classes

    @classmethod
    def free(cls, spec: GridSpec, num_classes: int) -> "SemanticGrid":
        return cls(spec, np.zeros(spec.dims, dtype=np.uint8), num_classes)

    def __eq__(self, other) -> bool:
        return (isinstance(other, SemanticGrid) and self.spec == other.spec
                and self.num_classes == other.num_classes
                and np.array_equal(self.labels, other.labels))

    def __repr__(self):
        occ = int((self.labels != 0).sum())
        return f"SemanticGrid(dims={self.spec.dims}, K={self.num_classes}, occupied={occ})"


def binary_from_semantic(sem: SemanticGrid) -> BinaryGrid:
    """Binary projection: a voxel is occupied iff its label is not 'free'."""
    return BinaryGrid(sem.spec, sem.labels != 0)


def _check_same_spec(a, b):
    if a.spec != b.spec:
        raise ValueError(f"grid spec mismatch: {a.spec} vs {b.spec}")


def grid_iou(a: BinaryGrid, b: BinaryGrid) -> float:
    """Geometric IoU |a AND b| / |a OR b|; both-empty counts as 1.0."""
    _check_same_spec(a, b)
    return mask_iou(a.bits, b.bits)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two boolean arrays of identical shape (both-empty -> 1.0)."""
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return inter / union


class ConfusionTable:
    """(K+1) x (K+1) voxel counts, rows = GT label, cols = predicted label."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        k1 = num_classes + 1
        if counts is None:
            counts = np.zeros((k1, k1), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (k1, k1):
            raise ValueError(f"counts shape {counts.shape} != ({k1}, {k1})")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        self.num_classes = num_classes
        self.counts = counts

    @classmethod
    def from_grids(cls, gt: SemanticGrid, pred: SemanticGrid) -> "ConfusionTable":
        _check_same_spec(gt, pred)
        if gt.num_classes != pred.num_classes:
            raise ValueError(f"num_classes mismatch: {gt.num_classes} vs {pred.num_classes}")
        k1 = gt.num_classes + 1
        joint = gt.labels.astype(np.int64).ravel() * k1 + pred.labels.ravel()
        counts = np.bincount(joint, minlength=k1 * k1).reshape(k1, k1)
        return cls(gt.num_classes, counts)

    def add(self, other: "ConfusionTable") -> "ConfusionTable":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge tables with different num_classes")
        return ConfusionTable(self.num_classes, self.counts + other.counts)

    def total(self) -> int:
        return int(self.counts.sum())

    def class_iou(self, c: int) -> float:
        """TP / (TP + FP + FN) for class c; NaN when c is absent from both."""
        tp = self.counts[c, c]
        fp = self.counts[:, c].sum() - tp
        fn = self.counts[c, :].sum() - tp
        denom = tp + fp + fn
        if denom == 0:
            return float("nan")
        return float(tp / denom)

    def per_class_iou(self) -> list[float]:
        """IoU of semantic classes 1..K (free excluded)."""
        return [self.class_iou(c) for c in range(1, self.num_classes + 1)]

    def miou(self) -> float:
        """Mean IoU over classes present in GT or prediction.

        Classes absent from both sides are excluded; with no class present
        on either side the result is 1.0 (vacuous agreement).
        """
        ious = [v for v in self.per_class_iou() if not np.isnan(v)]
        if not ious:
            return 1.0
        return float(np.mean(ious))

    def binary_iou(self) -> float:
        """IoU of the occupied (label != 0) projections."""
        total = self.counts.sum()
        both_free = self.counts[0, 0]
        union = total - both_free
        if union == 0:
            return 1.0
        inter = total - self.counts[0, :].sum() - self.counts[:, 0].sum() + both_free
        return float(inter / union)


def semantic_scores(pred: SemanticGrid, gt: SemanticGrid):
    """Per-class IoU (classes 1..K, NaN where absent), mIoU, binary IoU."""
    table = ConfusionTable.from_grids(gt, pred)
    return table.per_class_iou(), table.miou(), table.binary_iou()


# --- grid file format -------------------------------------------------------
#
# magic "B2SO" | version u16 | kind u8 (0=binary, 1=semantic)
# | H, W, Z u32 | voxel_size f32 | origin 3xf32 | payload
#
# Binary payload: packed bits in linear-index order, LSB-first per byte.
# Semantic payload: raw u8 labels in linear-index order.
# All integers little-endian.

_HEADER = struct.Struct("<4sHBIIIffff")


def save_grid(grid: BinaryGrid | SemanticGrid, path) -> None:
    spec = grid.spec
    if isinstance(grid, BinaryGrid):
        kind = KIND_BINARY
        payload = np.packbits(grid.bits.ravel(), bitorder="little").tobytes()
    elif isinstance(grid, SemanticGrid):
        kind = KIND_SEMANTIC
        payload = grid.labels.ravel().tobytes()
    else:
        raise TypeError(f"not a grid: {type(grid).__name__}")
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, kind, *spec.dims,
                          spec.voxel_size, *spec.origin)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def load_grid(path, num_classes: int | None = None) -> BinaryGrid | SemanticGrid:
    """Load a grid file.

    The file format does not store K; for semantic grids pass `num_classes`
    (e.g. from a dataset manifest) or it is inferred as max(labels).
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        if raw[:4] != GRID_MAGIC:
            raise BadMagicError(f"{path}: not a grid file")
        raise TruncatedPayloadError(f"{path}: incomplete header")
    magic, version, kind, h, w, z, vs, ox, oy, oz = _HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != GRID_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}, expected {GRID_VERSION}")
    spec = GridSpec((h, w, z), vs, (ox, oy, oz))
    payload = raw[_HEADER.size:]
    n = spec.num_voxels
    if kind == KIND_BINARY:
        expected = (n + 7) // 8
        if len(payload) != expected:
            raise TruncatedPayloadError(
                f"{path}: binary payload {len(payload)} bytes, expected {expected}")
        bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8),
                             count=n, bitorder="little").astype(bool)
        return BinaryGrid(spec, bits.reshape(spec.dims))
    if kind == KIND_SEMANTIC:
        if len(payload) != n:
            raise TruncatedPayloadError(
                f"{path}: semantic payload {len(payload)} bytes, expected {n}")
        labels = np.frombuffer(payload, dtype=np.uint8).reshape(spec.dims)
        if num_classes is None:
            num_classes = max(1, int(labels.max()))
        return SemanticGrid(spec, labels.copy(), num_classes)
    raise GridFileError(f"{path}: unknown grid kind {kind}")
