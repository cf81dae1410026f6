"""Named parameters, the AdamW update, and checkpoint serialization."""
from __future__ import annotations

import struct

import numpy as np

from .tensor import Tensor

CKPT_MAGIC = b"B2SC"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


class FingerprintMismatchError(CheckpointError):
    """Checkpoint was produced under a different experiment config."""


class Parameter:
    """A trainable tensor with its optimizer state.

    Names are unique slash-separated paths; the first path segment is the
    parameter's stage tag (used to partition pre-training updates).
    """

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


class ParamStore:
    """Ordered name -> Parameter registry for one model."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def create(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def all(self) -> list[Parameter]:
        return list(self._params.values())

    def with_prefix(self, prefixes) -> list[Parameter]:
        prefixes = tuple(prefixes)
        return [p for n, p in self._params.items()
                if any(n == pre or n.startswith(pre + "/") for pre in prefixes)]

    def zero_grad(self):
        for p in self._params.values():
            p.tensor.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self._params.items()}


def init_uniform(rng, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def adamw_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Decoupled-weight-decay Adam update.

    Parameters whose gradient is None are skipped entirely: no moment
    update, no decay. This is what keeps stage partitions untouched.
    """
    for p in params:
        g = p.tensor.grad
        if g is None:
            continue
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        mhat = p.m / (1.0 - beta1 ** p.step)
        vhat = p.v / (1.0 - beta2 ** p.step)
        p.tensor.data -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.tensor.data)


# --- checkpoint files ---------------------------------------------------------
#
# magic "B2SC" | version u16 | fingerprint length u16 + UTF-8 fingerprint
# | parameter count u32 | per parameter:
#   name length u16 + UTF-8 name | rank u32 + dims u32 each | f64 values LE
#
# Optimizer state uses the same container in a sibling file, with entries
# "<name>.m", "<name>.v" and a scalar "<name>.step" per parameter.

def save_arrays(path, arrays: dict[str, np.ndarray], fingerprint: str = "") -> None:
    fp = fingerprint.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<H", CKPT_VERSION))
        f.write(struct.pack("<H", len(fp)))
        f.write(fp)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_arrays(path) -> tuple[dict[str, np.ndarray], str]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<H", raw, off)
    off += 2
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {CKPT_VERSION}")
    (fp_len,) = struct.unpack_from("<H", raw, off)
    off += 2
    fingerprint = raw[off:off + fp_len].decode("utf-8")
    off += fp_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims)
            off += 8 * n
            arrays[name] = arr.copy()
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint") from e
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays, fingerprint


def save_checkpoint(store: ParamStore, path, fingerprint: str = "") -> None:
    save_arrays(path, store.state_arrays(), fingerprint)


def load_checkpoint(store: ParamStore, path, expected_fingerprint: str | None = None,
                    allow_missing: bool = False) -> list[str]:
    """Load values into matching parameters by name.

    Returns the checkpoint names that had no matching parameter (dropped,
    e.g. the binary head under the replacing strategy). Parameters absent
    from the file keep their fresh initialization when `allow_missing`.
    """
    arrays, fingerprint = load_arrays(path)
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FingerprintMismatchError(
            f"{path}: fingerprint {fingerprint!r} != expected {expected_fingerprint!r}")
    dropped = [n for n in arrays if n not in store]
    missing = [n for n in store.names() if n not in arrays]
    if missing and not allow_missing:
        raise CheckpointError(f"{path}: missing parameters {missing[:4]}...")
    for name, arr in arrays.items():
        if name not in store:
            continue
        p = store[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"{path}: shape {arr.shape} != {p.data.shape} for {name}")
        p.tensor.data = arr.astype(np.float64)
    return dropped


def save_optimizer(store: ParamStore, path, fingerprint: str = "") -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in ((n, store[n]) for n in store.names()):
        arrays[name + ".m"] = p.m
        arrays[name + ".v"] = p.v
        arrays[name + ".step"] = np.asarray(float(p.step))
    save_arrays(path, arrays, fingerprint)


def load_optimizer(store: ParamStore, path) -> None:
    arrays, _ = load_arrays(path)
    for name in store.names():
        p = store[name]
        p.m = arrays[name + ".m"].astype(np.float64)
        p.v = arrays[name + ".v"].astype(np.float64)
        p.step = int(arrays[name + ".step"].item())
