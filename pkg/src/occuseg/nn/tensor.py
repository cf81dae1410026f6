"""Reverse-mode autodiff over dense float64 numpy arrays.

The op set is exactly what the occupancy model needs: elementwise
arithmetic, matmul, conv2d, normalization, interpolation sampling,
row gather/scatter, and the two training losses. Every op carries an
analytic backward; the finite-difference harness in `gradcheck` is the
independent check.
"""
from __future__ import annotations

import numpy as np

_EPS_LN = 1e-5  # layer-norm variance epsilon, shared by all layers


class Tensor:
    """A node in the computation graph.

    `data` is always a float64 ndarray. Gradients accumulate into `grad`
    when `backward` runs; graphs are acyclic and each node's backward
    closure fires exactly once, in reverse topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @classmethod
    def _node(cls, data, parents, backward):
        """Internal constructor for op results."""
        out = cls(data)
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)  # copy: g may be reused
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        self.backward_with(np.ones_like(self.data))

    def backward_with(self, seed):
        """Propagate an explicit output adjoint through the graph."""
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.accumulate(np.asarray(seed, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise and linear algebra ----------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return Tensor._node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._node(out_data, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def backward(g):
        a.accumulate(g * s)

    return Tensor._node(a.data * s, (a,), backward)


def matmul(a, b) -> Tensor:
    """a @ b with a of shape (..., m, k) and b of shape (k, n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2:
        raise ValueError(f"matmul rhs must be 2-D, got {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        a.accumulate(g @ b.data.T)
        b.accumulate(np.tensordot(a.data, g, axes=(range(a.ndim - 1),) * 2))

    return Tensor._node(out_data, (a, b), backward)


def linear(x, w, bias=None) -> Tensor:
    """Pointwise affine map along the last axis: x @ w (+ bias)."""
    out = matmul(x, w)
    if bias is not None:
        out = add(out, bias)
    return out


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        x.accumulate(g * mask)

    return Tensor._node(x.data * mask, (x,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.accumulate(piece)

    return Tensor._node(out_data, tuple(tensors), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape

    def backward(g):
        x.accumulate(g.reshape(old))

    return Tensor._node(x.data.reshape(shape), (x,), backward)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    inv = np.argsort(axes)

    def backward(g):
        x.accumulate(g.transpose(inv))

    return Tensor._node(x.data.transpose(axes), (x,), backward)


def slice_last(x, start: int, stop: int) -> Tensor:
    """Narrow the last axis to [start, stop)."""
    x = _as_tensor(x)

    def backward(g):
        gx = np.zeros(x.shape)
        gx[..., start:stop] = g
        x.accumulate(gx)

    return Tensor._node(x.data[..., start:stop], (x,), backward)


def tsum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            x.accumulate(np.broadcast_to(g, x.shape).copy() if np.ndim(g) else np.full(x.shape, g))
        else:
            x.accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return Tensor._node(out_data, (x,), backward)


def tmean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x.accumulate(y * (g - dot))

    return Tensor._node(y, (x,), backward)


def layer_norm(x, gain, bias) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _EPS_LN)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        gain.accumulate(_unbroadcast(g * xhat, gain.shape))
        bias.accumulate(_unbroadcast(g, bias.shape))
        gx = g * gain.data
        # d/dx of (x - mu) * inv with mu, inv functions of x
        t1 = gx.sum(axis=-1, keepdims=True)
        t2 = (gx * xhat).sum(axis=-1, keepdims=True)
        x.accumulate(inv * (gx - t1 / n - xhat * t2 / n))

    return Tensor._node(out_data, (x, gain, bias), backward)


# --- convolution and resampling ---------------------------------------------

def conv2d(x, w, bias, stride: int = 1) -> Tensor:
    """3x3 convolution, padding 1, stride 1 or 2.

    x: (N, H, W, Cin), w: (3, 3, Cin, Cout), bias: (Cout,).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if (kh, kw) != (3, 3) or wcin != cin:
        raise ValueError(f"conv2d expects (3,3,{cin},Cout) weights, got {w.shape}")
    ho = (h + 2 - 3) // stride + 1
    wo = (wd + 2 - 3) // stride + 1

    xp = np.zeros((n, h + 2, wd + 2, cin))
    xp[:, 1:-1, 1:-1, :] = x.data
    # im2col: (N, Ho, Wo, 3, 3, Cin)
    i0 = np.arange(ho) * stride
    j0 = np.arange(wo) * stride
    cols = np.empty((n, ho, wo, 3, 3, cin))
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, di, dj, :] = xp[:, i0 + di, :, :][:, :, j0 + dj, :]
    flat = cols.reshape(n * ho * wo, 9 * cin)
    wflat = w.data.reshape(9 * cin, cout)
    out_data = (flat @ wflat).reshape(n, ho, wo, cout)
    out = Tensor._node(out_data, (x, w), None)

    def backward(g):
        gflat = g.reshape(n * ho * wo, cout)
        w.accumulate((flat.T @ gflat).reshape(w.shape))
        gcols = (gflat @ wflat.T).reshape(n, ho, wo, 3, 3, cin)
        gxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                np.add.at(gxp, (slice(None), i0[:, None] + di, j0[None, :] + dj),
                          gcols[:, :, :, di, dj, :])
        x.accumulate(gxp[:, 1:-1, 1:-1, :])

    out._backward = backward
    if bias is not None:
        out = add(out, bias)
    return out


def upsample_nearest(x, factors) -> Tensor:
    """Nearest-neighbor upsampling of the leading spatial axes.

    x has shape (*spatial, C); `factors` gives an integer factor per
    spatial axis. Backward sum-pools gradients back to the source cells.
    """
    x = _as_tensor(x)
    factors = tuple(int(f) for f in factors)
    if len(factors) != x.ndim - 1:
        raise ValueError(f"need {x.ndim - 1} factors, got {len(factors)}")
    out_data = x.data
    for ax, f in enumerate(factors):
        if f > 1:
            out_data = np.repeat(out_data, f, axis=ax)

    def backward(g):
        for ax, f in enumerate(factors):
            if f > 1:
                shape = list(g.shape)
                shape[ax] = shape[ax] // f
                shape.insert(ax + 1, f)
                g = g.reshape(shape).sum(axis=ax + 1)
        x.accumulate(g)

    return Tensor._node(out_data, (x,), backward)


def gather_rows(x, idx) -> Tensor:
    """Select rows of a (V, C) tensor; backward scatter-adds."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = x.data[idx]

    def backward(g):
        c = x.data.shape[-1]
        flat_idx = (idx[:, None] * c + np.arange(c)).ravel()
        gx = np.bincount(flat_idx, weights=np.ascontiguousarray(g).ravel(),
                         minlength=x.data.size)
        x.accumulate(gx.reshape(x.data.shape))

    return Tensor._node(out_data, (x,), backward)


def scatter_rows(x, idx, size: int) -> Tensor:
    """Place rows of a (M, C) tensor into a zero (size, C) tensor.

    Duplicate indices accumulate; the sparse feature set never has them.
    """
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    c = x.shape[-1]
    flat_idx = (idx[:, None] * c + np.arange(c)).ravel()
    out_data = np.bincount(flat_idx, weights=x.data.ravel(),
                           minlength=size * c).reshape(size, c)

    def backward(g):
        x.accumulate(g[idx])

    return Tensor._node(out_data, (x,), backward)


def _sample_setup(coords_data, sizes):
    """Clamp normalized coords to [0, 1] and map to grid positions.

    Normalization is grid-aligned: coordinate u in [0, 1] maps to array
    position u * (n - 1), so u = i / (n - 1) lands exactly on cell i.
    Returns (lo, frac, inside) per axis.
    """
    lo, frac, inside = [], [], []
    for ax, n in enumerate(sizes):
        u = coords_data[..., ax]
        inside.append((u >= 0.0) & (u <= 1.0))
        pos = np.clip(u, 0.0, 1.0) * (n - 1)
        i0 = np.clip(np.floor(pos).astype(np.int64), 0, max(n - 2, 0))
        lo.append(i0)
        frac.append(pos - i0 if n > 1 else np.zeros_like(pos))
    return lo, frac, inside


def bilinear_sample(grid, coords) -> Tensor:
    """Sample a (H, W, C) map at normalized (..., 2) coordinates.

    Out-of-range coordinates clamp to the border with zero coordinate
    gradient there. Differentiable w.r.t. both the map and the coords.
    """
    return _nd_sample(grid, coords, 2)


def trilinear_sample(volume, coords) -> Tensor:
    """Sample a (H, W, Z, C) volume at normalized (..., 3) coordinates."""
    return _nd_sample(volume, coords, 3)


def _nd_sample(grid, coords, ndim: int) -> Tensor:
    grid, coords = _as_tensor(grid), _as_tensor(coords)
    if grid.ndim != ndim + 1:
        raise ValueError(f"value map must have {ndim + 1} axes, got {grid.ndim}")
    if coords.shape[-1] != ndim:
        raise ValueError(f"coords last axis must be {ndim}, got {coords.shape[-1]}")
    sizes = grid.shape[:ndim]
    c = grid.shape[-1]
    lo, frac, inside = _sample_setup(coords.data, sizes)
    flat = grid.data.reshape(-1, c)
    strides = np.ones(ndim, dtype=np.int64)
    for ax in range(ndim - 2, -1, -1):
        strides[ax] = strides[ax + 1] * sizes[ax + 1]

    corners = []  # (flat_index, weight, per-axis offset bits)
    for mask in range(2 ** ndim):
        offs = [(mask >> (ndim - 1 - ax)) & 1 for ax in range(ndim)]
        idx = sum((np.minimum(lo[ax] + offs[ax], sizes[ax] - 1)) * strides[ax]
                  for ax in range(ndim))
        wgt = np.ones_like(frac[0])
        for ax in range(ndim):
            wgt = wgt * (frac[ax] if offs[ax] else 1.0 - frac[ax])
        corners.append((idx, wgt, offs))

    out_data = np.zeros(coords.shape[:-1] + (c,))
    vals = []
    for idx, wgt, _ in corners:
        v = flat[idx]
        vals.append(v)
        out_data += wgt[..., None] * v

    def backward(g):
        if grid.requires_grad:
            ar = np.arange(c)
            all_fi = np.concatenate(
                [(idx.reshape(-1, 1) * c + ar).ravel() for idx, _, _ in corners])
            all_contrib = np.concatenate(
                [(g * wgt[..., None]).reshape(-1) for _, wgt, _ in corners])
            gflat = np.bincount(all_fi, weights=all_contrib, minlength=flat.size)
            grid.accumulate(gflat.reshape(grid.shape))
        if coords.requires_grad:
            gc = np.zeros(coords.shape)
            for ax in range(ndim):
                if sizes[ax] <= 1:
                    continue
                dax = np.zeros(out_data.shape)
                for (idx, wgt, offs), v in zip(corners, vals):
                    dw = np.ones_like(frac[0])
                    for ax2 in range(ndim):
                        if ax2 == ax:
                            dw = dw * (1.0 if offs[ax2] else -1.0)
                        else:
                            dw = dw * (frac[ax2] if offs[ax2] else 1.0 - frac[ax2])
                    dax += dw[..., None] * v
                gc[..., ax] = (g * dax).sum(axis=-1) * (sizes[ax] - 1) * inside[ax]
            coords.accumulate(gc)

    return Tensor._node(out_data, (grid, coords), backward)


# --- losses -----------------------------------------------------------------

def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy, computed as softplus(z) - y*z."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ValueError(f"target shape {targets.shape} != logits {logits.shape}")
    z = logits.data
    softplus = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out_data = np.asarray((softplus - targets * z).sum() / n)

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        logits.accumulate(g * (sig - targets) / n)

    return Tensor._node(out_data, (logits,), backward)


def focal_loss(logits, labels, gamma: float = 2.0, alpha=1.0) -> Tensor:
    """Mean focal loss -alpha_t * (1 - p_t)^gamma * log(p_t).

    logits: (N, K+1); labels: (N,) ints in {0..K}; alpha may be a scalar
    or a per-class (K+1,) vector. gamma = 0, alpha = 1 is cross-entropy.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if labels.ndim != 1 or logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise ValueError(f"bad focal shapes: logits {logits.shape}, labels {labels.shape}")
    k1 = logits.shape[1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k1:
        raise ValueError(f"label out of range [0, {k1 - 1}]")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(labels.shape[0])
    logpt = z[rows, labels] - lse
    pt = np.exp(logpt)
    at = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (k1,))[labels]
    n = labels.shape[0]
    out_data = np.asarray((-at * (1.0 - pt) ** gamma * logpt).sum() / n)

    def backward(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        # dL_i/dp_t, then chain through softmax: dp_t/dz_j = p_t (1[t=j] - p_j)
        one_m = 1.0 - pt
        dldpt = -at * (one_m ** gamma / np.maximum(pt, 1e-300)
                       - gamma * np.where(one_m > 0, one_m ** np.maximum(gamma - 1.0, 0.0), 0.0) * logpt)
        gz = -p * (dldpt * pt)[:, None]
        gz[rows, labels] += dldpt * pt
        logits.accumulate(g * gz / n)

    return Tensor._node(out_data, (logits,), backward)


def soft_pair_cross_entropy(logits, class_pairs, target_probs) -> Tensor:
    """Mean cross-entropy against a two-class soft target.

    logits: (N, K+1); class_pairs: (N, 2) ints; target_probs: (N, 2)
    summing to 1 per row. Target mass is zero outside the pair.
    """
    logits = _as_tensor(logits)
    pairs = np.asarray(class_pairs, dtype=np.int64)
    q = np.asarray(target_probs, dtype=np.float64)
    n, k1 = logits.shape
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(n)
    logp = z[rows[:, None], pairs] - lse[:, None]
    out_data = np.asarray(-(q * logp).sum() / n)

    def backward(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        qfull = np.zeros((n, k1))
        np.add.at(qfull, (rows[:, None], pairs), q)
        logits.accumulate(g * (p - qfull) / n)

    return Tensor._node(out_data, (logits,), backward)
