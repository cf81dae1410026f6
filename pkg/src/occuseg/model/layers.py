"""Network building blocks on top of the tensor core.

All blocks are pre-norm residual: x + F(layer_norm(x)), which makes a
zero-initialized sub-block an exact identity.
"""
from __future__ import annotations

import numpy as np

from ..nn import tensor as T
from ..nn.params import ParamStore, init_uniform
from ..nn.tensor import Tensor


class Builder:
    """Creates named parameters with deterministic initialization order."""

    def __init__(self, store: ParamStore, rng):
        self.store = store
        self.rng = rng

    def param(self, name, shape, fan_in=None, zero=False):
        if zero:
            data = np.zeros(shape)
        elif fan_in is None:
            data = np.zeros(shape)
        else:
            data = init_uniform(self.rng, shape, fan_in)
        return self.store.create(name, data)

    def linear(self, name, cin, cout, zero=False):
        return Linear(self.param(f"{name}/w", (cin, cout), fan_in=cin, zero=zero),
                      self.param(f"{name}/b", (cout,), zero=True))

    def conv(self, name, cin, cout):
        return Conv(self.param(f"{name}/w", (3, 3, cin, cout), fan_in=9 * cin),
                    self.param(f"{name}/b", (cout,), zero=True))

    def norm(self, name, c):
        gain = self.store.create(f"{name}/g", np.ones(c))
        bias = self.store.create(f"{name}/b", np.zeros(c))
        return LayerNorm(gain, bias)


class Linear:
    def __init__(self, w, b):
        self.w, self.b = w, b

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.w.tensor, self.b.tensor)


class Conv:
    def __init__(self, w, b):
        self.w, self.b = w, b

    def __call__(self, x, stride=1) -> Tensor:
        return T.conv2d(x, self.w.tensor, self.b.tensor, stride=stride)


class LayerNorm:
    def __init__(self, gain, bias):
        self.gain, self.bias = gain, bias

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gain.tensor, self.bias.tensor)


class MLP:
    def __init__(self, builder, name, c, hidden):
        self.fc1 = builder.linear(f"{name}/fc1", c, hidden)
        self.fc2 = builder.linear(f"{name}/fc2", hidden, c)

    def __call__(self, x) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class DeformableAttention:
    """Multi-head deformable attention over a 2-D map or 3-D volume.

    Per head, a linear layer on the query predicts `points` sampling
    offsets in normalized coordinates and a softmax over the points gives
    the mixing weights. Offset and weight layers are zero-initialized so
    a fresh module samples exactly at the reference points.
    """

    def __init__(self, builder, name, channels, heads, points, ndim,
                 value_channels=None):
        if channels % heads:
            raise ValueError("channels must divide evenly across heads")
        self.heads = heads
        self.points = points
        self.ndim = ndim
        self.head_dim = channels // heads
        self.channels = channels
        self.offset = builder.linear(f"{name}/offset", channels, heads * points * ndim,
                                     zero=True)
        self.weight = builder.linear(f"{name}/weight", channels, heads * points,
                                     zero=True)
        self.value_proj = builder.linear(f"{name}/value",
                                         value_channels or channels, channels)
        self.out_proj = builder.linear(f"{name}/out", channels, channels)

    def __call__(self, query: Tensor, refs: np.ndarray, value_map: Tensor) -> Tensor:
        """query: (Q, C); refs: (Q, ndim) numpy in [0, 1]; value_map:
        (*spatial, C). Returns the attention output (no residual)."""
        q = query.shape[0]
        spatial = value_map.shape[:-1]
        # heads on the last axis so per-head views are cheap narrows
        offs = T.reshape(self.offset(query), (q, self.points, self.ndim, self.heads))
        weights = T.softmax(T.reshape(self.weight(query), (q, self.points, self.heads)),
                            axis=1)
        v = self.value_proj(T.reshape(value_map, (-1, value_map.shape[-1])))
        v = T.reshape(v, spatial + (self.channels,))
        coords = T.add(offs, refs[:, None, :, None])  # (Q, P, ndim, heads)

        sample = T.bilinear_sample if self.ndim == 2 else T.trilinear_sample
        head_outs = []
        for m in range(self.heads):
            vol_m = T.slice_last(v, m * self.head_dim, (m + 1) * self.head_dim)
            cm = T.reshape(T.slice_last(coords, m, m + 1), (q, self.points, self.ndim))
            w_m = T.reshape(T.slice_last(weights, m, m + 1), (q, self.points, 1))
            sampled = sample(vol_m, cm)  # (Q, P, head_dim)
            head_outs.append(T.tsum(T.mul(sampled, w_m), axis=1))
        return self.out_proj(T.concat(head_outs, axis=1))
