"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

ABS_FLOOR = 1e-8  # below this, analytic vs numeric disagreement is noise


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_input: int
    worst_coord: tuple
    checked: int

    def __repr__(self):
        return (f"GradCheckResult(max_rel_error={self.max_rel_error:.3e}, "
                f"input={self.worst_input}, coord={self.worst_coord}, n={self.checked})")


def grad_check(fn, inputs, step: float = 1e-5, max_coords: int | None = None,
               rng=None) -> GradCheckResult:
    """Compare analytic gradients of a scalar function to central differences.

    `fn` maps the given Tensors to a scalar Tensor. Each input coordinate
    is perturbed by +-step*(1 + |x|). With `max_coords`, a seeded random
    subset of coordinates per input is checked instead of all of them.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data):
        raise FloatingPointError("non-finite function value")
    out.backward()

    rng = rng or np.random.default_rng(0)
    worst = GradCheckResult(0.0, -1, (), 0)
    for i, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for j in coords:
            h = step * (1.0 + abs(flat[j]))
            orig = flat[j]
            flat[j] = orig + h
            fp = float(fn(*inputs).data)
            flat[j] = orig - h
            fm = float(fn(*inputs).data)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("non-finite value during perturbation")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[j]
            rel = abs(a - numeric) / max(abs(a) + abs(numeric), ABS_FLOOR)
            worst.checked += 1
            if rel > worst.max_rel_error:
                worst.max_rel_error = rel
                worst.worst_input = i
                worst.worst_coord = np.unravel_index(j, t.data.shape)
    return worst
