"""Minimal differentiable-tensor core for the occupancy model."""

from .tensor import Tensor  # noqa: F401
