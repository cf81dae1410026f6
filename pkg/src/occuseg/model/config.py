"""Model architecture configuration and derived volume shapes."""
from __future__ import annotations

from dataclasses import dataclass

from ..voxel import GridSpec

TRANSFORMS = ("lift_splat", "deformable")
STRATEGIES = ("intermediate", "multi_head", "replacing")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; defaults are the desk-scale configuration."""

    transform: str = "lift_splat"
    strategy: str = "intermediate"
    dense_layers: int = 0  # lift-splat default; deformable needs >= 1
    sparse_layers: int = 1
    heads: int = 4
    self_points: int = 4
    cross_points: int = 8
    embed: int = 32  # compact volume channels C
    mid_channels: int = 32  # C'
    out_channels: int = 32  # C''
    mlp_hidden: int = 64
    encoder_stem: int = 16
    depth_bins: int = 10
    depth_min: float = 0.5
    depth_max: float = 12.5
    threshold: float = 0.5  # binary occupancy decision on sigmoid(logit)
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    sparse_image_cross: bool = True
    z_up_mid: int = 1  # compact -> mid upsampling factor along z
    z_up_full: int = 1  # mid -> full upsampling factor along z

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.transform == "deformable" and self.dense_layers < 1:
            raise ValueError("the deformable transform needs at least one dense layer")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.dense_layers < 0 or self.sparse_layers < 0:
            raise ValueError("layer counts must be non-negative")
        for dim, heads in (("embed", self.embed), ("mid_channels", self.mid_channels)):
            if heads % self.heads:
                raise ValueError(f"{dim} must be divisible by heads")
        if self.depth_bins < 1 or self.depth_max <= self.depth_min:
            raise ValueError("bad depth bin configuration")

    def volume_dims(self, spec: GridSpec):
        """(compact, mid, full) spatial dims for this grid."""
        h, w, z = spec.dims
        if h % 4 or w % 4:
            raise ValueError(f"grid h/w must be divisible by 4, got {spec.dims}")
        if z % (self.z_up_mid * self.z_up_full):
            raise ValueError(f"grid z {z} not divisible by the z upsampling chain")
        zc = z // (self.z_up_mid * self.z_up_full)
        compact = (h // 4, w // 4, zc)
        mid = (h // 2, w // 2, zc * self.z_up_mid)
        return compact, mid, (h, w, z)
