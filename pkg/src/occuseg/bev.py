"""Bird's-eye-view image export: portable graymaps/pixmaps, no UI."""
from __future__ import annotations

import numpy as np

from .voxel import BinaryGrid, SemanticGrid

# free is black; semantic classes get fixed colors, extended procedurally
_BASE_PALETTE = [
    (0, 0, 0),        # free
    (110, 110, 110),  # ground
    (70, 120, 200),   # building
    (235, 140, 50),   # vehicle
    (220, 60, 60),    # pedestrian
]


def class_palette(num_classes: int) -> np.ndarray:
    colors = list(_BASE_PALETTE)
    rng = np.random.default_rng(5)
    while len(colors) < num_classes + 1:
        colors.append(tuple(int(c) for c in rng.integers(40, 255, 3)))
    return np.array(colors[:num_classes + 1], dtype=np.uint8)


def bev_cells(grid, z_slice: int | None = None) -> np.ndarray:
    """(H, W) cell values: one z layer, or the max over z."""
    data = grid.bits.astype(np.uint8) if isinstance(grid, BinaryGrid) else grid.labels
    if z_slice is None:
        return data.max(axis=2)
    if not 0 <= z_slice < grid.spec.dims[2]:
        raise ValueError(f"z slice {z_slice} outside grid z range")
    return data[:, :, z_slice]


def export_bev(grid, path, z_slice: int | None = None) -> None:
    """Write a PGM (binary grid) or palette PPM (semantic grid) image.

    Pixel (row h, column w) shows the max-over-z value of column (h, w),
    or the chosen z slice.
    """
    cells = bev_cells(grid, z_slice)
    h, w = cells.shape
    with open(path, "wb") as f:
        if isinstance(grid, BinaryGrid):
            f.write(f"P5\n{w} {h}\n255\n".encode())
            f.write((cells * 255).astype(np.uint8).tobytes())
        else:
            palette = class_palette(grid.num_classes)
            f.write(f"P6\n{w} {h}\n255\n".encode())
            f.write(palette[cells].tobytes())
