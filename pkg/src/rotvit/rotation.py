"""Feature-level rotation of the patch-token grid.

The N patch tokens are laid out row-major on an X x Y grid ("each patch
as a pixel") and rotated about the geometric grid center by inverse
mapping with nearest-neighbor rounding; target cells whose source falls
outside the grid receive the zero vector.  The class token never enters
the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, concat, gather_rows


def grid_dims(h: int, w: int, patch: int, stride: int):
    """Patch-grid extents: X = floor((H-P)/S)+1, Y = floor((W-P)/S)+1."""
    if h < patch or w < patch or stride < 1:
        raise ConfigError(
            f"invalid patch geometry: image {h}x{w}, patch {patch}, "
            f"stride {stride}")
    x = (h - patch) // stride + 1
    y = (w - patch) // stride + 1
    return x, y


@dataclass
class AngleSet:
    angles: list
    alpha: float

    def __post_init__(self):
        for a in self.angles:
            if abs(a) > self.alpha + 1e-9:
                raise ConfigError(
                    f"angle {a} outside [-{self.alpha}, {self.alpha}]")


def sample_angles(n: int, alpha: float, rng: np.random.Generator) -> AngleSet:
    """n independent uniform draws from [-alpha, alpha]."""
    if n < 0:
        raise ConfigError("n must be >= 0")
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    return AngleSet(list(rng.uniform(-alpha, alpha, size=n)), alpha)


def reshape_grid(f_p: Tensor, x: int, y: int) -> Tensor:
    """Row-major N x D -> X x Y x D (leading batch dims preserved)."""
    n = f_p.shape[-2]
    if n != x * y:
        raise ShapeError(f"cannot reshape {n} patch rows to {x}x{y} grid")
    return f_p.reshape(f_p.shape[:-2] + (x, y, f_p.shape[-1]))


def flatten_grid(g: Tensor) -> Tensor:
    x, y, d = g.shape[-3:]
    return g.reshape(g.shape[:-3] + (x * y, d))


def rotation_index_map(x: int, y: int, theta_deg: float) -> np.ndarray:
    """Flat source index (or -1 for out-of-grid) per target cell.

    Inverse mapping: the target cell, expressed relative to the grid
    center, is rotated by -theta and rounded to the nearest source cell.
    """
    t = math.radians(theta_deg)
    ct, st = math.cos(t), math.sin(t)
    cx, cy = (x - 1) / 2.0, (y - 1) / 2.0
    idx = np.empty(x * y, dtype=np.int64)
    for tx in range(x):
        for ty in range(y):
            dx, dy = tx - cx, ty - cy
            sx = dx * ct + dy * st
            sy = -dx * st + dy * ct
            rx = int(round(sx + cx))
            ry = int(round(sy + cy))
            if 0 <= rx < x and 0 <= ry < y:
                idx[tx * y + ty] = rx * y + ry
            else:
                idx[tx * y + ty] = -1
    return idx


def rotate_grid(grid: Tensor, theta_deg: float) -> Tensor:
    """Rotate an (..., X, Y, D) feature grid by theta degrees."""
    x, y, d = grid.shape[-3:]
    idx = rotation_index_map(x, y, theta_deg)
    flat = grid.reshape(grid.shape[:-3] + (x * y, d))
    out = gather_rows(flat, idx)
    return out.reshape(grid.shape)


def make_rotated_set(tokens: Tensor, x: int, y: int, angles: AngleSet):
    """Rotated copies of the patch rows, each with the class token re-attached.

    tokens is (..., N+1, D); returns a list of n tensors of the same shape,
    one per angle, sharing the original class token (row 0).
    """
    cls = tokens[..., 0:1, :]
    patches = tokens[..., 1:, :]
    flat = patches
    members = []
    for theta in angles.angles:
        idx = rotation_index_map(x, y, theta)
        rotated = gather_rows(flat, idx)
        members.append(concat([cls, rotated], axis=tokens.ndim - 2))
    return members


def average_rotated(c_r) -> Tensor:
    """Arithmetic mean of the rotated-branch class tokens."""
    c_r = list(c_r)
    if not c_r:
        raise ConfigError("average_rotated needs at least one token")
    acc = c_r[0]
    for t in c_r[1:]:
        if t.shape != c_r[0].shape:
            raise ShapeError("rotated tokens must share a shape")
        acc = acc + t
    return acc * (1.0 / len(c_r))
