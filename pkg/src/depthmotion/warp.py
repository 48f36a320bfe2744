"""Differentiable inverse warping of a source frame into the target view."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .geometry import Intrinsics, backproject_xyz, pose_to_matrix, project_xyz, transform_xyz


@dataclass
class WarpResult:
    """Reconstructed frame plus a boolean validity mask and sampling coordinates.

    Pixels with ``validity == False`` still hold a clamped sample; losses must
    ignore them.
    """

    image: object
    validity: np.ndarray
    coords: tuple


def as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise de.ContractError(f"image must be H x W x C with C in (1, 3), got {arr.shape}")
    return arr


def bilinear_sample(img, x: float, y: float) -> tuple[np.ndarray, bool]:
    """Sample ``img`` at a single sub-pixel location with clamp-to-edge.

    ``in_bounds`` reports whether ``(x, y)`` lies inside ``[0, W-1] x [0, H-1]``.
    """
    arr = as_image(img)
    h, w = arr.shape[:2]
    val = de.sample_bilinear(arr, np.array(x, dtype=np.float64), np.array(y, dtype=np.float64))
    inside = bool(0.0 <= x <= w - 1 and 0.0 <= y <= h - 1)
    return val, inside


def motion_matrix(motion):
    val = de.value(motion)
    if val.shape == (6,):
        return pose_to_matrix(motion)
    if val.shape == (4, 4):
        return motion
    raise de.ContractError(f"motion must be a 6-vector or 4x4 matrix, got {val.shape}")


def inverse_warp(src, target_depth, motion, k: Intrinsics) -> WarpResult:
    """Sample ``src`` where each target pixel lands after moving by ``motion``.

    ``motion`` maps target-camera points into the source camera. Accepts a
    pose vector or a 4x4 matrix, as arrays or tape variables; ``src`` may also
    be a tape variable.
    """
    if not isinstance(src, de.Var):
        src = as_image(src)
    sv = de.value(src)
    if sv.shape[:2] != k.shape or de.value(target_depth).shape != k.shape:
        raise de.ContractError(
            f"shape mismatch: src {sv.shape[:2]}, depth {de.value(target_depth).shape}, intrinsics {k.shape}")
    x, y, z = backproject_xyz(target_depth, k)
    x2, y2, z2 = transform_xyz(motion_matrix(motion), x, y, z)
    u, v, front = project_xyz(x2, y2, z2, k)
    uv, vv = de.value(u), de.value(v)
    inside = (uv >= 0.0) & (uv <= k.width - 1) & (vv >= 0.0) & (vv <= k.height - 1)
    image = de.sample_bilinear(src, u, v)
    return WarpResult(image=image, validity=front & inside, coords=(u, v))
