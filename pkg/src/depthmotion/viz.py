"""Fixed-colormap renderings of depth and depth error.

The colormap is a 256-entry RGB table obtained by piecewise-linear
interpolation between nine anchors placed at indices 0, 32, ..., 224, 255::

    (0, 0, 4) (31, 12, 72) (85, 15, 109) (136, 34, 106) (186, 54, 85)
    (227, 89, 51) (249, 140, 10) (249, 201, 50) (252, 255, 164)

and rounding to the nearest integer. It is computed once at import and never
depends on the data, so rendered PNGs are stable goldens.
"""

from __future__ import annotations

import numpy as np

_ANCHORS = np.array([
    (0, 0, 4), (31, 12, 72), (85, 15, 109), (136, 34, 106), (186, 54, 85),
    (227, 89, 51), (249, 140, 10), (249, 201, 50), (252, 255, 164),
], dtype=np.float64)
_POSITIONS = np.array([0, 32, 64, 96, 128, 160, 192, 224, 255], dtype=np.float64)


def _build_table() -> np.ndarray:
    idx = np.arange(256, dtype=np.float64)
    table = np.stack([np.interp(idx, _POSITIONS, _ANCHORS[:, c]) for c in range(3)], axis=1)
    return np.round(table).astype(np.uint8)


COLORMAP = _build_table()
COLORMAP.setflags(write=False)


def colorize(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] (clipped) to H x W x 3 uint8 through :data:`COLORMAP`."""
    v = np.clip(np.nan_to_num(np.asarray(values, dtype=np.float64), nan=0.0), 0.0, 1.0)
    return COLORMAP[np.round(v * 255.0).astype(np.int64)]


def depth_heatmap(depth: np.ndarray, near: float = 1.0, far: float = 20.0) -> np.ndarray:
    """Inverse depth normalised between ``1/far`` and ``1/near``; near is bright."""
    depth = np.asarray(depth, dtype=np.float64)
    inv = 1.0 / np.maximum(depth, 1e-12)
    return colorize((inv - 1.0 / far) / (1.0 / near - 1.0 / far))


def error_heatmap(pred: np.ndarray, gt: np.ndarray, max_error: float = 0.5) -> np.ndarray:
    """Per-pixel absolute relative error ``|p - g| / g`` on a ``[0, max_error]`` scale."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    err = np.where(gt > 0, np.abs(pred - gt) / np.where(gt > 0, gt, 1.0), 0.0)
    return colorize(err / max_error)
