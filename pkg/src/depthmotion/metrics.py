"""Depth error statistics and scale-aligned trajectory error."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import invert, pose_to_matrix


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class DepthEvalConfig:
    cap: float = 80.0
    min_depth: float = 1e-3
    scaling: str = "median"  # "none" | "median"

    def __post_init__(self):
        if not self.cap > self.min_depth > 0:
            raise EvaluationError("need cap > min_depth > 0")
        if self.scaling not in ("none", "median"):
            raise EvaluationError(f"unknown scaling mode {self.scaling!r}")


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float

    def as_dict(self) -> dict:
        return asdict(self)


def depth_metrics(pred, gt, valid=None, cfg: DepthEvalConfig = DepthEvalConfig()) -> DepthMetrics:
    """Seven-column depth statistics over valid pixels with ground truth in ``(min_depth, cap]``.

    Predictions are optionally median-scaled, then clamped to ``[min_depth, cap]``.
    Threshold accuracies use a strict ``<``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvaluationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    sel = (gt > cfg.min_depth) & (gt <= cfg.cap)
    if valid is not None:
        sel &= np.asarray(valid, dtype=bool)
    if not sel.any():
        raise EvaluationError("no valid ground-truth pixels")
    p, g = pred[sel], gt[sel]
    if cfg.scaling == "median":
        p = p * (np.median(g) / np.median(p))
    p = np.clip(p, cfg.min_depth, cfg.cap)

    thresh = np.maximum(g / p, p / g)
    diff = p - g
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        a1=float(np.mean(thresh < 1.25)),
        a2=float(np.mean(thresh < 1.25 ** 2)),
        a3=float(np.mean(thresh < 1.25 ** 3)),
    )


def _snippet_translations(poses) -> np.ndarray:
    mats = [pose_to_matrix(np.asarray(p, dtype=np.float64)) for p in poses]
    base = invert(mats[0])
    return np.array([(base @ m)[:3, 3] for m in mats])


def ate(pred_poses, gt_poses, snippet_len: int = 5) -> tuple[float, float]:
    """Mean and standard deviation of snippet ATE over all length-``snippet_len`` windows.

    Poses are camera-to-world 6-vectors. Each snippet is re-expressed relative
    to its first pose, the predicted translations get the least-squares scale
    onto ground truth, and the snippet error is the RMSE of the residuals.
    """
    if len(pred_poses) != len(gt_poses):
        raise EvaluationError("trajectories differ in length")
    if snippet_len < 2 or len(gt_poses) < snippet_len:
        raise EvaluationError(f"need at least {snippet_len} poses and snippet_len >= 2")
    errs = []
    for start in range(len(gt_poses) - snippet_len + 1):
        pt = _snippet_translations(pred_poses[start:start + snippet_len])
        gtt = _snippet_translations(gt_poses[start:start + snippet_len])
        denom = float(np.sum(pt * pt))
        scale = float(np.sum(gtt * pt)) / denom if denom > 0 else 0.0
        resid = scale * pt - gtt
        errs.append(float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1)))))
    errs = np.array(errs)
    return float(errs.mean()), float(errs.std())
