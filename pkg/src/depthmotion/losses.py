"""Photometric, SSIM, smoothness and object-size losses, and their multi-scale sum."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.ndimage import binary_erosion

from . import diffengine as de
from .geometry import Intrinsics
from .motion import NEXT, PREV, SOURCE_FRAME, InstanceMaskSet, SequenceSample, composite_frames
from .predictors import DirectModel, middle_frame_id, obj_key, pair_id, prior_key
from .warp import WarpResult, as_image, inverse_warp

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class ConfigError(ValueError):
    pass


class DegenerateWindowWarning(RuntimeWarning):
    pass


class EmptyMaskWarning(RuntimeWarning):
    pass


@dataclass
class LossWeights:
    w_rec: float = 0.85
    w_ssim: float = 0.15
    w_smooth: float = 0.04
    w_size: float = 0.01
    scale_count: int = 4

    def __post_init__(self):
        for name in ("w_rec", "w_ssim", "w_smooth", "w_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.scale_count < 1:
            raise ConfigError("scale_count must be >= 1")


@dataclass
class LossResult:
    total: object
    terms: dict = field(default_factory=dict)


def _pixel_l1(image, target: np.ndarray):
    return de.mean(de.abs_(image - target), axis=2)


def reconstruction_loss(warp_prev: WarpResult, warp_next: WarpResult, target) -> object:
    """Per-pixel minimum of the two L1 errors, averaged over pixels with a valid source.

    Where only one source is valid its error is used alone. Returns 0.0 and
    warns when no pixel has a valid source.
    """
    target = as_image(target)
    vp, vn = np.asarray(warp_prev.validity, bool), np.asarray(warp_next.validity, bool)
    if de.value(warp_prev.image).shape != target.shape or de.value(warp_next.image).shape != target.shape:
        raise de.ContractError("warped images and target differ in shape")
    count = int(np.count_nonzero(vp | vn))
    if count == 0:
        warnings.warn("no pixel has a valid source", DegenerateWindowWarning, stacklevel=2)
        return 0.0
    ep = _pixel_l1(warp_prev.image, target)
    en = _pixel_l1(warp_next.image, target)
    both = de.minimum(ep, en)
    per_pixel = de.where(vp & vn, both, de.where(vp, ep, de.where(vn, en, 0.0)))
    return de.sum_(per_pixel) / float(count)


def ssim_map(a, b):
    """Per-pixel SSIM from 3x3 box-filtered local statistics (reflect padded)."""
    mu_a = de.box_filter3(a)
    mu_b = de.box_filter3(b)
    sig_a = de.box_filter3(a * a) - mu_a * mu_a
    sig_b = de.box_filter3(b * b) - mu_b * mu_b
    sig_ab = de.box_filter3(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * sig_ab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (sig_a + sig_b + SSIM_C2)
    return num / den


def ssim_loss(a, b, validity) -> object:
    """Mean over valid pixels (and channels) of ``(1 - SSIM) / 2``."""
    if not isinstance(a, de.Var):
        a = as_image(a)
    if not isinstance(b, de.Var):
        b = as_image(b)
    if de.value(a).shape != de.value(b).shape:
        raise de.ContractError("SSIM inputs differ in shape")
    valid = np.asarray(validity, dtype=bool)
    count = int(np.count_nonzero(valid))
    if count == 0:
        return 0.0
    dis = (1.0 - ssim_map(a, b)) * 0.5
    per_pixel = de.mean(dis, axis=2)
    return de.sum_(de.where(valid, per_pixel, 0.0)) / float(count)


def grayscale(img) -> np.ndarray:
    return as_image(img).mean(axis=2)


def smoothness_loss(depth, img) -> object:
    """Edge-aware first-order smoothness of mean-normalised disparity.

    Averaged over the ``(H-1) x (W-1)`` pixels that have both a right and a
    lower neighbour.
    """
    gray = grayscale(img)
    if de.value(depth).shape != gray.shape:
        raise de.ContractError("depth and image differ in shape")
    disp = 1.0 / depth
    disp = disp / de.mean(disp)
    wx = np.exp(-np.abs(gray[:-1, 1:] - gray[:-1, :-1]))
    wy = np.exp(-np.abs(gray[1:, :-1] - gray[:-1, :-1]))
    anchor = de.getitem(disp, (slice(None, -1), slice(None, -1)))
    dx = de.abs_(de.getitem(disp, (slice(None, -1), slice(1, None))) - anchor)
    dy = de.abs_(de.getitem(disp, (slice(1, None), slice(None, -1))) - anchor)
    return de.mean(dx * wx + dy * wy)


def approx_depth(prior, blob_height_px: int, k: Intrinsics):
    """Depth at which an object of world height ``prior`` spans ``blob_height_px`` rows."""
    if blob_height_px < 1:
        raise ValueError(f"blob height must be >= 1 pixel, got {blob_height_px}")
    if de.value(prior) <= 0:
        raise ValueError("height prior must be positive")
    return prior * (k.fy / float(blob_height_px))


def blob_height(mask: np.ndarray) -> int:
    rows = np.flatnonzero(np.asarray(mask, bool).any(axis=1))
    return 0 if rows.size == 0 else int(rows[-1] - rows[0] + 1)


def size_constraint_loss(depth, masks: InstanceMaskSet | Mapping[int, np.ndarray],
                         priors: Mapping[int, object], k: Intrinsics,
                         categories: Mapping[int, int] | None = None) -> object:
    """Sum over middle-frame objects of mean ``|D / mean(D) - D_approx / mean(D)|`` on the mask.

    ``priors`` maps category id -> height prior (array or tape scalar).
    """
    if isinstance(masks, InstanceMaskSet):
        categories = masks.categories
        objs = masks.middle()
    else:
        objs = dict(masks)
        if categories is None:
            raise de.ContractError("categories required with a plain mask mapping")
    total = 0.0
    if not objs:
        return total
    dbar = de.mean(depth)
    for oid in sorted(objs):
        mask = np.asarray(objs[oid], dtype=bool)
        h = blob_height(mask)
        if h == 0:
            warnings.warn(f"object {oid} has an empty mask; skipped", EmptyMaskWarning, stacklevel=2)
            continue
        cat = categories[oid]
        if cat not in priors:
            raise ConfigError(f"no height prior for category {cat}")
        target = approx_depth(priors[cat], h, k)
        region = de.getitem(depth, mask)
        total = total + de.mean(de.abs_(region / dbar - target / dbar))
    return total


def window_validity(validity) -> np.ndarray:
    """Pixels whose whole 3x3 SSIM window is valid (the reflected border counts as valid)."""
    return binary_erosion(np.asarray(validity, dtype=bool), structure=np.ones((3, 3), bool), border_value=1)


def _ego_only(sample: SequenceSample, depth, ego, which: str) -> WarpResult:
    return inverse_warp(sample.source(which), depth, ego, sample.k)


def total_loss(sample: SequenceSample, model: DirectModel, weights: LossWeights,
               values: Mapping | None = None, motion_model: bool = True) -> LossResult:
    """Multi-scale training objective for one 3-frame sample.

    At each scale ``s`` the frames and the middle-frame depth are 2x2-averaged
    ``s`` times and both outer frames are warped onto the middle one. The
    size-constraint term is evaluated once, at full resolution.
    """
    fid = middle_frame_id(sample)
    depth = model.depth.predict_depth(fid, values)
    ego = {w: model.motion.predict_ego(pair_id(sample, w), values) for w in (PREV, NEXT)}
    obj_ids = list(sample.masks.middle()) if motion_model else []
    objm = {w: {oid: model.motion.predict_object_motion(pair_id(sample, w), oid, values) for oid in obj_ids}
            for w in (PREV, NEXT)}

    total = 0.0
    terms = {"rec": 0.0, "ssim": 0.0, "smooth": 0.0, "size": 0.0}
    d = depth
    for s, level in enumerate(sample.pyramid(weights.scale_count)):
        if s:
            d = de.downsample2(d)
        if weights.w_rec or weights.w_ssim:
            warps = {}
            for w in (PREV, NEXT):
                if motion_model:
                    cw = composite_frames(level.source(w), d, ego[w], objm[w], level.masks.middle(), level.k,
                                          source_masks=level.masks.frames[SOURCE_FRAME[w]])
                    warps[w] = WarpResult(cw.image, cw.validity, ())
                else:
                    warps[w] = _ego_only(level, d, ego[w], w)
            if weights.w_rec:
                rec = reconstruction_loss(warps[PREV], warps[NEXT], level.target)
                total = total + weights.w_rec * rec
                terms["rec"] += float(de.value(rec))
            if weights.w_ssim:
                ss = 0.5 * (ssim_loss(warps[PREV].image, level.target, window_validity(warps[PREV].validity))
                            + ssim_loss(warps[NEXT].image, level.target, window_validity(warps[NEXT].validity)))
                total = total + weights.w_ssim * ss
                terms["ssim"] += float(de.value(ss))
        if weights.w_smooth:
            sm = smoothness_loss(d, level.target) / float(2 ** s)
            total = total + weights.w_smooth * sm
            terms["smooth"] += float(de.value(sm))
    if weights.w_size and not sample.masks.is_empty():
        cats = {sample.masks.categories[oid] for oid in sample.masks.middle()}
        priors = {c: model.prior(c, values) for c in cats}
        sc = size_constraint_loss(depth, sample.masks, priors, sample.k)
        total = total + weights.w_size * sc
        terms["size"] = float(de.value(sc))
    if not isinstance(total, de.Var) and isinstance(depth, de.Var):
        total = de.sum_(depth) * 0.0
    terms["total"] = float(de.value(total))
    return LossResult(total, terms)
