"""Shared builders for tests: a small kink-free scene for finite-difference checks.

Central differences are only trustworthy where every non-smooth operation
(bilinear cell boundaries, ``abs``, ``minimum``, validity) is at least a few
step sizes away from its switching point. The scene below is built so that:

* all warp sample coordinates sit >= 0.01 px from the pixel grid at every scale
  (near-uniform fractional flow: fronto-parallel ramp depth, tiny rotation);
* per-channel photometric errors and the prev/next error gap stay away from 0;
* disparity differences between neighbours never vanish (a 2-D ramp);
* the size-constraint target depth stays far from the object's depth.

``margins`` measures these distances so a test can assert them.
"""

from __future__ import annotations

import numpy as np

from depthmotion import diffengine as de
from depthmotion.geometry import Intrinsics
from depthmotion.motion import InstanceMaskSet, SequenceSample, composite_frames
from depthmotion.warp import inverse_warp, motion_matrix
from depthmotion.predictors import DirectModel, middle_frame_id, obj_key, pair_id, prior_key

SIZE = 16
FX = 12.0
BASE_DEPTH = 4.0


def smooth_field(shape, seed: int, amp: float = 0.08) -> np.ndarray:
    """Low-frequency RGB pattern from a few random sinusoids."""
    rng = np.random.default_rng(seed)
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w, 3))
    for c in range(3):
        for _ in range(3):
            fx, fy = rng.uniform(0.15, 0.45, 2)
            ph = rng.uniform(0, 2 * np.pi)
            out[..., c] += amp * np.sin(fx * x + fy * y + ph) / 3
    return out


def ramp_log_depth(shape=(SIZE, SIZE)) -> np.ndarray:
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.log(BASE_DEPTH) + 0.004 * x + 0.0023 * y


def object_mask(shape=(SIZE, SIZE)) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[4:10, 6:12] = True
    return m


EGO = {"prev": np.array([0.2, 0.22, 0.0, 0.001, -0.0012, 0.0008]),
       "next": np.array([-0.17, -0.19, 0.0, -0.0009, 0.001, -0.0006])}
OBJ = {"prev": np.array([0.1, -0.09, 0.0, 0.0005, 0.0004, -0.0007]),
       "next": np.array([-0.08, 0.1, 0.0, -0.0006, 0.0005, 0.0004])}


def kinkfree_sample() -> SequenceSample:
    shape = (SIZE, SIZE)
    k = Intrinsics.centered(SIZE, SIZE, FX)
    target = 0.45 + smooth_field(shape, 1)
    left = np.zeros(shape + (1,))
    left[:, :8] = 1.0
    # prev sits well above the target, next below it, with the gap sign flipping between halves
    prev = target + 0.1 + 0.25 * left + smooth_field(shape, 2, 0.02)
    nxt = target - 0.2 + smooth_field(shape, 3, 0.02)
    m = object_mask()
    masks = InstanceMaskSet(({1: m}, {1: m}, {1: m}), {1: 1})
    return SequenceSample("gc", (prev, target, nxt), masks, k)


def kinkfree_model(sample: SequenceSample, prior: float = 0.9) -> DirectModel:
    model = DirectModel(sample.k.shape)
    model.register_sample(sample, depth_init=ramp_log_depth(sample.k.shape), ego_init=EGO)
    for w in ("prev", "next"):
        model.params[obj_key(pair_id(sample, w), 1)] = OBJ[w]
    model.set_prior(1, prior)
    return model


def param_groups(sample: SequenceSample) -> dict[str, list[str]]:
    return {
        "depth": [f"depth/{middle_frame_id(sample)}"],
        "ego": [f"ego/{pair_id(sample, w)}" for w in ("prev", "next")],
        "object": [obj_key(pair_id(sample, w), 1) for w in ("prev", "next")],
        "prior": [prior_key(1)],
    }


def margins(sample: SequenceSample, model: DirectModel, scale_count: int = 4) -> dict[str, float]:
    """Smallest distances to each switching point over all scales."""
    depth = np.exp(model.params[f"depth/{middle_frame_id(sample)}"])
    coord, err, gap, disp = np.inf, np.inf, np.inf, np.inf
    d = depth
    for s, level in enumerate(sample.pyramid(scale_count)):
        if s:
            d = de.downsample2(d)
        errs = {}
        for w, src in (("prev", 0), ("next", 2)):
            objm = {1: model.params[obj_key(pair_id(sample, w), 1)]}
            mid = level.masks.middle()
            cw = composite_frames(level.source(w), d, model.params[f"ego/{pair_id(sample, w)}"],
                                  objm if mid else {}, mid, level.k, source_masks=level.masks.frames[src])
            egom = model.params[f"ego/{pair_id(sample, w)}"]
            for mot in (egom, motion_matrix(egom) @ motion_matrix(objm[1])):
                u, v = inverse_warp(level.source(w), d, mot, level.k).coords
                for c in (u, v):
                    coord = min(coord, float(np.abs(c - np.round(c)).min()))
            diff = np.abs(cw.image - level.target)
            if cw.validity.any():
                err = min(err, float(diff[cw.validity].min()))
            errs[w] = (diff.mean(axis=2), cw.validity)
        both = errs["prev"][1] & errs["next"][1]
        if both.any():
            gap = min(gap, float(np.abs(errs["prev"][0] - errs["next"][0])[both].min()))
        inv = 1.0 / d
        disp = min(disp, float(np.abs(np.diff(inv, axis=0)).min()), float(np.abs(np.diff(inv, axis=1)).min()))
    return {"coord": coord, "photometric": err, "min_gap": gap, "disparity": disp}



def gradient_plan(sample: SequenceSample, model: DirectModel):
    """Scalar functions of the parameters for each loss, with the parameter groups each one depends on.

    The individual terms are evaluated at full resolution exactly as the
    training objective assembles them; ``total`` is the multi-scale sum.
    """
    from depthmotion.losses import (LossWeights, reconstruction_loss, size_constraint_loss, smoothness_loss,
                                    ssim_loss, total_loss, window_validity)
    from depthmotion.warp import WarpResult

    fid = middle_frame_id(sample)

    def warps(v):
        d = model.depth.predict_depth(fid, v)
        out = {}
        for w, src in (("prev", 0), ("next", 2)):
            out[w] = composite_frames(sample.source(w), d, v[f"ego/{pair_id(sample, w)}"],
                                      {1: v[obj_key(pair_id(sample, w), 1)]}, sample.masks.middle(), sample.k,
                                      source_masks=sample.masks.frames[src])
        return out

    def rec(v):
        o = warps(v)
        return reconstruction_loss(WarpResult(o["prev"].image, o["prev"].validity, ()),
                                   WarpResult(o["next"].image, o["next"].validity, ()), sample.target)

    def ssim(v):
        o = warps(v)
        return sum(ssim_loss(o[w].image, sample.target, window_validity(o[w].validity)) for w in ("prev", "next"))

    def smooth(v):
        return smoothness_loss(model.depth.predict_depth(fid, v), sample.target)

    def size(v):
        return size_constraint_loss(model.depth.predict_depth(fid, v), sample.masks, {1: v[prior_key(1)]}, sample.k)

    def total(v):
        return total_loss(sample, model, LossWeights(), values=v).total

    return {
        "reconstruction": (rec, ("depth", "ego", "object")),
        "ssim": (ssim, ("depth", "ego", "object")),
        "smoothness": (smooth, ("depth",)),
        "size": (size, ("depth", "prior")),
        "total": (total, ("depth", "ego", "object", "prior")),
    }
