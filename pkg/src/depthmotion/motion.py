"""Object masks, 3-frame samples and the ego + per-object warp composite."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np

from . import diffengine as de
from .geometry import Intrinsics
from .warp import WarpResult, as_image, inverse_warp, motion_matrix

PREV, NEXT = "prev", "next"
SOURCE_FRAME = {PREV: 0, NEXT: 2}
MIDDLE = 1


@dataclass(frozen=True)
class InstanceMaskSet:
    """Per-frame object masks keyed by object id, aligned across the 3 frames.

    ``frames[f]`` maps object id -> boolean H x W mask for frame ``f``;
    ``categories`` maps object id -> category id.
    """

    frames: tuple
    categories: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) != 3:
            raise de.ContractError("mask set needs exactly 3 frames")
        for f, objs in enumerate(self.frames):
            union = None
            for oid, m in objs.items():
                if oid not in self.categories:
                    raise de.ContractError(f"object {oid} has no category")
                m = np.asarray(m, dtype=bool)
                if union is None:
                    union = np.zeros_like(m)
                if np.any(union & m):
                    raise de.ContractError(f"masks overlap in frame {f}")
                union |= m
        for oid, cat in self.categories.items():
            if cat < 0:
                raise de.ContractError(f"negative category id for object {oid}")

    @classmethod
    def empty(cls) -> "InstanceMaskSet":
        return cls(({}, {}, {}), {})

    @property
    def object_ids(self) -> list[int]:
        ids = set()
        for objs in self.frames:
            ids.update(objs)
        return sorted(ids)

    def middle(self) -> dict[int, np.ndarray]:
        return {oid: np.asarray(m, dtype=bool) for oid, m in sorted(self.frames[MIDDLE].items())}

    def is_empty(self) -> bool:
        return not any(self.frames)

    def halved(self) -> "InstanceMaskSet":
        """Masks at half resolution; a coarse pixel belongs to an object if more than half its block does."""
        frames = []
        for objs in self.frames:
            out = {}
            for oid, m in objs.items():
                cov = de.downsample2(np.asarray(m, dtype=np.float64))
                out[oid] = cov > 0.5
            frames.append(out)
        return InstanceMaskSet(tuple(frames), dict(self.categories))


@dataclass(frozen=True)
class SequenceSample:
    """Three consecutive frames with masks and intrinsics. Frame 1 is the warp target."""

    name: str
    frames: tuple
    masks: InstanceMaskSet
    k: Intrinsics

    def __post_init__(self):
        frames = tuple(as_image(f) for f in self.frames)
        if len(frames) != 3:
            raise de.ContractError("a sample has exactly 3 frames")
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise de.ContractError(f"frames differ in shape: {shapes}")
        if frames[0].shape[:2] != self.k.shape:
            raise de.ContractError("frame size does not match intrinsics")
        for objs in self.masks.frames:
            for m in objs.values():
                if np.shape(m) != self.k.shape:
                    raise de.ContractError("mask size does not match intrinsics")
        object.__setattr__(self, "frames", frames)

    @property
    def target(self) -> np.ndarray:
        return self.frames[MIDDLE]

    def source(self, which: str) -> np.ndarray:
        return self.frames[SOURCE_FRAME[which]]

    def halved(self) -> "SequenceSample":
        return SequenceSample(self.name, tuple(de.downsample2(f) for f in self.frames),
                              self.masks.halved(), self.k.halved())

    @cached_property
    def _pyramid(self) -> list:
        levels = [self]
        while levels[-1].k.width % 2 == 0 and levels[-1].k.height % 2 == 0 and len(levels) < 8:
            levels.append(levels[-1].halved())
        return levels

    def pyramid(self, n: int) -> list["SequenceSample"]:
        if n > len(self._pyramid):
            raise de.ContractError(f"{self.k.width}x{self.k.height} cannot be halved {n - 1} times")
        return self._pyramid[:n]


@dataclass
class CompositeWarp:
    image: object
    validity: np.ndarray
    ego: object
    object_motions: dict


def static_mask(masks: InstanceMaskSet, shape: tuple[int, int] | None = None) -> np.ndarray:
    """One boolean mask for the whole sequence: False wherever any frame has an object."""
    union = None
    for objs in masks.frames:
        for m in objs.values():
            m = np.asarray(m, dtype=bool)
            union = m.copy() if union is None else union | m
    if union is None:
        if shape is None:
            raise de.ContractError("shape is required for an empty mask set")
        return np.ones(shape, dtype=bool)
    return ~union


def masked_ego_input(sample: SequenceSample) -> tuple[np.ndarray, ...]:
    keep = static_mask(sample.masks, sample.k.shape).astype(np.float64)[..., None]
    return tuple(f * keep for f in sample.frames)


_TAP_TOL = 1e-9


def _coverage(mask: np.ndarray, coords) -> np.ndarray:
    """Bilinear weight that the samples at ``coords`` draw from inside ``mask``."""
    u, v = (de.value(c) for c in coords)
    return de.sample_bilinear(np.asarray(mask, dtype=np.float64)[..., None], u, v)[..., 0]


def composite_frames(src, depth, ego, obj_motions: Mapping[int, object],
                     object_masks: Mapping[int, np.ndarray], k: Intrinsics,
                     two_stage: bool = False,
                     source_masks: Mapping[int, np.ndarray] | None = None) -> CompositeWarp:
    """Warp ``src`` by ego-motion and paste per-object warps under their target masks.

    Object pixels use the transform ``ego @ object`` in a single resample. With
    ``two_stage`` the ego-warped image is itself warped by the object motion,
    which is the literal two-pass reading and blurs twice.

    When the source frame's masks are given, a pixel is valid only if its
    bilinear taps all come from the region it belongs to: object pixels from
    the same object in the source, background pixels from no object. This
    keeps pixels that straddle an object boundary out of the loss.
    """
    if set(obj_motions) != set(object_masks):
        raise de.ContractError(
            f"object motions {sorted(obj_motions)} do not match masks {sorted(object_masks)}")
    base = inverse_warp(src, depth, ego, k)
    if not object_masks:
        return CompositeWarp(base.image, base.validity, ego, {})
    image, validity = base.image, base.validity.copy()
    if source_masks is not None and source_masks:
        union = np.any([np.asarray(m, dtype=bool) for m in source_masks.values()], axis=0)
        validity &= _coverage(union, base.coords) < _TAP_TOL
    ego_m = motion_matrix(ego)
    for oid in sorted(object_masks):
        mask = np.asarray(object_masks[oid], dtype=bool)
        if not mask.any():
            continue
        if two_stage:
            warped = inverse_warp(base.image, depth, obj_motions[oid], k)
            ok = de.sample_bilinear(base.validity.astype(np.float64)[..., None], *map(de.value, warped.coords))
            obj_valid = warped.validity & (ok[..., 0] > 1.0 - 1e-12)
        else:
            warped = inverse_warp(src, depth, de.matmul(ego_m, motion_matrix(obj_motions[oid])), k)
            obj_valid = warped.validity
        if source_masks is not None:
            src_mask = source_masks.get(oid)
            if src_mask is None:
                obj_valid = np.zeros_like(obj_valid)
            else:
                obj_valid = obj_valid & (_coverage(src_mask, warped.coords) > 1.0 - _TAP_TOL)
        image = de.where(mask[..., None], warped.image, image)
        validity = np.where(mask, obj_valid, validity)
    return CompositeWarp(image, validity, ego, dict(obj_motions))


def composite_warp(sample: SequenceSample, depth, ego, obj_motions: Mapping[int, object],
                   source: str, two_stage: bool = False, use_source_masks: bool = False) -> CompositeWarp:
    """Composite warp of the previous or next frame onto the middle frame."""
    src_masks = sample.masks.frames[SOURCE_FRAME[source]] if use_source_masks else None
    return composite_frames(sample.source(source), depth, ego, obj_motions,
                            sample.masks.middle(), sample.k, two_stage=two_stage, source_masks=src_masks)


def as_warp_result(cw: CompositeWarp) -> WarpResult:
    return WarpResult(cw.image, cw.validity, ())
