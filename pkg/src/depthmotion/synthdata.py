"""Analytic renderer for textured planar scenes with exact depth, poses and masks.

A scene is a fronto-parallel wall (``plane``) or a ground plane meeting a wall
(``ground_wall``), plus upright textured rectangles that translate linearly.
World axes match the first camera: +x right, +y down, +z forward. Camera
``k`` has pose ``T_wc(k) = pose(camera_start) @ pose(camera_step)^k``.

Textures are 4 octaves of value noise on a hashed lattice. Wall and ground
share one solid texture; each object carries its own in local coordinates,
so every texture moves rigidly with its surface.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Intrinsics, invert, matrix_to_pose, pose_to_matrix
from .motion import InstanceMaskSet, SequenceSample

BACKGROUNDS = ("plane", "ground_wall")
GROUND_V = 12.0


class SpecError(ValueError):
    pass


@dataclass
class ObjectSpec:
    object_id: int
    category: int
    width: float
    height: float
    center: tuple  # world position of the rectangle centre at frame 0
    velocity: tuple = (0.0, 0.0, 0.0)  # world translation per frame
    texture_seed: int = 0
    texture_scale: float = 3.0

    def center_at(self, frame: int) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + frame * np.asarray(self.velocity, dtype=np.float64)


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    fx: float = 48.0
    background: str = "ground_wall"
    bg_depth: float = 8.0
    ground_height: float = 1.5
    camera_start: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    camera_step: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    objects: list = field(default_factory=list)
    texture_seed: int = 0
    texture_scale: float = 12.0
    num_frames: int = 3

    def __post_init__(self):
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        self.camera_start = tuple(float(v) for v in self.camera_start)
        self.camera_step = tuple(float(v) for v in self.camera_step)
        if self.background not in BACKGROUNDS:
            raise SpecError(f"unknown background {self.background!r}")
        if self.bg_depth <= 0 or self.texture_scale <= 0:
            raise SpecError("bg_depth and texture_scale must be positive")
        if self.width < 2 or self.height < 2 or self.num_frames < 1:
            raise SpecError("degenerate image size or frame count")
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids) or any(i <= 0 or i > 255 for i in ids):
            raise SpecError("object ids must be unique and in 1..255")
        for o in self.objects:
            if o.width <= 0 or o.height <= 0:
                raise SpecError(f"object {o.object_id} has non-positive size")
            for f in range(self.num_frames):
                if o.center_at(f)[2] >= self.bg_depth:
                    raise SpecError(f"object {o.object_id} is not in front of the wall")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics.centered(self.width, self.height, self.fx)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects"] = [asdict(o) for o in self.objects]
        for o in d["objects"]:
            o["center"] = list(o["center"])
            o["velocity"] = list(o["velocity"])
        d["camera_start"] = list(self.camera_start)
        d["camera_step"] = list(self.camera_step)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["objects"] = [ObjectSpec(**{**o, "center": tuple(o["center"]), "velocity": tuple(o["velocity"])})
                        for o in d.get("objects", [])]
        return cls(**d)


# -- texture ----------------------------------------------------------------

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)
_M4 = np.uint64(0xD6E8FEB86659FD93)


def _lattice(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, seed: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = ((ix.astype(np.int64).astype(np.uint64) * _M1)
             ^ (iy.astype(np.int64).astype(np.uint64) * _M3)
             ^ (iz.astype(np.int64).astype(np.uint64) * _M4))
        h ^= np.uint64(seed & 0xFFFFFFFF) * _M2
        h ^= h >> np.uint64(30)
        h *= _M2
        h ^= h >> np.uint64(27)
        h *= _M3
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _fade(f: np.ndarray) -> np.ndarray:
    return f * f * f * (f * (f * 6 - 15) + 10)


def value_noise(u: np.ndarray, v: np.ndarray, w: np.ndarray, seed: int) -> np.ndarray:
    """3-D lattice value noise with quintic fade; C2-smooth, values in [0, 1]."""
    iu, iv, iw = np.floor(u), np.floor(v), np.floor(w)
    su, sv, sw = _fade(u - iu), _fade(v - iv), _fade(w - iw)
    out = np.zeros_like(u)
    for du in (0, 1):
        wu = su if du else 1 - su
        for dv in (0, 1):
            wv = sv if dv else 1 - sv
            for dw in (0, 1):
                ww = sw if dw else 1 - sw
                out += wu * wv * ww * _lattice(iu + du, iv + dv, iw + dw, seed)
    return out


def texture(u: np.ndarray, v: np.ndarray, w: np.ndarray, seed: int, scale: float) -> np.ndarray:
    """Solid RGB texture from 4 octaves of value noise; coarsest lattice spacing is ``scale``."""
    chans = []
    for ch in range(3):
        acc = np.zeros_like(u)
        norm = 0.0
        for octave in range(4):
            period = scale / 2 ** octave
            amp = 0.5 ** octave
            acc += amp * value_noise(u / period, v / period, w / period, seed * 131 + ch * 17 + octave)
            norm += amp
        chans.append(acc / norm)
    img = np.stack(chans, axis=-1)
    # stretch contrast about mid-grey; octave averaging compresses the range
    return np.clip(0.5 + 1.6 * (img - 0.5), 0.0, 1.0)


# -- geometry ---------------------------------------------------------------

def camera_pose(spec: SceneSpec, frame: int) -> np.ndarray:
    """Camera-to-world transform of frame ``frame``."""
    m = pose_to_matrix(np.asarray(spec.camera_start))
    step = pose_to_matrix(np.asarray(spec.camera_step))
    for _ in range(frame):
        m = m @ step
    return m


def ego_motion(spec: SceneSpec, source: int, target: int) -> np.ndarray:
    """Pose mapping target-camera points into the source camera."""
    return matrix_to_pose(invert(camera_pose(spec, source)) @ camera_pose(spec, target))


def object_motion(spec: SceneSpec, object_id: int, source: int, target: int) -> np.ndarray:
    """Pose applied to target-camera points of an object before the ego transform.

    For a translating object this is a pure translation by the object's world
    displacement expressed in the target camera frame.
    """
    obj = {o.object_id: o for o in spec.objects}[object_id]
    delta = obj.center_at(source) - obj.center_at(target)
    r_t = camera_pose(spec, target)[:3, :3]
    return np.concatenate([r_t.T @ delta, np.zeros(3)])


def render(spec: SceneSpec, frame: int) -> tuple[np.ndarray, np.ndarray, dict[int, np.ndarray]]:
    """Image (H x W x 3), z-depth (H x W) and object masks for one frame."""
    k = spec.intrinsics
    rx, ry = k.rays()
    t_wc = camera_pose(spec, frame)
    r, o = t_wc[:3, :3], t_wc[:3, 3]
    dirs = np.stack([rx, ry, np.ones_like(rx)], axis=-1) @ r.T
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    shape = rx.shape
    best = np.full(shape, np.inf)
    label = np.full(shape, -1, dtype=np.int64)  # -1 none, 0 wall, 1 ground, else 100 + object id

    def consider(lam, ok, tag):
        ok = ok & (lam > 1e-9) & (lam < best)
        best[ok] = lam[ok]
        label[ok] = tag

    with np.errstate(divide="ignore", invalid="ignore"):
        consider((spec.bg_depth - o[2]) / dz, dz > 0, 0)
        if spec.background == "ground_wall":
            lam = (spec.ground_height - o[1]) / dy
            consider(lam, dy > 0, 1)
        for obj in spec.objects:
            c = obj.center_at(frame)
            lam = (c[2] - o[2]) / dz
            px, py = o[0] + lam * dx, o[1] + lam * dy
            ok = (dz > 0) & (np.abs(px - c[0]) <= obj.width / 2) & (np.abs(py - c[1]) <= obj.height / 2)
            consider(lam, ok, 100 + obj.object_id)
    if np.any(label < 0) or not np.all(np.isfinite(best)):
        raise SpecError(f"frame {frame}: some rays hit no surface")

    px = o[0] + best * dx
    py = o[1] + best * dy
    pz = o[2] + best * dz
    img = np.zeros(shape + (3,))
    # wall and ground share one solid texture, so it is continuous across their crease;
    # depth enters as GROUND_V / z so the ground's image-space frequency stays bounded
    sel = label <= 1
    img[sel] = texture(px[sel], py[sel], GROUND_V / pz[sel], spec.texture_seed, spec.texture_scale)
    masks = {}
    for obj in spec.objects:
        sel = label == 100 + obj.object_id
        c = obj.center_at(frame)
        img[sel] = texture(px[sel] - c[0], py[sel] - c[1], np.zeros(int(sel.sum())), obj.texture_seed + 104729,
                           obj.texture_scale)
        masks[obj.object_id] = sel
    return img, best, masks


def render_sample(spec: SceneSpec, name: str = "seq_0", start: int = 0) -> tuple[SequenceSample, list[np.ndarray]]:
    """Frames ``start .. start+2`` as a training sample, with their ground-truth depths."""
    frames, depths, masks = [], [], []
    for f in range(start, start + 3):
        img, depth, m = render(spec, f)
        frames.append(img)
        depths.append(depth)
        masks.append(m)
    cats = {o.object_id: o.category for o in spec.objects}
    sample = SequenceSample(name, tuple(frames), InstanceMaskSet(tuple(masks), cats), spec.intrinsics)
    return sample, depths


def ground_truth_motion(spec: SceneSpec, start: int = 0) -> dict:
    """Ego and object motions for the window starting at ``start``, keyed like the model."""
    mid = start + 1
    ego = {"prev": ego_motion(spec, start, mid), "next": ego_motion(spec, start + 2, mid)}
    objs = {w: {o.object_id: object_motion(spec, o.object_id, src, mid) for o in spec.objects}
            for w, src in (("prev", start), ("next", start + 2))}
    return {"ego": ego, "objects": objs}


STANDARD_STEP = (0.1, 0.0, 0.05, 0.0, 0.02, 0.0)


def static_scene(**overrides) -> SceneSpec:
    """Ground and a near wall, no objects, camera moving right and forward with a small yaw.

    The wall sits close (depth 3) so that the camera translation produces
    parallax well above the flow caused by the yaw.
    """
    params = dict(width=64, height=64, fx=48.0, background="ground_wall", bg_depth=3.0, ground_height=1.0,
                  camera_step=STANDARD_STEP, texture_seed=0, texture_scale=12.0)
    params.update(overrides)
    return SceneSpec(**params)


def lateral_object_scene(**overrides) -> SceneSpec:
    """Standard camera motion plus one box-sized object sliding left along the ground."""
    speed = overrides.pop("object_speed", -0.2)
    params = dict(width=64, height=64, fx=48.0, background="ground_wall", bg_depth=4.0, ground_height=1.0,
                  camera_step=STANDARD_STEP, texture_seed=0, texture_scale=12.0)
    params.update(overrides)
    gh = params["ground_height"]
    box = ObjectSpec(object_id=1, category=1, width=1.6, height=1.2, center=(0.3, gh - 0.6, 2.5),
                     velocity=(speed, 0.0, 0.0), texture_seed=11)
    params.setdefault("objects", [box])
    return SceneSpec(**params)


def degenerate_follow_scene(**overrides) -> SceneSpec:
    """Camera driving forward behind an object moving at exactly the camera's speed.

    The object keeps a fixed position relative to the camera, so its image
    footprint is identical in every frame while the background shows flow.
    """
    forward = overrides.pop("forward_speed", 0.3)
    obj_depth = overrides.pop("object_depth", 4.0)
    params = dict(width=64, height=64, fx=48.0, background="ground_wall", bg_depth=14.0,
                  ground_height=1.5, camera_step=(0.0, 0.0, forward, 0.0, 0.0, 0.0),
                  texture_seed=3, texture_scale=12.0)
    params.update(overrides)
    gh = params["ground_height"]
    car = ObjectSpec(object_id=1, category=1, width=1.6, height=1.5,
                     center=(0.6, gh - 0.75, obj_depth), velocity=(0.0, 0.0, forward), texture_seed=11)
    params.setdefault("objects", [car])
    return SceneSpec(**params)


def random_scene(rng: np.random.Generator, width: int = 64, height: int = 64, n_objects: int = 0,
                 background: str | None = None, depth_range: tuple = (6.0, 12.0),
                 texture_scale: float = 12.0, translation: float = 0.1, rotation: float = 0.01,
                 object_speed: float = 0.15) -> SceneSpec:
    """A random static-or-dynamic scene with small inter-frame camera motion."""
    bg = background or ("plane" if rng.random() < 0.5 else "ground_wall")
    bg_depth = float(rng.uniform(*depth_range))
    step = np.concatenate([rng.uniform(-translation, translation, 3), rng.uniform(-rotation, rotation, 3)])
    gh = float(rng.uniform(1.2, 2.0))
    fx = 0.75 * width
    objects = []
    slots = np.linspace(-1, 1, n_objects + 2)[1:-1] if n_objects else []
    for i, slot in enumerate(slots):
        z = float(rng.uniform(0.35, 0.6) * bg_depth)
        h = float(rng.uniform(1.0, 1.8))
        half_w = min(0.9, z * (width / 2) / fx / (n_objects + 1) * 0.8)
        cx = float(slot * z * (width / 2) / fx * 0.6)
        cy = gh - h / 2 if bg == "ground_wall" else float(rng.uniform(-0.5, 0.5))
        vel = (float(rng.uniform(-object_speed, object_speed)), 0.0, 0.0)
        objects.append(ObjectSpec(i + 1, int(rng.integers(1, 3)), 2 * half_w, h, (cx, cy, z), vel,
                                  int(rng.integers(0, 10_000))))
    return SceneSpec(width=width, height=height, fx=fx, background=bg, bg_depth=bg_depth, ground_height=gh,
                     camera_step=tuple(step), objects=objects, texture_seed=int(rng.integers(0, 10_000)),
                     texture_scale=texture_scale)
