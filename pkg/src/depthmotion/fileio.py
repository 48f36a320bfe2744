"""On-disk formats: PFM depth, PNG images and masks, and the synthetic dataset layout.

Dataset layout::

    <root>/seq_<n>/frame_<k>.png     8-bit RGB
    <root>/seq_<n>/depth_<k>.pfm     little-endian single-channel float
    <root>/seq_<n>/mask_<k>.png      8-bit, pixel value = object id, 0 = background
    <root>/seq_<n>/categories.txt    one "<object id> <category id>" per line
    <root>/seq_<n>/meta.json         intrinsics, camera poses, scene spec
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

from .geometry import Intrinsics, matrix_to_pose
from .motion import InstanceMaskSet, SequenceSample
from .synthdata import SceneSpec, camera_pose, render


class DataError(RuntimeError):
    """Missing or malformed input data."""


# -- PFM --------------------------------------------------------------------

def write_pfm(path: str | Path, depth: np.ndarray) -> None:
    """Single-channel PFM, little-endian (negative scale), rows stored bottom-up."""
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise ValueError(f"PFM depth must be 2-D, got shape {depth.shape}")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(depth[::-1]).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing PFM file {path}")
    blob = path.read_bytes()
    m = re.match(rb"(Pf|PF)\s+(\d+)\s+(\d+)\s+(\S+)\s", blob)
    if m is None:
        raise DataError(f"{path}: not a PFM file")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    chans = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * chans
    if len(blob) - m.end() < 4 * count:
        raise DataError(f"{path}: truncated data")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=m.end())
    arr = data.reshape(h, w, chans)[::-1].astype(np.float64)
    return arr[..., 0] if chans == 1 else arr


# -- PNG --------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: str | Path, img: np.ndarray) -> None:
    """Float image in [0, 1] (H x W or H x W x 3) or uint8, written as 8-bit PNG."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path: str | Path) -> np.ndarray:
    """8-bit PNG as float64 in [0, 1] (H x W x 3 for colour, H x W for grey)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing PNG file {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    return arr.astype(np.float64) / 255.0


# -- masks ------------------------------------------------------------------

def write_mask(path: str | Path, masks: Mapping[int, np.ndarray], shape: tuple[int, int]) -> None:
    label = np.zeros(shape, dtype=np.uint8)
    for oid in sorted(masks):
        if not 0 < oid < 256:
            raise ValueError(f"object id {oid} does not fit an 8-bit mask")
        label[np.asarray(masks[oid], dtype=bool)] = oid
    Image.fromarray(label).save(path, format="PNG")


def read_mask(path: str | Path) -> dict[int, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing mask file {path}")
    with Image.open(path) as im:
        label = np.asarray(im)
    if label.ndim != 2:
        raise DataError(f"{path}: mask must be single-channel")
    return {int(i): label == i for i in np.unique(label) if i != 0}


def write_categories(path: str | Path, categories: Mapping[int, int]) -> None:
    Path(path).write_text("".join(f"{oid} {categories[oid]}\n" for oid in sorted(categories)))


def read_categories(path: str | Path) -> dict[int, int]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing category sidecar {path}")
    cats = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{n}: expected '<object id> <category id>'")
        cats[int(parts[0])] = int(parts[1])
    return cats


# -- dataset ----------------------------------------------------------------

def write_sequence(root: str | Path, index: int, spec: SceneSpec) -> Path:
    """Render every frame of ``spec`` into ``root/seq_<index>``."""
    seq = Path(root) / f"seq_{index}"
    seq.mkdir(parents=True, exist_ok=True)
    k = spec.intrinsics
    for f in range(spec.num_frames):
        img, depth, masks = render(spec, f)
        write_png(seq / f"frame_{f}.png", img)
        write_pfm(seq / f"depth_{f}.pfm", depth)
        write_mask(seq / f"mask_{f}.png", masks, k.shape)
    write_categories(seq / "categories.txt", {o.object_id: o.category for o in spec.objects})
    meta = {
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height},
        "num_frames": spec.num_frames,
        "camera_poses": [matrix_to_pose(camera_pose(spec, f)).tolist() for f in range(spec.num_frames)],
        "scene": spec.to_dict(),
    }
    (seq / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return seq


def sequence_dirs(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    dirs = [p for p in root.iterdir() if p.is_dir() and re.fullmatch(r"seq_\d+", p.name)]
    if not dirs:
        raise DataError(f"no seq_<n> directories under {root}")
    return sorted(dirs, key=lambda p: int(p.name[4:]))


def read_meta(seq: str | Path) -> dict:
    path = Path(seq) / "meta.json"
    if not path.is_file():
        raise DataError(f"missing {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc


def meta_intrinsics(meta: dict) -> Intrinsics:
    try:
        return Intrinsics(**meta["intrinsics"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad intrinsics in meta.json: {exc}") from exc


def load_windows(seq: str | Path) -> tuple[list[SequenceSample], list[np.ndarray]]:
    """All 3-frame windows of a sequence directory, with their middle-frame ground-truth depth.

    Window ``s`` covers frames ``s, s+1, s+2`` and is named ``seq_<n>/w<s>``.
    """
    seq = Path(seq)
    meta = read_meta(seq)
    k = meta_intrinsics(meta)
    n = int(meta.get("num_frames", 0))
    if n < 3:
        raise DataError(f"{seq}: need at least 3 frames, found {n}")
    cats = read_categories(seq / "categories.txt")
    frames = [read_png(seq / f"frame_{f}.png") for f in range(n)]
    depths = [read_pfm(seq / f"depth_{f}.pfm") for f in range(n)]
    masks = [read_mask(seq / f"mask_{f}.png") for f in range(n)]
    for f, img in enumerate(frames):
        if img.shape[:2] != k.shape:
            raise DataError(f"{seq}/frame_{f}.png has shape {img.shape[:2]}, intrinsics say {k.shape}")
    samples, gts = [], []
    for s in range(n - 2):
        win_masks = tuple(masks[s:s + 3])
        used = {oid for m in win_masks for oid in m}
        missing = used - set(cats)
        if missing:
            raise DataError(f"{seq}: no category for object ids {sorted(missing)}")
        ms = InstanceMaskSet(win_masks, {oid: cats[oid] for oid in sorted(used)})
        samples.append(SequenceSample(f"{seq.name}/w{s}", tuple(frames[s:s + 3]), ms, k))
        gts.append(depths[s + 1])
    return samples, gts
