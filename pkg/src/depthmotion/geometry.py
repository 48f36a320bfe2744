"""Pinhole camera, SE3 poses and pixel <-> point conversions.

Conventions used throughout the package:

* pixel centres sit at integer coordinates, ``x`` in ``0..W-1`` (columns) and
  ``y`` in ``0..H-1`` (rows), with no half-pixel offset;
* camera frame is right-handed with +x right, +y down and +z forward;
* a pose is the 6-vector ``(tx, ty, tz, rx, ry, rz)`` with rotation
  ``Rz(rz) @ Ry(ry) @ Rx(rx)`` followed by translation.

Functions that take depths or poses work on plain arrays and on tape
variables alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffengine as de

NEAR_EPS = 1e-6


class InvalidParameterError(ValueError):
    pass


class InvalidMatrixError(ValueError):
    pass


class InvalidDepthError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidParameterError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @classmethod
    def centered(cls, width: int, height: int, fx: float, fy: float | None = None) -> "Intrinsics":
        return cls(fx, fx if fy is None else fy, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def halved(self) -> "Intrinsics":
        """Intrinsics of the 2x2-averaged image.

        A coarse pixel centre ``i`` lies at fine coordinate ``2 i + 0.5``, so the
        principal point maps as ``c' = (c + 0.5) / 2 - 0.5``.
        """
        if self.width % 2 or self.height % 2:
            raise InvalidParameterError("image size must be even to halve")
        return Intrinsics(self.fx / 2, self.fy / 2, (self.cx + 0.5) / 2 - 0.5,
                          (self.cy + 0.5) / 2 - 0.5, self.width // 2, self.height // 2)

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in ("fx", "fy", "cx", "cy", "width", "height"))

    @classmethod
    def from_text(cls, text: str) -> "Intrinsics":
        vals = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise InvalidParameterError(f"malformed intrinsics line: {line!r}")
            vals[key.strip()] = raw.strip()
        expected = {"fx", "fy", "cx", "cy", "width", "height"}
        if set(vals) != expected:
            raise InvalidParameterError(f"intrinsics keys {sorted(vals)} != {sorted(expected)}")
        return cls(float(vals["fx"]), float(vals["fy"]), float(vals["cx"]), float(vals["cy"]),
                   int(vals["width"]), int(vals["height"]))

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        return xs.astype(np.float64), ys.astype(np.float64)

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel ``K^-1 [x, y, 1]`` x and y components (z is 1)."""
        xs, ys = self.pixel_grid()
        return (xs - self.cx) / self.fx, (ys - self.cy) / self.fy


def check_pose(p) -> np.ndarray:
    arr = np.asarray(de.value(p), dtype=np.float64)
    if arr.shape != (6,):
        raise InvalidParameterError(f"pose must have 6 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"non-finite pose {arr}")
    return arr


def rotation_entries(rx, ry, rz):
    """Entries of ``Rz @ Ry @ Rx`` as a nested 3x3 list (arrays or tape scalars)."""
    sx, cx = de.sin(rx), de.cos(rx)
    sy, cy = de.sin(ry), de.cos(ry)
    sz, cz = de.sin(rz), de.cos(rz)
    return [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-1.0 * sy, cy * sx, cy * cx],
    ]


def pose_to_matrix(p):
    """4x4 homogeneous transform for a pose vector (ndarray or tape variable)."""
    check_pose(p)
    comps = [p[i] for i in range(6)]
    tx, ty, tz, rx, ry, rz = comps
    r = rotation_entries(rx, ry, rz)
    rows = [de.stack([r[i][0], r[i][1], r[i][2], t]) for i, t in enumerate((tx, ty, tz))]
    rows.append(np.array([0.0, 0.0, 0.0, 1.0]))
    return de.stack(rows)


def matrix_to_pose(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`pose_to_matrix` for rotations with ``|ry| < pi/2``."""
    m = np.asarray(m, dtype=np.float64)
    ry = -math.asin(max(-1.0, min(1.0, m[2, 0])))
    rx = math.atan2(m[2, 1], m[2, 2])
    rz = math.atan2(m[1, 0], m[0, 0])
    return np.array([m[0, 3], m[1, 3], m[2, 3], rx, ry, rz])


def check_se3(m, tol: float = 1e-9) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4) or not np.all(np.isfinite(m)):
        raise InvalidMatrixError("expected a finite 4x4 matrix")
    r = m[:3, :3]
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
        raise InvalidMatrixError("rotation block is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise InvalidMatrixError("rotation block has determinant != 1")
    if np.any(m[3] != np.array([0.0, 0.0, 0.0, 1.0])):
        raise InvalidMatrixError("bottom row must be (0, 0, 0, 1)")
    return m


def invert(m) -> np.ndarray:
    m = check_se3(m)
    r, t = m[:3, :3], m[:3, 3]
    out = np.eye(4)
    out[:3, :3] = r.T
    out[:3, 3] = -r.T @ t
    return out


def backproject_xyz(depth, k: Intrinsics):
    """Camera-frame ``(X, Y, Z)`` grids for a depth map (arrays or tape variables)."""
    d = de.value(depth)
    if d.shape != k.shape:
        raise de.ContractError(f"depth shape {d.shape} does not match intrinsics {k.shape}")
    if not np.all(d > 0):
        raise InvalidDepthError("depth must be strictly positive")
    rx, ry = k.rays()
    return depth * rx, depth * ry, depth


def backproject(depth, k: Intrinsics) -> np.ndarray:
    """H x W x 3 point grid ``d(x, y) * K^-1 [x, y, 1]``."""
    x, y, z = backproject_xyz(np.asarray(depth, dtype=np.float64), k)
    return np.stack([x, y, z], axis=-1)


def transform_xyz(m, x, y, z):
    """Apply a 4x4 transform (array or tape variable) to point grids."""
    shape = de.value(x).shape
    pts = de.stack([de.reshape(x, (-1,)), de.reshape(y, (-1,)), de.reshape(z, (-1,))])
    rot = de.getitem(m, (slice(0, 3), slice(0, 3))) if isinstance(m, de.Var) else np.asarray(m)[:3, :3]
    trans = de.getitem(m, (slice(0, 3), slice(3, 4))) if isinstance(m, de.Var) else np.asarray(m)[:3, 3:4]
    out = de.matmul(rot, pts) + trans
    return tuple(de.reshape(de.getitem(out, i), shape) for i in range(3))


def project_xyz(x, y, z, k: Intrinsics):
    """Pixel coordinates of point grids; third output flags points in front of the camera.

    Points with ``z <= NEAR_EPS`` are flagged invalid and get a finite dummy
    coordinate so downstream arithmetic stays defined.
    """
    zv = de.value(z)
    front = zv > NEAR_EPS
    zs = de.where(front, z, 1.0)
    u = k.fx * (x / zs) + k.cx
    v = k.fy * (y / zs) + k.cy
    return u, v, front


def project(points, k: Intrinsics):
    """Project an H x W x 3 point grid.

    Returns ``(coords, depth, valid)`` where ``coords`` is H x W x 2 holding
    ``(x, y)`` pixel positions, ``depth`` holds z and ``valid`` flags points in
    front of the near plane.
    """
    pts = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(pts[..., 2])):
        raise InvalidParameterError("point depths must be finite")
    u, v, front = project_xyz(pts[..., 0], pts[..., 1], pts[..., 2], k)
    return np.stack([u, v], axis=-1), pts[..., 2].copy(), front
