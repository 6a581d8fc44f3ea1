"""Rigid 6-DoF poses and the slice-plane to volume mapping.

Conventions used throughout the package:

* Euler angles are in degrees and compose as ``Rz(rz) @ Ry(ry) @ Rx(rx)``.
* The rotation pivot is the physical center of the volume grid, so the
  all-zero pose puts the slice through the middle of the volume.
* Grid shapes and spacings are stored in array order (``(D, H, W)`` for a
  volume, ``(H, W)`` for a frame).  Physical points are ``(x, y, z)`` with
  x along W (columns), y along H (rows) and z along D.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

DEG = math.pi / 180.0

# |ry| closer than this to 90 degrees is treated as gimbal lock
GIMBAL_TOL_DEG = 1e-7


class GimbalLockWarning(RuntimeWarning):
    pass


def wrap_degrees(a: float) -> float:
    """Map an angle to the canonical interval (-180, 180]."""
    a = float(a)
    if -180.0 < a <= 180.0:
        return a
    return a - 360.0 * math.ceil((a - 180.0) / 360.0)


@dataclass(frozen=True)
class Pose:
    """Translation in mm and Euler rotation in degrees (moving -> fixed)."""

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0

    def __post_init__(self):
        vals = (self.tx, self.ty, self.tz, self.rx, self.ry, self.rz)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError(f"pose fields must be finite, got {vals}")
        for name in ("tx", "ty", "tz"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("rx", "ry", "rz"):
            object.__setattr__(self, name, wrap_degrees(getattr(self, name)))

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = [float(x) for x in v]
        if len(v) != 6:
            raise ValueError(f"pose vector needs 6 entries, got {len(v)}")
        return cls(*v)

    def as_vector(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz, self.rx, self.ry, self.rz])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    @property
    def rotation(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz])


@dataclass(frozen=True)
class GridSpec:
    shape: tuple[int, ...]
    spacing: tuple[float, ...]
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        spacing = tuple(float(s) for s in self.spacing)
        if len(shape) not in (2, 3) or len(spacing) != len(shape):
            raise ValueError(f"bad grid: shape={shape} spacing={spacing}")
        if any(n < 1 for n in shape):
            raise ValueError(f"grid counts must be >= 1, got {shape}")
        if any(not (s > 0 and math.isfinite(s)) for s in spacing):
            raise ValueError(f"grid spacings must be > 0, got {spacing}")
        center = tuple(float(c) for c in self.center)
        if len(center) != 3:
            raise ValueError("grid center must be a 3-vector")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "center", center)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def spacing_xyz(self) -> np.ndarray:
        """Spacing reordered to physical (x, y[, z]) axis order."""
        return np.array(self.spacing[::-1])

    @property
    def half_xyz(self) -> np.ndarray:
        """(count - 1) / 2 per physical axis."""
        return (np.array(self.shape[::-1], dtype=float) - 1.0) / 2.0


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(r.T @ r, np.eye(3), rtol=0, atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not 1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_euler(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rz(rz) @ Ry(ry) @ Rx(rx), angles in degrees."""
    if not all(math.isfinite(float(a)) for a in (rx, ry, rz)):
        raise ValueError(f"non-finite Euler angles: {(rx, ry, rz)}")
    return _rz(rz * DEG) @ _ry(ry * DEG) @ _rx(rx * DEG)


def rotation_derivatives(rx: float, ry: float, rz: float) -> np.ndarray:
    """d R / d(rx, ry, rz) in per-degree units, shape (3, 3, 3)."""
    a, b, c = rx * DEG, ry * DEG, rz * DEG
    Rx, Ry, Rz = _rx(a), _ry(b), _rz(c)
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    cc, sc = math.cos(c), math.sin(c)
    dRx = np.array([[0.0, 0.0, 0.0], [0.0, -sa, -ca], [0.0, ca, -sa]])
    dRy = np.array([[-sb, 0.0, cb], [0.0, 0.0, 0.0], [-cb, 0.0, -sb]])
    dRz = np.array([[-sc, -cc, 0.0], [cc, -sc, 0.0], [0.0, 0.0, 0.0]])
    return np.stack([Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx]) * DEG


def euler_from_rotation(r: np.ndarray) -> tuple[float, float, float, bool]:
    """Invert the Rz·Ry·Rx convention.  Returns (rx, ry, rz, degenerate)."""
    r = np.asarray(r, dtype=float)
    cy = math.hypot(r[2, 1], r[2, 2])
    ry = math.atan2(-r[2, 0], cy)
    if abs(abs(ry) - math.pi / 2) <= GIMBAL_TOL_DEG * DEG:
        # only rx - sign(ry)*rz is observable; pin rz to zero
        rx = math.atan2(-r[1, 2], r[1, 1])
        return rx / DEG, ry / DEG, 0.0, True
    rx = math.atan2(r[2, 1], r[2, 2])
    rz = math.atan2(r[1, 0], r[0, 0])
    return rx / DEG, ry / DEG, rz / DEG, False


def pose_to_transform(pose: Pose, volume: GridSpec) -> RigidTransform:
    rot = rotation_from_euler(pose.rx, pose.ry, pose.rz)
    return RigidTransform(rot, pose.translation + np.array(volume.center))


def transform_to_pose(t: RigidTransform, volume: GridSpec) -> Pose:
    rx, ry, rz, degenerate = euler_from_rotation(t.rotation)
    if degenerate:
        warnings.warn("gimbal lock: rz set to 0", GimbalLockWarning, stacklevel=2)
    tx, ty, tz = t.translation - np.array(volume.center)
    return Pose(tx, ty, tz, rx, ry, rz)


def plane_offsets(slice_spec: GridSpec, rows, cols) -> tuple[np.ndarray, np.ndarray]:
    """In-plane physical offsets (mm) of pixel (row, col) from the slice center."""
    if slice_spec.ndim != 2:
        raise ValueError("slice grid must be 2D")
    h, w = slice_spec.shape
    sv, su = slice_spec.spacing
    px = (np.asarray(cols, dtype=float) - (w - 1) / 2.0) * su
    py = (np.asarray(rows, dtype=float) - (h - 1) / 2.0) * sv
    return px, py


def _map_plane(pose: Pose, volume: GridSpec, px, py) -> np.ndarray:
    tr = pose_to_transform(pose, volume)
    r, t = tr.rotation, tr.translation
    px = np.asarray(px)[..., None]
    py = np.asarray(py)[..., None]
    return px * r[:, 0] + py * r[:, 1] + t


def slice_points(pose: Pose, slice_spec: GridSpec, volume: GridSpec) -> np.ndarray:
    """Physical volume coordinates of every slice pixel, shape (H, W, 3)."""
    h, w = slice_spec.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    px, py = plane_offsets(slice_spec, rows, cols)
    return _map_plane(pose, volume, px, py)


def five_point_set(pose: Pose, slice_spec: GridSpec, volume: GridSpec) -> np.ndarray:
    """The four corners and the center of the slice, shape (5, 3).

    Order: (0, 0), (0, W-1), (H-1, 0), (H-1, W-1), center, as (row, col).
    """
    h, w = slice_spec.shape
    rows = np.array([0, 0, h - 1, h - 1, (h - 1) / 2.0])
    cols = np.array([0, w - 1, 0, w - 1, (w - 1) / 2.0])
    px, py = plane_offsets(slice_spec, rows, cols)
    return _map_plane(pose, volume, px, py)
