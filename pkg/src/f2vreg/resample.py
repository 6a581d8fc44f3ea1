"""Trilinear resampling of volumes and its derivatives.

Points outside the closed voxel cube ``[0, n-1]`` on any axis sample to 0
with zero gradient.  Blending is done in float64; results are stored in the
dtype of the source volume.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GridSpec, Pose, rotation_derivatives, rotation_from_euler


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spec: GridSpec

    def __post_init__(self):
        data = np.asarray(self.data)
        if self.spec.ndim != 3 or data.shape != self.spec.shape:
            raise ValueError(f"volume data {data.shape} does not match grid {self.spec.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True, eq=False)
class Frame:
    data: np.ndarray
    spec: GridSpec

    def __post_init__(self):
        data = np.asarray(self.data)
        if self.spec.ndim != 2 or data.shape != self.spec.shape:
            raise ValueError(f"frame data {data.shape} does not match grid {self.spec.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("frame contains non-finite values")
        object.__setattr__(self, "data", data)


def _corner_indices(idx, n):
    i0 = np.clip(np.floor(idx), 0, max(n - 2, 0)).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, idx - i0


def sample_index(data: np.ndarray, ix, iy, iz, with_grad: bool = False):
    """Trilinear interpolation at continuous voxel coordinates.

    ``ix``, ``iy``, ``iz`` index the W, H and D axes of ``data`` respectively.
    With ``with_grad`` the derivative with respect to ``(ix, iy, iz)`` is
    returned as a trailing axis of length 3.
    """
    d, h, w = data.shape
    ix, iy, iz = (np.asarray(a, dtype=np.float64) for a in (ix, iy, iz))
    inside = (ix >= 0) & (ix <= w - 1) & (iy >= 0) & (iy <= h - 1) & (iz >= 0) & (iz <= d - 1)
    ix = np.where(inside, ix, 0.0)
    iy = np.where(inside, iy, 0.0)
    iz = np.where(inside, iz, 0.0)
    x0, x1, fx = _corner_indices(ix, w)
    y0, y1, fy = _corner_indices(iy, h)
    z0, z1, fz = _corner_indices(iz, d)

    v000 = data[z0, y0, x0].astype(np.float64)
    v001 = data[z0, y0, x1].astype(np.float64)
    v010 = data[z0, y1, x0].astype(np.float64)
    v011 = data[z0, y1, x1].astype(np.float64)
    v100 = data[z1, y0, x0].astype(np.float64)
    v101 = data[z1, y0, x1].astype(np.float64)
    v110 = data[z1, y1, x0].astype(np.float64)
    v111 = data[z1, y1, x1].astype(np.float64)

    gx_ = 1.0 - fx
    c00 = v000 * gx_ + v001 * fx
    c01 = v010 * gx_ + v011 * fx
    c10 = v100 * gx_ + v101 * fx
    c11 = v110 * gx_ + v111 * fx
    gy_ = 1.0 - fy
    c0 = c00 * gy_ + c01 * fy
    c1 = c10 * gy_ + c11 * fy
    val = c0 * (1.0 - fz) + c1 * fz
    val = np.where(inside, val, 0.0)
    if not with_grad:
        return val

    dx0 = (v001 - v000) * gy_ + (v011 - v010) * fy
    dx1 = (v101 - v100) * gy_ + (v111 - v110) * fy
    dvx = dx0 * (1.0 - fz) + dx1 * fz
    dvy = (c01 - c00) * (1.0 - fz) + (c11 - c10) * fz
    dvz = c1 - c0
    grad = np.stack([dvx, dvy, dvz], axis=-1)
    grad = np.where(inside[..., None], grad, 0.0)
    return val, grad


LATTICE_SNAP = 1e-9  # index units


def physical_to_index(spec: GridSpec, points) -> np.ndarray:
    """Continuous (ix, iy, iz) of physical points.

    The mm -> index division can land a few ulps off an integer for a point
    built as an exact lattice site; indices within ``LATTICE_SNAP`` of an
    integer are snapped so lattice sites sample their stored voxel exactly.
    """
    p = np.asarray(points, dtype=np.float64)
    idx = (p - np.array(spec.center)) / spec.spacing_xyz + spec.half_xyz
    near = np.rint(idx)
    return np.where(np.abs(idx - near) <= LATTICE_SNAP, near, idx)


def trilinear_sample(vol: Volume, point) -> tuple[np.ndarray, np.ndarray]:
    """Value and spatial gradient (per mm) at physical point(s) ``(..., 3)``."""
    p = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("sample point must be finite")
    idx = physical_to_index(vol.spec, p)
    val, g = sample_index(vol.data, idx[..., 0], idx[..., 1], idx[..., 2], with_grad=True)
    return val, g / vol.spec.spacing_xyz


def _index_affine(pose: Pose, out_spacing_xyz: np.ndarray, vol_spec: GridSpec):
    """Columns map grid-step offsets to volume index offsets; plus the offset."""
    rot = rotation_from_euler(pose.rx, pose.ry, pose.rz)
    sv = vol_spec.spacing_xyz
    k = len(out_spacing_xyz)
    m = (rot[:, :k] * out_spacing_xyz) / sv[:, None]
    off = pose.translation / sv + vol_spec.half_xyz
    return m, off


def _plane_steps(slice_spec: GridSpec):
    h, w = slice_spec.shape
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return cols - (w - 1) / 2.0, rows - (h - 1) / 2.0


def slice_indices(vol_spec: GridSpec, pose: Pose, slice_spec: GridSpec) -> np.ndarray:
    """Continuous volume indices (ix, iy, iz) of each slice pixel, (H, W, 3)."""
    if slice_spec.ndim != 2:
        raise ValueError("slice grid must be 2D")
    m, off = _index_affine(pose, slice_spec.spacing_xyz, vol_spec)
    au, av = _plane_steps(slice_spec)
    return np.stack([m[i, 0] * au + m[i, 1] * av + off[i] for i in range(3)], axis=-1)


def extract_slice(vol: Volume, pose: Pose, slice_spec: GridSpec) -> Frame:
    idx = slice_indices(vol.spec, pose, slice_spec)
    val = sample_index(vol.data, idx[..., 0], idx[..., 1], idx[..., 2])
    return Frame(val.astype(vol.data.dtype, copy=False), slice_spec)


def extract_slice_jacobian(vol: Volume, pose: Pose, slice_spec: GridSpec) -> np.ndarray:
    """d(slice intensity)/d(tx, ty, tz, rx, ry, rz), shape (H, W, 6).

    Translation columns are per mm, rotation columns per degree.
    """
    idx = slice_indices(vol.spec, pose, slice_spec)
    _, g_idx = sample_index(vol.data, idx[..., 0], idx[..., 1], idx[..., 2], with_grad=True)
    g_world = g_idx / vol.spec.spacing_xyz  # d value / d world point (mm)
    su, sv = slice_spec.spacing_xyz
    au, av = _plane_steps(slice_spec)
    px, py = au * su, av * sv
    d_rot = rotation_derivatives(pose.rx, pose.ry, pose.rz)
    jac = np.empty(idx.shape[:2] + (6,))
    jac[..., :3] = g_world
    for a in range(3):
        dp = px[..., None] * d_rot[a][:, 0] + py[..., None] * d_rot[a][:, 1]
        jac[..., 3 + a] = np.sum(g_world * dp, axis=-1)
    return jac


def extract_subvolume(vol: Volume, pose: Pose, out: GridSpec) -> Volume:
    """Resample ``vol`` on the grid ``out`` placed by ``pose`` about the volume center."""
    if out.ndim != 3:
        raise ValueError("output grid must be 3D")
    m, off = _index_affine(pose, out.spacing_xyz, vol.spec)
    d, h, w = out.shape
    zz, yy, xx = np.meshgrid(
        np.arange(d, dtype=np.float64), np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
    )
    au, av, aw = xx - (w - 1) / 2.0, yy - (h - 1) / 2.0, zz - (d - 1) / 2.0
    idx = [m[i, 0] * au + m[i, 1] * av + m[i, 2] * aw + off[i] for i in range(3)]
    val = sample_index(vol.data, *idx)
    return Volume(val.astype(vol.data.dtype, copy=False), GridSpec(out.shape, out.spacing, vol.spec.center))


__all__ = [
    "Frame",
    "Volume",
    "extract_slice",
    "extract_slice_jacobian",
    "extract_subvolume",
    "sample_index",
    "slice_indices",
    "trilinear_sample",
]
