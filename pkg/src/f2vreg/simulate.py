"""Synthetic frame-to-volume datasets.

Each original volume gets ``transforms_per_volume`` random rigid poses.  For
every pose an anchor slice, three adjacent slices (the anchor plane shifted
along its normal by ``i * delta`` mm) and the epicardium mask slice are
resampled.  The training volume is the original resampled at the identity
pose onto the sample grid.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import GridSpec, Pose, rotation_from_euler
from .io import DatasetManifest, ManifestEntry, write_container, write_manifest
from .resample import Frame, Volume, extract_slice, extract_subvolume

log = logging.getLogger(__name__)

SPACING = 0.62
VOLUME_SPEC = GridSpec((32, 128, 128), (SPACING, SPACING, SPACING))
SLICE_SPEC = GridSpec((128, 128), (SPACING, SPACING))
DELTA = 1.24  # adjacent-frame step along the slice normal, 2 voxels
TILT_RANGE = 25.0  # phantom long-axis tilt, degrees
SPIN_RANGE = 180.0  # phantom spin about its long axis, degrees


@dataclass(frozen=True)
class SimConfig:
    volume_spec: GridSpec = VOLUME_SPEC
    slice_spec: GridSpec = SLICE_SPEC
    trans_range: float = 10.0
    rot_range: float = 20.0
    delta: float = DELTA
    transforms_per_volume: int = 4
    test_fraction: float = 0.1

    def to_json(self) -> dict:
        return {
            "volume_shape": list(self.volume_spec.shape),
            "volume_spacing": list(self.volume_spec.spacing),
            "slice_shape": list(self.slice_spec.shape),
            "slice_spacing": list(self.slice_spec.spacing),
            "trans_range": self.trans_range,
            "rot_range": self.rot_range,
            "delta": self.delta,
            "transforms_per_volume": self.transforms_per_volume,
            "test_fraction": self.test_fraction,
        }


def toy_config(**kw) -> SimConfig:
    """Same physical extent as the defaults at a quarter of the resolution."""
    s = SPACING * 4
    base = dict(volume_spec=GridSpec((8, 32, 32), (s, s, s)), slice_spec=GridSpec((32, 32), (s, s)))
    base.update(kw)
    return SimConfig(**base)


@dataclass(eq=False)
class Sample:
    volume: Volume
    anchor: Frame
    adjacent: tuple[Frame, Frame, Frame]
    mask: Frame
    pose_gt: Pose
    dist_gt: np.ndarray
    adjacent_poses: tuple[Pose, ...] = field(default=())

    def frames(self) -> np.ndarray:
        """Anchor plus adjacent frames stacked as (4, H, W)."""
        return np.stack([self.anchor.data] + [f.data for f in self.adjacent])


def random_pose(rng: np.random.Generator, trans_range: float = 10.0, rot_range: float = 20.0) -> Pose:
    if not (trans_range > 0 and rot_range > 0):
        raise ValueError(f"perturbation ranges must be positive, got {trans_range}, {rot_range}")
    t = rng.uniform(-trans_range, trans_range, 3)
    r = rng.uniform(-rot_range, rot_range, 3)
    return Pose(*t, *r)


def _physical_grid(spec: GridSpec):
    d, h, w = spec.shape
    sz, sy, sx = spec.spacing
    cx, cy, cz = spec.center
    z = (np.arange(d) - (d - 1) / 2.0) * sz + cz
    y = (np.arange(h) - (h - 1) / 2.0) * sy + cy
    x = (np.arange(w) - (w - 1) / 2.0) * sx + cx
    return np.meshgrid(z, y, x, indexing="ij")


def make_phantom(rng: np.random.Generator, spec: GridSpec = VOLUME_SPEC) -> tuple[Volume, Volume]:
    """Smooth cardiac-like phantom and its epicardium mask.

    A truncated ellipsoidal bright shell (the epicardium band) surrounds a
    dark chamber, with a thinner-walled second chamber attached on one side,
    embedded in tissue with low-frequency texture.  The whole volume
    is Gaussian-smoothed so finite-difference gradient checks are stable.
    """
    if spec.ndim != 3:
        raise ValueError("phantom grid must be 3D")
    zz, yy, xx = _physical_grid(spec)
    ext = np.array(spec.shape[::-1]) * np.array(spec.spacing[::-1])  # x, y, z extent in mm
    center = np.array(spec.center) + rng.uniform(-0.08, 0.08, 3) * ext
    axes = np.array(
        [rng.uniform(0.17, 0.25) * ext[0], rng.uniform(0.20, 0.28) * ext[1], rng.uniform(25.0, 40.0)]
    )
    tilt = rotation_from_euler(*rng.uniform(-TILT_RANGE, TILT_RANGE, 2), rng.uniform(-SPIN_RANGE, SPIN_RANGE))
    p = np.stack([xx - center[0], yy - center[1], zz - center[2]], axis=-1) @ tilt
    r = np.sqrt(np.sum((p / axes) ** 2, axis=-1))
    thickness = rng.uniform(3.0, 5.0)  # mm
    inner = 1.0 - thickness / axes[:2].min()
    # truncate at the base and attach a second chamber on one side so that no
    # mirror or point symmetry makes two poses image-equivalent
    base = p[..., 2] < rng.uniform(0.45, 0.65) * axes[2]
    shell = (r <= 1.0) & (r >= inner) & base
    chamber = (r < inner) & base
    rv_axes = axes * np.array([rng.uniform(0.6, 0.8), rng.uniform(1.0, 1.2), rng.uniform(0.7, 0.9)])
    rv_center = np.array([0.85 * axes[0], 0.0, -0.15 * axes[2]])
    r_rv = np.sqrt(np.sum(((p - rv_center) / rv_axes) ** 2, axis=-1))
    rv_inner = 1.0 - 0.6 * thickness / rv_axes[:2].min()
    outside_lv = (r > 1.0) & base
    rv_wall = (r_rv <= 1.0) & (r_rv >= rv_inner) & outside_lv
    rv_chamber = (r_rv < rv_inner) & outside_lv

    sig_vox = lambda mm: tuple(mm / s for s in spec.spacing)  # noqa: E731
    texture = gaussian_filter(rng.standard_normal(spec.shape), sig_vox(3.0), mode="nearest")
    texture /= texture.std() + 1e-12
    vol = 0.35 + 0.12 * texture
    vol = np.where(shell, 0.85 + 0.05 * texture, vol)
    vol = np.where(chamber, 0.08 + 0.03 * texture, vol)
    vol = np.where(rv_wall, 0.65 + 0.05 * texture, vol)
    vol = np.where(rv_chamber, 0.18 + 0.03 * texture, vol)
    vol = gaussian_filter(vol, sig_vox(1.0), mode="nearest")
    lo, hi = vol.min(), vol.max()
    vol = (vol - lo) / (hi - lo)
    return Volume(vol, spec), Volume(shell.astype(np.float64), spec)


def generate_sample(
    vol: Volume,
    mask_vol: Volume,
    rng: np.random.Generator,
    cfg: SimConfig = SimConfig(),
    pose: Pose | None = None,
) -> Sample:
    if vol.spec != mask_vol.spec:
        raise ValueError("volume and mask grids differ")
    pose = random_pose(rng, cfg.trans_range, cfg.rot_range) if pose is None else pose
    normal = rotation_from_euler(pose.rx, pose.ry, pose.rz)[:, 2]
    anchor = extract_slice(vol, pose, cfg.slice_spec)
    mask = extract_slice(mask_vol, pose, cfg.slice_spec)
    adj_poses, adjacent = [], []
    for i in (1, 2, 3):
        t = pose.translation + i * cfg.delta * normal
        p = Pose(*t, pose.rx, pose.ry, pose.rz)
        adj_poses.append(p)
        adjacent.append(extract_slice(vol, p, cfg.slice_spec))
    dist = np.array([i * cfg.delta for i in (1, 2, 3)])
    sub = extract_subvolume(vol, Pose(), cfg.volume_spec)
    return Sample(sub, anchor, tuple(adjacent), mask, pose, dist, tuple(adj_poses))


def volume_rng(seed: int, volume_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, volume_id])


def original_volume(seed: int, volume_id: int, cfg: SimConfig) -> tuple[Volume, Volume, np.random.Generator]:
    """Phantom for one volume id, rounded to the float32 storage precision."""
    rng = volume_rng(seed, volume_id)
    vol, mask = make_phantom(rng, cfg.volume_spec)
    vol = Volume(vol.data.astype(np.float32), vol.spec)
    mask = Volume(mask.data.astype(np.float32), mask.spec)
    return vol, mask, rng


def samples_for_volume(seed: int, volume_id: int, cfg: SimConfig) -> list[Sample]:
    vol, mask, rng = original_volume(seed, volume_id, cfg)
    return [generate_sample(vol, mask, rng, cfg) for _ in range(cfg.transforms_per_volume)]


def regenerate_sample(seed: int, volume_id: int, transform_id: int, cfg: SimConfig = SimConfig()) -> Sample:
    return samples_for_volume(seed, volume_id, cfg)[transform_id]


def split_volumes(n_volumes: int, test_fraction: float, seed: int) -> list[str]:
    """Patient-level split: one tag per volume id."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test fraction must be in [0, 1), got {test_fraction}")
    n_test = int(round(n_volumes * test_fraction))
    order = np.random.default_rng([seed, 2**31 - 1]).permutation(n_volumes)
    tags = ["train"] * n_volumes
    for v in order[:n_test]:
        tags[int(v)] = "test"
    return tags


def build_dataset(n_volumes: int, out_dir, seed: int, cfg: SimConfig = SimConfig()) -> DatasetManifest:
    """Write a dataset under ``out_dir`` and return its manifest."""
    if n_volumes < 1:
        raise ValueError("n_volumes must be >= 1")
    out = Path(out_dir)
    try:
        (out / "volumes").mkdir(parents=True, exist_ok=True)
        (out / "frames").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc.strerror}") from exc
    tags = split_volumes(n_volumes, cfg.test_fraction, seed)
    entries = []
    for v in range(n_volumes):
        samples = samples_for_volume(seed, v, cfg)
        vol_rel = f"volumes/v{v:05d}.vol"
        write_container(out / vol_rel, samples[0].volume)
        for t, s in enumerate(samples):
            stem = f"frames/v{v:05d}_t{t}"
            frame_rels = [f"{stem}_f{i}.frm" for i in range(4)]
            for rel, fr in zip(frame_rels, (s.anchor,) + s.adjacent):
                write_container(out / rel, fr)
            mask_rel = f"{stem}_mask.frm"
            write_container(out / mask_rel, s.mask)
            entries.append(
                ManifestEntry(v, t, tags[v], vol_rel, frame_rels, mask_rel, s.pose_gt, tuple(s.dist_gt))
            )
        if (v + 1) % 100 == 0:
            log.info("wrote %d/%d volumes", v + 1, n_volumes)
    manifest = DatasetManifest(seed, entries, cfg.to_json(), out)
    write_manifest(out / "manifest.json", manifest)
    return manifest


def config_from_json(d: dict) -> SimConfig:
    return SimConfig(
        volume_spec=GridSpec(tuple(d["volume_shape"]), tuple(d["volume_spacing"])),
        slice_spec=GridSpec(tuple(d["slice_shape"]), tuple(d["slice_spacing"])),
        trans_range=d["trans_range"],
        rot_range=d["rot_range"],
        delta=d["delta"],
        transforms_per_volume=d["transforms_per_volume"],
        test_fraction=d["test_fraction"],
    )
