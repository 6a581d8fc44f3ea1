"""Evaluation metrics and the test-split evaluation loop."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import GridSpec, Pose, five_point_set, wrap_degrees
from .losses import msssim
from .resample import extract_slice


def ncc(a, b) -> float:
    """Pearson normalized cross-correlation.

    Constant inputs: 1.0 if both are constant and equal, else 0.0.
    """
    a = np.asarray(getattr(a, "data", a), dtype=np.float64).ravel()
    b = np.asarray(getattr(b, "data", b), dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"ncc length mismatch: {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(np.dot(da, da)), float(np.dot(db, db))
    if saa == 0.0 or sbb == 0.0:
        return 1.0 if (saa == 0.0 and sbb == 0.0 and np.array_equal(a, b)) else 0.0
    r = float(np.dot(da, db)) / np.sqrt(saa * sbb)
    return float(np.clip(r, -1.0, 1.0))


def para_ncc(params_pred, params_true) -> float:
    return ncc(np.asarray(params_pred, dtype=float), np.asarray(params_true, dtype=float))


def dist_err(pose_pred: Pose, pose_true: Pose, slice_spec: GridSpec, volume: GridSpec) -> float:
    """Mean displacement (mm) of the slice corners and center."""
    a = five_point_set(pose_pred, slice_spec, volume)
    b = five_point_set(pose_true, slice_spec, volume)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def te_re(pose_pred: Pose, pose_true: Pose) -> tuple[float, float]:
    te = float(np.sum(np.abs(pose_pred.translation - pose_true.translation)))
    re = sum(abs(wrap_degrees(p - t)) for p, t in zip(pose_pred.rotation, pose_true.rotation))
    return te, float(re)


def image_ssim(a, b) -> float:
    return msssim(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), scales=1).item()


METRIC_KEYS = ("dist_err", "img_ncc", "img_ssim", "te", "re", "para_ncc")


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    means: dict = field(default_factory=dict)
    fps: float = float("nan")
    para_ncc_per_parameter: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "means": self.means,
            "fps": self.fps,
            "para_ncc_per_parameter": self.para_ncc_per_parameter,
        }

    def to_table(self, sep: str = "\t") -> str:
        cols = ["index"] + list(METRIC_KEYS)
        lines = [sep.join(cols)]
        for r in self.rows:
            lines.append(sep.join(str(r[c]) if c == "index" else f"{r[c]:.6f}" for c in cols))
        lines.append(sep.join(["mean"] + [f"{self.means[k]:.6f}" for k in METRIC_KEYS]))
        return "\n".join(lines) + "\n"


def _as_pose(result) -> Pose:
    if isinstance(result, Pose):
        return result
    pose = getattr(result, "pose", None)
    if isinstance(pose, Pose):
        return pose
    return Pose.from_vector(result)


def evaluate(samples, register_fn: Callable) -> EvalReport:
    """Score ``register_fn(sample) -> Pose`` on every sample.

    ``samples`` is an iterable of :class:`f2vreg.simulate.Sample` (see
    :func:`f2vreg.io.load_split` for reading a manifest's test split).
    Image metrics compare the anchor frame with the slice resampled at the
    predicted pose; NCC, SSIM and Para-NCC are reported in percent.
    """
    rows, preds, trues = [], [], []
    elapsed = 0.0
    for i, s in enumerate(samples):
        t0 = time.perf_counter()
        pose = _as_pose(register_fn(s))
        elapsed += time.perf_counter() - t0
        resampled = extract_slice(s.volume, pose, s.anchor.spec)
        te, re = te_re(pose, s.pose_gt)
        rows.append(
            {
                "index": i,
                "dist_err": dist_err(pose, s.pose_gt, s.anchor.spec, s.volume.spec),
                "img_ncc": 100.0 * ncc(resampled.data, s.anchor.data),
                "img_ssim": 100.0 * image_ssim(resampled.data, s.anchor.data),
                "te": te,
                "re": re,
                "para_ncc": 100.0 * para_ncc(pose.as_vector(), s.pose_gt.as_vector()),
            }
        )
        preds.append(pose.as_vector())
        trues.append(s.pose_gt.as_vector())
    if not rows:
        raise ValueError("evaluate needs at least one sample")
    means = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_KEYS}
    preds, trues = np.array(preds), np.array(trues)
    per_param = np.mean([ncc(preds[:, j], trues[:, j]) for j in range(6)]) * 100.0
    fps = len(rows) / elapsed if elapsed > 0 else float("inf")
    return EvalReport(rows, means, fps, float(per_param))
