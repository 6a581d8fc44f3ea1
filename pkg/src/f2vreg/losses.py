"""Training losses.  All take and return :class:`~f2vreg.tensor.Tensor`."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .geometry import GridSpec, Pose
from .resample import Frame, Volume, extract_slice, extract_slice_jacobian, slice_indices
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    trans: float = 1.0
    rot: float = 1.0
    prompt: float = 0.1
    reg: float = 0.1
    sim: float = 0.5

    def __post_init__(self):
        if any(w < 0 for w in self.as_tuple()):
            raise ValueError(f"loss weights must be non-negative: {self}")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.trans, self.rot, self.prompt, self.reg, self.sim)


def _as_input(x) -> Tensor:
    if isinstance(x, (Frame, Volume)):
        x = x.data
    return T.as_tensor(x)


def smooth_l1(pred, true, beta: float = 1.0) -> Tensor:
    """Mean over components of the Huber-style smooth L1 penalty.

    Built from relu only: with a = |x| and m = min(a, beta) the penalty is
    0.5 m^2 / beta + (a - m).
    """
    pred, true = _as_input(pred), _as_input(true)
    if pred.shape != true.shape:
        raise T.ShapeError(f"smooth_l1 length mismatch: {pred.shape} vs {true.shape}")
    x = pred - true
    a = T.relu(x) + T.relu(-x)
    m = T.scale(T.relu(T.scale(a, -1.0) + beta), -1.0) + beta
    per = T.scale(m * m, 0.5 / beta) + (a - m)
    return T.mean(per)


def prompt_loss(e_pred, e_true) -> Tensor:
    """Mean squared error between predicted and true epicardium probabilities."""
    e_pred, e_true = _as_input(e_pred), _as_input(e_true)
    if e_pred.shape != e_true.shape:
        raise T.ShapeError(f"prompt shape mismatch: {e_pred.shape} vs {e_true.shape}")
    d = e_pred - e_true
    return T.mean(d * d)


def reg_loss(d_pred, d_true) -> Tensor:
    """Inter-frame distance regularizer (smooth L1 on the 3 distances)."""
    d_pred, d_true = _as_input(d_pred), _as_input(d_true)
    if d_pred.shape != (3,) or d_true.shape != (3,):
        raise T.ShapeError("inter-frame distances must be 3-vectors")
    return smooth_l1(d_pred, d_true)


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Area-average a (H, W) map by an integer factor."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask {mask.shape} not divisible by {factor}")
    return mask.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


# ---------------------------------------------------------------- MS-SSIM


@lru_cache(maxsize=None)
def gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


MIN_SIDE = 8


def _window_size(side: int, win: int) -> int:
    k = min(win, side)
    return k if k % 2 else k - 1


def _ssim_tensor(x: Tensor, y: Tensor, win: int, sigma: float, c1: float, c2: float) -> Tensor:
    k = _window_size(min(x.shape[1:]), win)
    w = Tensor(gaussian_window(k, sigma)[None, None])
    mx, my = T.conv2d(x, w), T.conv2d(y, w)
    sxx = T.conv2d(x * x, w) - mx * mx
    syy = T.conv2d(y * y, w) - my * my
    sxy = T.conv2d(x * y, w) - mx * my
    num = (T.scale(mx * my, 2.0) + c1) * (T.scale(sxy, 2.0) + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return T.mean(num / den)


def _avg_pool2(x: Tensor) -> Tensor:
    w = Tensor(np.full((1, 1, 2, 2), 0.25))
    return T.conv2d(x, w, stride=2)


def msssim(a, b, scales: int = 3, weights=None, win: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> Tensor:
    """Multi-scale SSIM as a weighted mean of per-scale SSIM values.

    Each scale halves the image by 2x2 averaging.  The Gaussian window is
    truncated to the largest odd size that fits the coarsest image; images
    whose coarsest scale is smaller than 8 pixels are rejected.
    """
    x, y = _as_input(a), _as_input(b)
    if x.shape != y.shape or x.ndim != 2:
        raise T.ShapeError(f"msssim needs equal 2D images, got {x.shape} and {y.shape}")
    if scales < 1:
        raise ValueError("scales must be >= 1")
    coarse = min(x.shape) >> (scales - 1)
    if coarse < MIN_SIDE or any(n % (1 << (scales - 1)) for n in x.shape):
        raise ValueError(f"image {x.shape} too small or not divisible for {scales} scales")
    weights = np.full(scales, 1.0 / scales) if weights is None else np.asarray(weights, dtype=float)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    x = T.reshape(x, (1,) + x.shape)
    y = T.reshape(y, (1,) + y.shape)
    total = None
    for s in range(scales):
        if s:
            x, y = _avg_pool2(x), _avg_pool2(y)
        term = T.scale(_ssim_tensor(x, y, win, sigma, c1, c2), weights[s])
        total = term if total is None else total + term
    return T.scale(total, 1.0 / float(weights.sum()))


def ssim(a, b, **kw) -> Tensor:
    return msssim(a, b, scales=1, **kw)


# ---------------------------------------------------------------- pose-differentiable resampling


def resample_slice(vol: Volume, pose: Tensor, slice_spec: GridSpec) -> Tensor:
    """Slice of ``vol`` at the pose held in a 6-element tensor (mm, degrees).

    The backward pass contracts the incoming image gradient with the
    analytic slice Jacobian.
    """
    if pose.shape != (6,):
        raise T.ShapeError(f"pose tensor must have shape (6,), got {pose.shape}")
    p = Pose.from_vector(pose.data.astype(np.float64))
    frame = extract_slice(vol, p, slice_spec)
    # trilinear weights are piecewise linear: the voxel cell is the branch
    T.note_branch(np.floor(slice_indices(vol.spec, p, slice_spec)))

    def bw(g):
        jac = extract_slice_jacobian(vol, p, slice_spec)
        return (np.tensordot(g.astype(np.float64), jac, axes=([0, 1], [0, 1])),)

    return T.custom_op(frame.data, (pose,), bw, "resample_slice")


def total_loss(out, sample, weights: LossWeights = LossWeights(), return_terms: bool = False):
    """Weighted hybrid loss for one sample.

    ``out`` is a :class:`f2vreg.network.NetOutput`; the similarity term
    compares the anchor frame with the slice of ``sample.volume`` at the
    predicted pose.
    """
    t_true = sample.pose_gt.translation
    r_true = sample.pose_gt.rotation
    l_trans = smooth_l1(out.trans, t_true)
    l_rot = smooth_l1(out.rot, r_true)
    factor = sample.mask.data.shape[0] // out.prompt.shape[1]
    e_true = downsample_mask(np.asarray(sample.mask.data, dtype=np.float64), factor)
    l_prompt = prompt_loss(out.prompt[0], e_true)
    l_reg = reg_loss(out.dist, sample.dist_gt)
    terms = [l_trans, l_rot, l_prompt, l_reg]
    if weights.sim > 0:
        pose = T.concat([out.trans, out.rot])
        resampled = resample_slice(sample.volume, pose, sample.anchor.spec)
        terms.append(1.0 - msssim(resampled, sample.anchor.data))
    else:
        terms.append(Tensor(0.0))
    loss = None
    for w, term in zip(weights.as_tuple(), terms):
        part = T.scale(term, w)
        loss = part if loss is None else loss + part
    if return_terms:
        return loss, [t.item() for t in terms]
    return loss
