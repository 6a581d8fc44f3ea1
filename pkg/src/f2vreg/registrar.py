"""Registration drivers: classical pattern search, network inference, training."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensor as T
from .geometry import Pose
from .losses import LossWeights, msssim, total_loss
from .metrics import ncc
from .network import NetConfig, Prediction, cureg_forward, init_params
from .resample import Frame, Volume, extract_slice

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    max_evals: int = 2000
    init_step: tuple[float, float] = (2.0, 4.0)  # mm, degrees
    min_step: tuple[float, float] = (0.05, 0.1)
    shrink: float = 0.5
    restarts: int = 0
    smoothing: tuple[float, ...] = (2.0, 0.0)  # Gaussian sigma per stage, mm
    diagonal: bool = True
    jitter: tuple[float, float] = (2.0, 4.0)
    objective: str = "ncc"
    seed: int = 0

    def __post_init__(self):
        if self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink must be in (0, 1)")
        if self.objective not in ("ncc", "msssim"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not self.smoothing or any(s < 0 for s in self.smoothing):
            raise ValueError("smoothing needs at least one non-negative sigma")


@dataclass
class RegistrationResult:
    pose: Pose
    objective: float
    trace: list[float]
    evals: int
    exhausted: bool


def _objective(name: str):
    if name == "ncc":
        return ncc
    return lambda a, b: msssim(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)).item()


class _Budget(Exception):
    pass


def _diagonal_probe(ev, x, fx, steps):
    for i in range(6):
        for j in range(i + 1, 6):
            for si in (1.0, -1.0):
                for sj in (1.0, -1.0):
                    cand = x.copy()
                    cand[i] += si * steps[i]
                    cand[j] += sj * steps[j]
                    val = ev(cand)
                    if val > fx:
                        return cand, val
    return x, fx


def _pattern_search(f, x0: np.ndarray, cfg: OptimizerConfig, budget: int):
    """Hooke-Jeeves: exploratory coordinate sweeps plus pattern moves."""
    steps = np.array([cfg.init_step[0]] * 3 + [cfg.init_step[1]] * 3, dtype=float)
    floor = np.array([cfg.min_step[0]] * 3 + [cfg.min_step[1]] * 3, dtype=float)
    trace: list[float] = []
    best_seen = [-np.inf]

    def ev(x):
        if len(trace) >= budget:
            raise _Budget
        v = f(x)
        best_seen[0] = max(best_seen[0], v)
        trace.append(best_seen[0])
        return v

    def explore(x, fx):
        x = x.copy()
        for i in range(6):
            for sign in (1.0, -1.0):
                cand = x.copy()
                cand[i] += sign * steps[i]
                val = ev(cand)
                if val > fx:
                    x, fx = cand, val
                    break
        return x, fx

    x = x0.copy()
    try:
        fx = ev(x)
        while True:
            xn, fn = explore(x, fx)
            if fn > fx:
                # keep extrapolating along the successful direction
                while True:
                    xp, fp = explore(xn + (xn - x), ev(xn + (xn - x)))
                    x, fx = xn, fn
                    if fp > fn:
                        xn, fn = xp, fp
                    else:
                        break
                continue
            if cfg.diagonal:
                # a failed coordinate sweep may sit on a ridge between two axes
                xd, fd = _diagonal_probe(ev, x, fx, steps)
                if fd > fx:
                    x, fx = xd, fd
                    continue
            if np.all(steps <= floor):
                return x, fx, trace, len(trace), False
            steps = np.maximum(steps * cfg.shrink, floor)
    except _Budget:
        return x, fx, trace, len(trace), True


def classical_register(vol: Volume, frame: Frame, init: Pose = Pose(), cfg: OptimizerConfig = OptimizerConfig()):
    """Maximize image similarity over the 6 pose parameters by pattern search.

    The search runs coarse-to-fine over ``cfg.smoothing`` (Gaussian sigma in
    mm applied to both the resampled slice and the frame).  Every start, the
    init plus ``cfg.restarts`` seeded jitters of it, runs the coarse stages;
    the best coarse result (ties to the lowest start index) is refined at
    the last smoothing level.  Refinement begins from whichever of that
    result and ``init`` scores higher there, so the returned objective is
    never below the init's.  The trace is the running best of the final
    stage's objective.
    """
    sim = _objective(cfg.objective)
    spec = frame.spec
    px = np.asarray(spec.spacing, dtype=float)

    def make_f(sigma_mm):
        if sigma_mm <= 0:
            target = frame.data
            return lambda x: sim(extract_slice(vol, Pose.from_vector(x), spec).data, target)
        sig = tuple(sigma_mm / px)
        target = gaussian_filter(np.asarray(frame.data, dtype=np.float64), sig, mode="nearest")
        return lambda x: sim(
            gaussian_filter(extract_slice(vol, Pose.from_vector(x), spec).data.astype(np.float64), sig, mode="nearest"),
            target,
        )

    stages = [make_f(s) for s in cfg.smoothing[:-1]]
    fine = make_f(cfg.smoothing[-1])
    rng = np.random.default_rng(cfg.seed)
    x0 = init.as_vector()
    starts = [x0]
    jit = np.array([cfg.jitter[0]] * 3 + [cfg.jitter[1]] * 3)
    for _ in range(cfg.restarts):
        starts.append(x0 + rng.uniform(-1.0, 1.0, 6) * jit)

    used = 0
    coarse_budget = cfg.max_evals // 2
    x = x0
    if stages:
        # every start runs the coarse stages; the best coarse score is refined
        scores = []
        ends = []
        for k, s in enumerate(starts):
            share = max((coarse_budget - used) // (len(starts) - k), 1)
            xk, val = s, -np.inf
            for j, f in enumerate(stages):
                xk, val, _, n, _ = _pattern_search(f, xk, cfg, max(share // (len(stages) - j), 1))
                share -= n
                used += n
            ends.append(xk)
            scores.append(val)
        x = ends[int(np.argmax(scores))]
    elif cfg.restarts:
        scores = [fine(s) for s in starts]
        used += len(starts)
        x = starts[int(np.argmax(scores))]
    f_init = fine(x0)
    f_x = fine(x) if x is not x0 else f_init
    used += 1 if x is x0 else 2
    if f_init >= f_x:
        x = x0
    x, val, sub, n, exhausted = _pattern_search(fine, x, cfg, max(cfg.max_evals - used, 1))
    trace = [max(f_init, t) for t in sub]
    return RegistrationResult(Pose.from_vector(x), val, trace, used + n, exhausted)


# ---------------------------------------------------------------- network registrar


def nn_register(params, cfg: NetConfig, vol: Volume, frame: Frame) -> Prediction:
    """One-shot prediction; the anchor frame is repeated to fill 4 channels."""
    frames = np.stack([np.asarray(frame.data)] * 4)
    out = cureg_forward(params, cfg, vol.data, frames)
    return out.prediction()


# ---------------------------------------------------------------- training


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    weights: LossWeights = LossWeights()
    precision: int = 32
    clip_norm: float = 10.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError(f"invalid training config: {self}")


@dataclass
class TrainResult:
    params: dict
    history: list[float] = field(default_factory=list)
    net: NetConfig = NetConfig()


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict):
        if self.lr == 0.0:
            return
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm > 0:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def train(samples: Sequence, cfg: TrainConfig = TrainConfig(), net: NetConfig = NetConfig(), params=None) -> TrainResult:
    """Mini-batch Adam on the hybrid loss.

    ``samples`` is a list of :class:`f2vreg.simulate.Sample` (see
    :func:`f2vreg.io.load_split`).  Batches are drawn by a seeded shuffle
    that restarts every epoch; per-sample gradients are summed in order.
    """
    if not samples:
        raise ValueError("training needs a non-empty train split")
    with T.precision(cfg.precision):
        if params is None:
            params = init_params(net, cfg.seed)
        else:
            params = {k: T.Tensor(np.array(getattr(v, "data", v)), requires_grad=True) for k, v in params.items()}
        opt = Adam(params, cfg.lr, cfg.betas, cfg.eps)
        rng = np.random.default_rng([cfg.seed, 1])
        order: list[int] = []
        history = []
        inputs = [(s.frames(), np.asarray(s.volume.data)) for s in samples]
        for step in range(cfg.steps):
            batch = []
            while len(batch) < cfg.batch_size:
                if not order:
                    order = list(rng.permutation(len(samples)))
                batch.append(order.pop(0))
            for p in params.values():
                p.grad = None
            total = 0.0
            for i in batch:
                frames, vol = inputs[i]
                out = cureg_forward(params, net, vol, frames)
                loss = T.scale(total_loss(out, samples[i], cfg.weights), 1.0 / len(batch))
                T.backward(loss)
                total += loss.item()
            if not math.isfinite(total):
                raise TrainingDiverged(step, total)
            grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in params.items()}
            clip_grads(grads, cfg.clip_norm)
            opt.step(grads)
            history.append(total)
            if step % 20 == 0:
                log.info("step %d loss %.4f", step, total)
    return TrainResult(params, history, net)
