"""Registry of finite-difference gradient checks at toy shapes.

Every differentiable block is registered under a name together with a
builder that returns ``(f, inputs)``: a scalar-valued tensor function and the
64-bit leaf tensors it is checked against.  Scalar outputs are formed by a
fixed random projection so that every output element contributes.
"""
from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .geometry import Pose
from .losses import msssim, prompt_loss, reg_loss, resample_slice, smooth_l1, total_loss
from .network import (
    NetConfig,
    cross_interact,
    cureg_forward,
    frame_encoder,
    heads,
    init_params,
    pgca,
    project_prompt,
    prompt_head,
    vlga,
    volume_encoder,
)
from .resample import Volume
from .tensor import GradcheckReport, Tensor

Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]

TOY_NET = NetConfig(d=4, m=8, hidden=8, norm_channels=8)


@dataclass(frozen=True)
class Check:
    name: str
    build: Builder
    max_elements: int | None = None


@dataclass
class CheckResult:
    name: str
    report: GradcheckReport
    seconds: float


REGISTRY: dict[str, Check] = {}


def register(name: str, max_elements: int | None = None):
    def deco(fn: Builder) -> Builder:
        if name in REGISTRY:
            raise ValueError(f"duplicate gradcheck {name!r}")
        REGISTRY[name] = Check(name, fn, max_elements)
        return fn

    return deco


def _leaf(rng, *shape, lo=-1.0, hi=1.0, away_from_zero=0.0):
    x = rng.uniform(lo, hi, shape)
    if away_from_zero:
        # keep relu/abs kinks out of the finite-difference stencil
        x = np.where(np.abs(x) < away_from_zero, np.sign(x + 1e-12) * away_from_zero, x)
    return Tensor(x, requires_grad=True)


def _projector(rng, shape):
    w = Tensor(rng.standard_normal(shape))
    return lambda y: T.sum_(y * w)


def _params(rng, prefix: str, net: NetConfig = TOY_NET) -> tuple[list[str], list[Tensor]]:
    p = init_params(net, int(rng.integers(2**31)))
    names = [k for k in p if k.startswith(prefix)]
    # nonzero biases so their gradients are exercised away from the init point
    for k in names:
        if p[k].data.ndim == 1:
            p[k].data = rng.uniform(-0.1, 0.1, p[k].shape)
    return names, [p[k] for k in names]


def _with(names, tensors):
    return dict(zip(names, tensors))


# ---------------------------------------------------------------- primitive ops


def _binary(op):
    def build(rng):
        a = _leaf(rng, 3, 4)
        b = _leaf(rng, 4, lo=0.5, hi=1.5)  # broadcast operand; positive for div
        proj = _projector(rng, (3, 4))
        return (lambda a, b: proj(T.elementwise(op, a, b))), [a, b]

    return build


for _op in ("add", "sub", "mul", "div"):
    register(f"elementwise.{_op}")(_binary(_op))


def _unary(op, **kw):
    def build(rng):
        x = _leaf(rng, 3, 5, lo=-3.0, hi=3.0, away_from_zero=0.05)
        proj = _projector(rng, (3, 5))
        return (lambda x: proj(T.elementwise(op, x, **kw))), [x]

    return build


for _op in ("silu", "relu", "softplus"):
    register(f"elementwise.{_op}")(_unary(_op))
register("elementwise.scale")(_unary("scale", factor=-2.5))


@register("matmul")
def _matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    proj = _projector(rng, (3, 5))
    return (lambda a, b: proj(T.matmul(a, b))), [a, b]


@register("pointwise_linear")
def _pointwise_linear(rng):
    w, x = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    proj = _projector(rng, (3, 5))
    return (lambda w, x: proj(T.pointwise_linear(w, x))), [w, x]


@register("transpose")
def _transpose(rng):
    a = _leaf(rng, 3, 4)
    proj = _projector(rng, (4, 3))
    return (lambda a: proj(T.transpose(a))), [a]


@register("softmax")
def _softmax(rng):
    x = _leaf(rng, 4, 5, lo=-2.0, hi=2.0)
    proj0, proj1 = _projector(rng, (4, 5)), _projector(rng, (4, 5))
    return (lambda x: proj0(T.softmax(x, axis=0)) + proj1(T.softmax(x, axis=1))), [x]


@register("conv2d")
def _conv2d(rng):
    x, w, b = _leaf(rng, 2, 7, 6), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
    pad = (T.same_padding(7, 3, 2), T.same_padding(6, 3, 2))
    proj = _projector(rng, (3, 4, 3))
    return (lambda x, w, b: proj(T.conv2d(x, w, b, stride=2, pad=pad))), [x, w, b]


@register("conv3d")
def _conv3d(rng):
    x, w, b = _leaf(rng, 2, 4, 5, 5), _leaf(rng, 2, 2, 3, 3, 3), _leaf(rng, 2)
    proj = _projector(rng, (2, 4, 3, 3))
    return (lambda x, w, b: proj(T.conv3d(x, w, b, stride=(1, 2, 2), pad=1))), [x, w, b]


def _reduce(op):
    def build(rng):
        x = _leaf(rng, 3, 4, 5)
        proj_a = _projector(rng, (3, 5))
        proj_b = _projector(rng, (3, 4, 1))
        return (lambda x: proj_a(T.reduce(op, x, axis=1)) + proj_b(T.reduce(op, x, axis=2, keepdims=True))), [x]

    return build


for _op in ("max", "mean", "sum"):
    register(f"reduce.{_op}")(_reduce(_op))


@register("concat_reshape_getitem")
def _shape_ops(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 4, 3)
    proj = _projector(rng, (3, 3))
    return (lambda a, b: proj(T.reshape(T.concat([a, b], axis=0), (3, 6))[:, 1:4])), [a, b]


# ---------------------------------------------------------------- network blocks


@register("frame_encoder", max_elements=12)
def _frame_encoder(rng):
    names, ps = _params(rng, "frame.")
    x = _leaf(rng, 4, 16, 16, lo=0.0, hi=1.0)
    proj = _projector(rng, (TOY_NET.d, 2, 2))
    return (lambda x, *ps: proj(frame_encoder(_with(names, ps), x))), [x, *ps]


@register("volume_encoder", max_elements=12)
def _volume_encoder(rng):
    names, ps = _params(rng, "vol.")
    x = _leaf(rng, 1, 8, 16, 16, lo=0.0, hi=1.0)
    proj = _projector(rng, (TOY_NET.d, 4, 2, 2))
    return (lambda x, *ps: proj(volume_encoder(_with(names, ps), x))), [x, *ps]


@register("prompt_head+prompt_loss")
def _prompt_head(rng):
    names, ps = _params(rng, "prompt.")
    f = _leaf(rng, TOY_NET.d, 4, 4)
    target = rng.uniform(0, 1, (4, 4))
    return (lambda f, *ps: prompt_loss(prompt_head(_with(names, ps), f)[0], target)), [f, *ps]


@register("project_prompt")
def _project_prompt(rng):
    names, ps = _params(rng, "proj.")
    e = _leaf(rng, 2, 3, 3, lo=0.0, hi=1.0)
    proj = _projector(rng, (TOY_NET.d, 2 * 9))
    return (lambda e, *ps: proj(project_prompt(_with(names, ps), e, (TOY_NET.d, 2, 3, 3)))), [e, *ps]


@register("pgca")
def _pgca(rng):
    names, ps = _params(rng, "pgca_s.")
    short = [k.split(".", 1)[1] for k in names]
    P, C, E = (_leaf(rng, 4, 8) for _ in range(3))
    proj = _projector(rng, (4, 8))
    return (lambda P, C, E, *ps: proj(pgca(P, C, E, _with(short, ps)))), [P, C, E, *ps]


@register("cross_interact")
def _cross(rng):
    names, ps = _params(rng, "pgca_")
    fs, fv, e = _leaf(rng, 4, 2, 2), _leaf(rng, 4, 2, 2, 2), _leaf(rng, 4, 8)
    proj_s, proj_v = _projector(rng, (4, 8)), _projector(rng, (4, 8))

    def f(fs, fv, e, *ps):
        zs, zv = cross_interact(_with(names, ps), fs, fv, e)
        return proj_s(zs) + proj_v(zv)

    return f, [fs, fv, e, *ps]


@register("vlga")
def _vlga(rng):
    names, ps = _params(rng, "vlga.")
    zs, zv = _leaf(rng, 4, 16), _leaf(rng, 4, 16)
    proj = _projector(rng, (2 * 4 + 8, 16))
    return (lambda zs, zv, *ps: proj(vlga(_with(names, ps), zs, zv))), [zs, zv, *ps]


@register("heads")
def _heads(rng):
    names, ps = _params(rng, "head.")
    z = _leaf(rng, 2 * 4 + 8, 6)
    projs = [_projector(rng, (3,)) for _ in range(3)]

    def f(z, *ps):
        outs = heads(_with(names, ps), z, TOY_NET)
        return projs[0](outs[0]) + projs[1](outs[1]) + projs[2](outs[2])

    return f, [z, *ps]


# ---------------------------------------------------------------- losses and resampling


@register("loss.smooth_l1")
def _smooth_l1(rng):
    # components on both sides of the knee at |x| = 1
    pred = Tensor(np.array([-2.3, -0.7, 0.2, 0.9, 1.2, 3.1]), requires_grad=True)
    true = Tensor(rng.uniform(-0.02, 0.02, 6), requires_grad=True)
    return smooth_l1, [pred, true]


@register("loss.prompt")
def _prompt(rng):
    return prompt_loss, [_leaf(rng, 4, 4, lo=0, hi=1), _leaf(rng, 4, 4, lo=0, hi=1)]


@register("loss.reg")
def _reg(rng):
    return reg_loss, [_leaf(rng, 3, lo=0, hi=4), _leaf(rng, 3, lo=0, hi=4)]


@register("loss.msssim", max_elements=64)
def _msssim(rng):
    from scipy.ndimage import gaussian_filter

    a = gaussian_filter(rng.uniform(0, 1, (32, 32)), 1.5)
    b = gaussian_filter(rng.uniform(0, 1, (32, 32)), 1.5)
    return (lambda a, b: 1.0 - msssim(a, b)), [Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)]


def _toy_volume(rng):
    from .simulate import make_phantom, toy_config

    cfg = toy_config()
    vol, mask = make_phantom(rng, cfg.volume_spec)
    return vol, mask, cfg


@register("resample_slice")
def _resample(rng):
    vol, _, cfg = _toy_volume(rng)
    pose = Tensor(np.array([1.3, -0.7, 0.4, 3.0, -2.0, 5.0]), requires_grad=True)
    proj = _projector(rng, cfg.slice_spec.shape)
    return (lambda p: proj(resample_slice(vol, p, cfg.slice_spec))), [pose]


@register("resample_slice+msssim")
def _resample_sim(rng):
    from .resample import extract_slice

    vol, _, cfg = _toy_volume(rng)
    target = extract_slice(vol, Pose(0.5, 0.2, -0.3, 1.0, 2.0, -1.5), cfg.slice_spec).data
    pose = Tensor(np.array([1.3, -0.7, 0.4, 3.0, -2.0, 5.0]), requires_grad=True)
    return (lambda p: 1.0 - msssim(resample_slice(vol, p, cfg.slice_spec), target)), [pose]


def _toy_sample(rng):
    from .simulate import generate_sample

    vol, mask, cfg = _toy_volume(rng)
    return generate_sample(vol, mask, rng, cfg), cfg


@register("total_loss", max_elements=3)
def _total(rng):
    sample, _ = _toy_sample(rng)
    names, ps = _params(rng, "")
    frames = sample.frames().astype(np.float64)
    vol = np.asarray(sample.volume.data, dtype=np.float64)
    vol64 = Volume(vol, sample.volume.spec)
    s64 = type(sample)(vol64, sample.anchor, sample.adjacent, sample.mask, sample.pose_gt, sample.dist_gt)

    def f(*ps):
        return total_loss(cureg_forward(_with(names, ps), TOY_NET, vol, frames), s64)

    return f, list(ps)


# ---------------------------------------------------------------- runner


def _seed_for(name: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def run_check(name: str, h: float = 1e-4, tol: float = 1e-4, seed: int = 0) -> CheckResult:
    check = REGISTRY[name]
    t0 = time.perf_counter()
    with T.precision(64):
        f, inputs = check.build(_seed_for(name, seed))
        report = T.gradcheck(f, inputs, h=h, tol=tol, max_elements=check.max_elements, seed=seed)
    return CheckResult(name, report, time.perf_counter() - t0)


def run_all(names=None, h: float = 1e-4, tol: float = 1e-4, seed: int = 0) -> list[CheckResult]:
    names = list(REGISTRY) if names is None else list(names)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown gradcheck(s): {', '.join(unknown)}")
    return [run_check(n, h, tol, seed) for n in names]


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'block':<26} {'max_rel_err':>12} {'checked':>8} {'refined':>8} {'sec':>7}  result"]
    for r in results:
        rep = r.report
        lines.append(
            f"{r.name:<26} {rep.max_rel_err:12.3e} {rep.checked:8d} {rep.refined:8d} {r.seconds:7.2f}  "
            + ("PASS" if rep.passed else "FAIL")
        )
    return "\n".join(lines)
