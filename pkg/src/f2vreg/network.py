"""The frame-to-volume registration network, built on :mod:`f2vreg.tensor`.

Data flow for one sample::

    frames (4,H,W) --frame_encoder--> F_s (d,H/8,W/8) --prompt_head--> prompt (2,H/8,W/8)
    volume (1,D,H,W) --volume_encoder--> F_v (d,D/2,H/8,W/8)
    prompt --project_prompt--> E (d,L)          L = D/2 * H/8 * W/8
    (F_s, F_v, E) --cross_interact--> z_s, z_v (d,L)
    (z_s, z_v) --vlga--> Z (2d+m, L) --heads--> translation, rotation, distances

Parameters live in a flat ``dict[str, Tensor]``; every block takes the
dict and reads its own prefixed entries.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .geometry import Pose
from .tensor import ShapeError, Tensor, same_padding

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class NetConfig:
    d: int = 32
    m: int = 64
    hidden: int = 64
    norm_channels: int = 64
    trans_scale: float = 10.0
    rot_scale: float = 20.0
    dist_scale: float = 1.0

    @property
    def widths(self) -> tuple[int, int, int]:
        return (max(self.d // 4, 1), max(self.d // 2, 1), self.d)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "NetConfig":
        return cls(**d)


@dataclass
class Prediction:
    pose: Pose
    prompt: np.ndarray
    dist: np.ndarray


@dataclass
class NetOutput:
    trans: Tensor
    rot: Tensor
    dist: Tensor
    prompt: Tensor

    def prediction(self) -> Prediction:
        v = np.concatenate([self.trans.data, self.rot.data]).astype(np.float64)
        return Prediction(Pose.from_vector(v), self.prompt.data[0].copy(), self.dist.data.astype(np.float64))


# ---------------------------------------------------------------- parameters


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    d, m, h = cfg.d, cfg.m, cfg.hidden
    w1, w2, w3 = cfg.widths
    s = {
        "frame.norm1.w": (cfg.norm_channels, 4, 1, 1),
        "frame.norm1.b": (cfg.norm_channels,),
        "frame.norm2.w": (3, cfg.norm_channels, 1, 1),
        "frame.norm2.b": (3,),
    }
    c_in = 3
    for i, c in enumerate((w1, w2, w3)):
        s[f"frame.s{i}.w1"] = (c, c_in, 3, 3)
        s[f"frame.s{i}.b1"] = (c,)
        s[f"frame.s{i}.w2"] = (c, c, 3, 3)
        s[f"frame.s{i}.b2"] = (c,)
        s[f"frame.s{i}.ws"] = (c, c_in, 2, 2)
        s[f"frame.s{i}.bs"] = (c,)
        c_in = c
    c_in = 1
    for i, (c, k) in enumerate(zip((w1, w2, w3), (5, 3, 3))):
        s[f"vol.b{i}.w"] = (c, c_in, k, k, k)
        s[f"vol.b{i}.b"] = (c,)
        s[f"vol.p{i}.w"] = (d, c, 1, 1, 1)
        s[f"vol.p{i}.b"] = (d,)
        c_in = c
    s["prompt.w"] = (2, d, 1, 1)
    s["prompt.b"] = (2,)
    s["proj.w1"] = (d, 2, 1, 1)
    s["proj.b1"] = (d,)
    s["proj.w2"] = (d, d, 1, 1)
    s["proj.b2"] = (d,)
    for side in ("pgca_s", "pgca_v"):
        for name in ("wq", "wk", "wv", "wg", "f_attn_w", "f_prompt_w"):
            s[f"{side}.{name}"] = (d, d)
        s[f"{side}.f_attn_b"] = (d, 1)
        s[f"{side}.f_prompt_b"] = (d, 1)
    s["vlga.w1"] = (m, 2 * d)
    s["vlga.b1"] = (m, 1)
    s["vlga.w2"] = (m, m)
    s["vlga.b2"] = (m, 1)
    n = 2 * d + m
    for head in ("trans", "rot", "dist"):
        s[f"head.{head}.w1"] = (h, n)
        s[f"head.{head}.b1"] = (h, 1)
        s[f"head.{head}.w2"] = (3, h)
        s[f"head.{head}.b2"] = (3, 1)
    return s


def init_params(cfg: NetConfig, seed: int = 0, *, requires_grad: bool = True) -> dict[str, Tensor]:
    """He-normal weights, zero biases; head outputs start near zero."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("b") or leaf.endswith("_b"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = math.sqrt(2.0 / fan_in)
            if name.startswith("head.") and leaf == "w2":
                std *= 0.1
            elif name.startswith("pgca"):
                std = 1.0 / math.sqrt(fan_in)
            arr = rng.normal(0.0, std, shape)
        out[name] = Tensor(arr, requires_grad=requires_grad)
    return out


def zero_params(cfg: NetConfig, prefix: str = "", *, requires_grad: bool = True) -> dict[str, Tensor]:
    return {
        n: Tensor(np.zeros(s), requires_grad=requires_grad)
        for n, s in param_shapes(cfg).items()
        if n.startswith(prefix)
    }


def _sub(params: Params, prefix: str) -> dict[str, Tensor]:
    pre = prefix + "."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


# ---------------------------------------------------------------- blocks


def _same2(shape, k, s):
    return [same_padding(n, k, s) for n in shape]


def frame_encoder(params: Params, frames) -> Tensor:
    """4-channel frame stack -> d x H/8 x W/8 features."""
    x = T.as_tensor(frames)
    if x.ndim != 3 or x.shape[0] != 4:
        raise ShapeError(f"frame encoder needs a (4, H, W) stack, got {x.shape}")
    if x.shape[1] % 8 or x.shape[2] % 8:
        raise ShapeError(f"frame size {x.shape[1:]} must be divisible by 8")
    p = _sub(params, "frame")
    h = T.relu(T.conv2d(x, p["norm1.w"], p["norm1.b"]))
    h = T.conv2d(h, p["norm2.w"], p["norm2.b"])
    for i in range(3):
        a = T.relu(T.conv2d(h, p[f"s{i}.w1"], p[f"s{i}.b1"], stride=2, pad=_same2(h.shape[1:], 3, 2)))
        a = T.conv2d(a, p[f"s{i}.w2"], p[f"s{i}.b2"], stride=1, pad=1)
        sc = T.conv2d(h, p[f"s{i}.ws"], p[f"s{i}.bs"], stride=2)
        h = T.relu(a + sc)
    return h


def _pool_hw(x: Tensor, f: int) -> Tensor:
    if f == 1:
        return x
    c, d, h, w = x.shape
    x = T.reshape(x, (c, d, h // f, f, w // f, f))
    return T.mean(T.mean(x, axis=5), axis=3)


def volume_encoder(params: Params, volume) -> Tensor:
    """1 x D x H x W volume -> d x D/2 x H/8 x W/8 fused multi-scale features."""
    x = T.as_tensor(volume)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"volume encoder needs a single-channel volume, got {x.shape}")
    _, dd, hh, ww = x.shape
    if dd < 2 or hh < 8 or ww < 8 or dd % 2 or hh % 8 or ww % 8:
        raise ShapeError(f"volume {x.shape[1:]} too small for strides (2,8,8) or not divisible")
    p = _sub(params, "vol")
    blocks = []
    h = x
    for i, (k, st) in enumerate(zip((5, 3, 3), ((2, 2, 2), (1, 2, 2), (1, 2, 2)))):
        pad = [same_padding(n, k, s) for n, s in zip(h.shape[1:], st)]
        h = T.relu(T.conv3d(h, p[f"b{i}.w"], p[f"b{i}.b"], stride=st, pad=pad))
        blocks.append(h)
    out = None
    for i, (b, f) in enumerate(zip(blocks, (4, 2, 1))):
        proj = T.conv3d(_pool_hw(b, f), p[f"p{i}.w"], p[f"p{i}.b"])
        out = proj if out is None else out + proj
    return out


def prompt_head(params: Params, feats: Tensor) -> Tensor:
    """Per-pixel 2-way softmax; channel 0 is the epicardium probability."""
    logits = T.conv2d(feats, params["prompt.w"], params["prompt.b"])
    return T.softmax(logits, axis=0)


def _tile_depth(x: Tensor, depth: int) -> Tensor:
    c, h, w = x.shape
    x = T.reshape(x, (c, 1, h, w))
    x = T.concat([x] * depth, axis=1) if depth > 1 else x
    return T.reshape(x, (c, depth * h * w))


def project_prompt(params: Params, prompt: Tensor, target_shape: tuple[int, ...]) -> Tensor:
    """Lift the 2-channel prompt to d channels and tile it over depth -> (d, L)."""
    _, dp, hp, wp = target_shape
    if tuple(prompt.shape[1:]) != (hp, wp):
        raise ShapeError(f"prompt {prompt.shape[1:]} does not match feature plane {(hp, wp)}")
    e = T.relu(T.conv2d(prompt, params["proj.w1"], params["proj.b1"]))
    e = T.conv2d(e, params["proj.w2"], params["proj.b2"])
    return _tile_depth(e, dp)


def pgca(P: Tensor, C: Tensor, E: Tensor, p: Params, return_attention: bool = False):
    """Prompt-guided gated channel attention.

    ``p`` holds wq, wk, wv, wg (d x d), and the two output maps
    f_attn_w/b and f_prompt_w/b.  Attention is d x d over channels with the
    softmax taken across key channels.
    """
    if not (P.shape == C.shape == E.shape) or P.ndim != 2:
        raise ShapeError(f"pgca inputs must share a (d, L) shape: {P.shape}, {C.shape}, {E.shape}")
    d = P.shape[0]
    q = p["wq"] @ C
    k = p["wk"] @ P
    v = T.silu(p["wv"] @ P)
    g = T.silu(p["wg"] @ P)
    a = T.softmax(T.scale(q @ T.transpose(k), 1.0 / math.sqrt(d)), axis=1)
    gated = g * (a @ v)
    z = P + (p["f_attn_w"] @ gated + p["f_attn_b"]) + (p["f_prompt_w"] @ E + p["f_prompt_b"])
    return (z, a) if return_attention else z


def cross_interact(params: Params, f_s: Tensor, f_v: Tensor, e: Tensor):
    """Bi-directional PGCA between depth-tiled slice features and volume features."""
    d, dp, hp, wp = f_v.shape
    if f_s.shape != (d, hp, wp):
        raise ShapeError(f"slice features {f_s.shape} do not match volume features {f_v.shape}")
    s_flat = _tile_depth(f_s, dp)
    v_flat = T.reshape(f_v, (d, dp * hp * wp))
    z_s = pgca(s_flat, v_flat, e, _sub(params, "pgca_s"))
    z_v = pgca(v_flat, s_flat, e, _sub(params, "pgca_v"))
    return z_s, z_v


def vlga(params: Params, z_s: Tensor, z_v: Tensor, return_global: bool = False):
    """Pairwise local features concatenated with a max-pooled global vector."""
    if z_s.shape != z_v.shape or z_s.ndim != 2:
        raise ShapeError(f"vlga inputs differ: {z_s.shape} vs {z_v.shape}")
    p = _sub(params, "vlga")
    pair = T.concat([z_s, z_v], axis=0)
    h = T.relu(T.pointwise_linear(p["w1"], pair) + p["b1"])
    h = T.pointwise_linear(p["w2"], h) + p["b2"]
    glo = T.reduce("max", h, axis=1, keepdims=True)
    glo_b = glo + Tensor(np.zeros((glo.shape[0], pair.shape[1])))
    z = T.concat([pair, glo_b], axis=0)
    return (z, glo) if return_global else z


def heads(params: Params, z: Tensor, cfg: NetConfig) -> tuple[Tensor, Tensor, Tensor]:
    pooled = T.mean(z, axis=1, keepdims=True)
    outs = []
    for name in ("trans", "rot", "dist"):
        p = _sub(params, f"head.{name}")
        h = T.relu(p["w1"] @ pooled + p["b1"])
        outs.append(T.reshape(p["w2"] @ h + p["b2"], (3,)))
    trans = T.scale(outs[0], cfg.trans_scale)
    rot = T.scale(outs[1], cfg.rot_scale)
    dist = T.scale(T.softplus(outs[2]), cfg.dist_scale)
    return trans, rot, dist


def cureg_forward(params: Params, cfg: NetConfig, volume, frames) -> NetOutput:
    vol = getattr(volume, "data", volume)
    if isinstance(frames, (list, tuple)):
        frames = np.stack([getattr(f, "data", f) for f in frames])
    f_s = frame_encoder(params, frames)
    prompt = prompt_head(params, f_s)
    f_v = volume_encoder(params, vol)
    if f_v.shape[2:] != f_s.shape[1:]:
        raise ShapeError(f"frame features {f_s.shape} and volume features {f_v.shape} disagree in-plane")
    e = project_prompt(params, prompt, f_v.shape)
    z_s, z_v = cross_interact(params, f_s, f_v, e)
    z = vlga(params, z_s, z_v)
    trans, rot, dist = heads(params, z, cfg)
    return NetOutput(trans, rot, dist, prompt)
