import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from f2vreg import tensor as T
from f2vreg.geometry import GridSpec
from f2vreg.network import (
    NetConfig,
    ShapeError,
    cross_interact,
    cureg_forward,
    frame_encoder,
    heads,
    init_params,
    param_shapes,
    pgca,
    project_prompt,
    prompt_head,
    volume_encoder,
    vlga,
    zero_params,
)
from f2vreg.registrar import nn_register
from f2vreg.resample import Frame, Volume

NET = NetConfig(d=8, m=16, hidden=16, norm_channels=16)


@pytest.fixture(scope="module")
def params():
    return init_params(NET, 0, requires_grad=False)


def _pgca_params(rng, d, scale=0.5):
    names = ("wq", "wk", "wv", "wg", "f_attn_w", "f_prompt_w")
    p = {n: T.Tensor(rng.normal(0, scale, (d, d))) for n in names}
    p["f_attn_b"] = T.Tensor(rng.normal(0, scale, (d, 1)))
    p["f_prompt_b"] = T.Tensor(rng.normal(0, scale, (d, 1)))
    return p


# ---------------------------------------------------------------- shapes


def test_default_shapes_at_full_size():
    cfg = NetConfig()
    p = init_params(cfg, 0, requires_grad=False)
    rng = np.random.default_rng(0)
    f = frame_encoder(p, rng.uniform(size=(4, 128, 128)))
    assert f.shape == (32, 16, 16)
    v = volume_encoder(p, rng.uniform(size=(32, 128, 128)))
    assert v.shape == (32, 16, 16, 16)


def test_forward_toy_shapes(params):
    rng = np.random.default_rng(1)
    out = cureg_forward(params, NET, rng.uniform(size=(8, 32, 32)), rng.uniform(size=(4, 32, 32)))
    assert out.trans.shape == (3,) and out.rot.shape == (3,) and out.dist.shape == (3,)
    assert out.prompt.shape == (2, 4, 4)
    assert np.all(out.dist.data >= 0)


def test_shape_errors(params):
    with pytest.raises(ShapeError):
        frame_encoder(params, np.zeros((3, 32, 32)))
    with pytest.raises(ShapeError):
        frame_encoder(params, np.zeros((4, 30, 32)))
    with pytest.raises(ShapeError):
        volume_encoder(params, np.zeros((1, 32, 32)))
    with pytest.raises(ShapeError):
        cureg_forward(params, NET, np.zeros((8, 64, 64)), np.zeros((4, 32, 32)))


def test_param_shapes_cover_init():
    p = init_params(NET, 3)
    assert set(p) == set(param_shapes(NET))
    assert all(p[k].shape == s for k, s in param_shapes(NET).items())


def test_init_is_seeded():
    a, b, c = init_params(NET, 4), init_params(NET, 4), init_params(NET, 5)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


# ---------------------------------------------------------------- encoders


def test_frame_encoder_zero_input_zero_bias(params):
    out = frame_encoder(params, np.zeros((4, 32, 32)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_frame_encoder_adjacent_order_matters(params):
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(4, 32, 32))
    y = x[[0, 2, 1, 3]]
    assert not np.allclose(frame_encoder(params, x).data, frame_encoder(params, y).data)


def test_volume_encoder_constant_interior():
    p = init_params(NET, 1, requires_grad=False)
    out = volume_encoder(p, np.full((16, 96, 96), 0.7)).data
    interior = out[:, 3:-3, 3:-3, 3:-3]
    assert interior.size > 0
    np.testing.assert_allclose(interior, interior[:, :1, :1, :1] * np.ones_like(interior), atol=1e-12)


# ---------------------------------------------------------------- prompt head


@given(seed=st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_prompt_probabilities_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    p = {"prompt.w": T.Tensor(rng.normal(0, 3, (2, 8, 1, 1))), "prompt.b": T.Tensor(rng.normal(0, 3, 2))}
    prob = prompt_head(p, T.Tensor(rng.normal(0, 3, (8, 5, 6)))).data
    assert np.all((prob >= 0) & (prob <= 1))
    np.testing.assert_allclose(prob.sum(axis=0), 1.0, atol=1e-6)


def test_prompt_tie_is_half():
    p = {"prompt.w": T.Tensor(np.zeros((2, 8, 1, 1))), "prompt.b": T.Tensor(np.zeros(2))}
    prob = prompt_head(p, T.Tensor(np.random.default_rng(0).normal(size=(8, 4, 4)))).data
    np.testing.assert_array_equal(prob, 0.5)


def test_project_prompt_tiles_over_depth(params):
    prompt = T.Tensor(np.random.default_rng(0).uniform(size=(2, 4, 4)))
    e = project_prompt(params, prompt, (8, 3, 4, 4)).data
    assert e.shape == (8, 48)
    blocks = e.reshape(8, 3, 16)
    np.testing.assert_array_equal(blocks[:, 0], blocks[:, 2])
    with pytest.raises(ShapeError):
        project_prompt(params, prompt, (8, 3, 5, 4))


# ---------------------------------------------------------------- PGCA


@given(seed=st.integers(0, 10_000), d=st.integers(1, 6), L=st.integers(1, 12))
@settings(max_examples=30, deadline=None)
def test_pgca_zero_params_is_identity(seed, d, L):
    rng = np.random.default_rng(seed)
    P, C, E = (T.Tensor(rng.normal(size=(d, L))) for _ in range(3))
    p = {k[len("pgca_s."):]: v for k, v in zero_params(NetConfig(d=d), "pgca_s").items()}
    z = pgca(P, C, E, p)
    np.testing.assert_array_equal(z.data, P.data)


@given(seed=st.integers(0, 10_000), d=st.integers(1, 6), L=st.integers(1, 12))
@settings(max_examples=30, deadline=None)
def test_pgca_attention_rows_sum_to_one(seed, d, L):
    rng = np.random.default_rng(seed)
    P, C, E = (T.Tensor(rng.normal(0, 3, size=(d, L))) for _ in range(3))
    _, a = pgca(P, C, E, _pgca_params(rng, d, 2.0), return_attention=True)
    assert a.shape == (d, d)
    np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-6)


def test_pgca_shape_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        pgca(T.Tensor(np.zeros((4, 5))), T.Tensor(np.zeros((4, 6))), T.Tensor(np.zeros((4, 5))), _pgca_params(rng, 4))


def test_cross_interact_shapes(params):
    rng = np.random.default_rng(3)
    f_s = T.Tensor(rng.normal(size=(8, 4, 4)))
    f_v = T.Tensor(rng.normal(size=(8, 3, 4, 4)))
    e = T.Tensor(rng.normal(size=(8, 48)))
    z_s, z_v = cross_interact(params, f_s, f_v, e)
    assert z_s.shape == z_v.shape == (8, 48)
    with pytest.raises(ShapeError):
        cross_interact(params, T.Tensor(rng.normal(size=(8, 4, 5))), f_v, e)


# ---------------------------------------------------------------- VLGA


@given(seed=st.integers(0, 10_000), L=st.integers(2, 20))
@settings(max_examples=30, deadline=None)
def test_vlga_global_is_permutation_invariant(seed, L):
    rng = np.random.default_rng(seed)
    p = init_params(NET, seed % 7, requires_grad=False)
    p = {**p, "vlga.b1": T.Tensor(rng.normal(size=(NET.m, 1))), "vlga.b2": T.Tensor(rng.normal(size=(NET.m, 1)))}
    z_s = rng.normal(size=(NET.d, L))
    z_v = rng.normal(size=(NET.d, L))
    perm = rng.permutation(L)
    z, g = vlga(p, T.Tensor(z_s), T.Tensor(z_v), return_global=True)
    zp, gp = vlga(p, T.Tensor(z_s[:, perm]), T.Tensor(z_v[:, perm]), return_global=True)
    np.testing.assert_array_equal(g.data, gp.data)
    np.testing.assert_array_equal(z.data[:, perm], zp.data)
    assert z.shape == (2 * NET.d + NET.m, L)


# ---------------------------------------------------------------- heads and registrar


def test_zero_heads_give_identity_pose(params):
    p = dict(params)
    for k, v in zero_params(NET, "head.").items():
        p[k] = v
    rng = np.random.default_rng(4)
    for _ in range(3):
        out = cureg_forward(p, NET, rng.uniform(size=(8, 32, 32)), rng.uniform(size=(4, 32, 32)))
        np.testing.assert_array_equal(out.trans.data, 0.0)
        np.testing.assert_array_equal(out.rot.data, 0.0)
        np.testing.assert_allclose(out.dist.data, np.log(2.0) * NET.dist_scale, rtol=1e-12)


def test_heads_scale_outputs():
    cfg = NetConfig(d=2, m=2, hidden=2, trans_scale=3.0, rot_scale=5.0)
    p = {k: v for k, v in zero_params(cfg, "head.").items()}
    p["head.trans.b2"] = T.Tensor(np.ones((3, 1)))
    p["head.rot.b2"] = T.Tensor(np.ones((3, 1)))
    t, r, _ = heads(p, T.Tensor(np.ones((6, 4))), cfg)
    np.testing.assert_array_equal(t.data, 3.0)
    np.testing.assert_array_equal(r.data, 5.0)


def test_nn_register_deterministic_and_canonical(params):
    rng = np.random.default_rng(5)
    vol = Volume(rng.uniform(size=(8, 32, 32)), GridSpec((8, 32, 32), (2.48,) * 3))
    frame = Frame(rng.uniform(size=(32, 32)), GridSpec((32, 32), (2.48, 2.48)))
    a = nn_register(params, NET, vol, frame)
    b = nn_register(params, NET, vol, frame)
    np.testing.assert_array_equal(a.pose.as_vector(), b.pose.as_vector())
    assert np.all(np.isfinite(a.pose.as_vector()))
    assert all(-180.0 < r <= 180.0 for r in a.pose.rotation)
    assert a.prompt.shape == (4, 4)
