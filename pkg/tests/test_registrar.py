import dataclasses

import numpy as np
import pytest

from f2vreg.geometry import Pose
from f2vreg.metrics import dist_err, ncc
from f2vreg.network import NetConfig, init_params
from f2vreg.registrar import (
    Adam,
    OptimizerConfig,
    TrainConfig,
    TrainingDiverged,
    classical_register,
    clip_grads,
    train,
)
from f2vreg.resample import extract_slice
from f2vreg.simulate import samples_for_volume, toy_config
from f2vreg.tensor import Tensor

TOY = toy_config()
TINY = NetConfig(d=4, m=8, hidden=8, norm_channels=8)


@pytest.fixture(scope="module")
def toy_samples():
    return samples_for_volume(5, 0, TOY) + samples_for_volume(5, 1, TOY)


# ---------------------------------------------------------------- config validation


@pytest.mark.parametrize(
    "kw",
    [dict(max_evals=0), dict(shrink=1.0), dict(shrink=0.0), dict(objective="mse"), dict(smoothing=()), dict(smoothing=(-1.0,))],
)
def test_optimizer_config_rejects(kw):
    with pytest.raises(ValueError):
        OptimizerConfig(**kw)


def test_train_config_rejects():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)


# ---------------------------------------------------------------- classical registration


def test_fixed_point_at_true_pose(toy_samples):
    s = toy_samples[0]
    res = classical_register(s.volume, s.anchor, s.pose_gt, OptimizerConfig(max_evals=300))
    np.testing.assert_array_equal(res.pose.as_vector(), s.pose_gt.as_vector())
    assert res.objective == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("objective", ["ncc", "msssim"])
def test_trace_monotone_and_never_below_init(toy_samples, objective):
    s = toy_samples[1]
    init = Pose(*(s.pose_gt.as_vector() + np.array([2.0, -1.5, 1.0, 4.0, -3.0, 5.0])))
    cfg = OptimizerConfig(max_evals=400, objective=objective)
    res = classical_register(s.volume, s.anchor, init, cfg)
    f = ncc if objective == "ncc" else None
    assert all(b >= a for a, b in zip(res.trace, res.trace[1:]))
    f_init = res.trace[0]
    if f is not None:
        assert f_init >= f(extract_slice(s.volume, init, s.anchor.spec).data, s.anchor.data) - 1e-15
        assert res.objective == pytest.approx(f(extract_slice(s.volume, res.pose, s.anchor.spec).data, s.anchor.data))
    assert res.objective >= f_init
    assert res.evals <= cfg.max_evals + 1


def test_budget_exhaustion_is_flagged(toy_samples):
    s = toy_samples[2]
    res = classical_register(s.volume, s.anchor, Pose(), OptimizerConfig(max_evals=10))
    assert res.exhausted
    assert np.all(np.isfinite(res.pose.as_vector()))


def test_classical_is_deterministic(toy_samples):
    s = toy_samples[3]
    cfg = OptimizerConfig(max_evals=300, restarts=1, seed=4)
    a = classical_register(s.volume, s.anchor, Pose(), cfg)
    b = classical_register(s.volume, s.anchor, Pose(), cfg)
    np.testing.assert_array_equal(a.pose.as_vector(), b.pose.as_vector())
    assert a.trace == b.trace


def test_classical_recovers_small_offset(toy_samples):
    s = toy_samples[4]
    init = Pose(*(s.pose_gt.as_vector() + np.array([1.5, -1.0, 0.5, 3.0, 2.0, -3.0])))
    res = classical_register(s.volume, s.anchor, init)
    before = dist_err(init, s.pose_gt, TOY.slice_spec, TOY.volume_spec)
    after = dist_err(res.pose, s.pose_gt, TOY.slice_spec, TOY.volume_spec)
    assert after < before


# ---------------------------------------------------------------- optimizer pieces


def test_clip_grads():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    norm = clip_grads(g, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(g["a"], [0.6, 0.0])
    np.testing.assert_allclose(g["b"], [[0.8]])
    g2 = {"a": np.array([0.1])}
    clip_grads(g2, 1.0)
    assert g2["a"][0] == 0.1


def test_adam_first_step_is_lr_sign():
    p = {"w": Tensor(np.array([1.0, -2.0, 0.5]))}
    opt = Adam(p, lr=0.1)
    opt.step({"w": np.array([3.0, -0.2, 0.0])})
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9, 0.5], rtol=1e-6)


def test_adam_zero_lr_is_noop():
    w0 = np.array([1.0, 2.0])
    p = {"w": Tensor(w0.copy())}
    Adam(p, lr=0.0).step({"w": np.array([1.0, 1.0])})
    np.testing.assert_array_equal(p["w"].data, w0)


# ---------------------------------------------------------------- training


@pytest.mark.parametrize("precision", [32, 64])
def test_train_zero_lr_is_exact_noop(toy_samples, precision):
    dtype = np.float32 if precision == 32 else np.float64
    init = {k: Tensor(v.data.astype(dtype)) for k, v in init_params(TINY, 2).items()}
    snapshot = {k: v.data.copy() for k, v in init.items()}
    cfg = TrainConfig(steps=3, batch_size=1, lr=0.0, seed=2, precision=precision)
    res = train(toy_samples[:1], cfg, TINY, params=init)
    for k, v in snapshot.items():
        assert res.params[k].data.dtype == dtype
        np.testing.assert_array_equal(res.params[k].data, v)
    assert len(set(res.history)) == 1


def test_train_is_deterministic(toy_samples):
    cfg = TrainConfig(steps=3, batch_size=2, seed=7)
    a = train(toy_samples, cfg, TINY)
    b = train(toy_samples, cfg, TINY)
    assert a.history == b.history
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_train_changes_parameters(toy_samples):
    res = train(toy_samples, TrainConfig(steps=2, batch_size=2, seed=1), TINY)
    ref = init_params(TINY, 1)
    assert any(not np.array_equal(res.params[k].data, ref[k].data) for k in ref)
    assert all(np.isfinite(res.history))


def test_train_divergence_reports_step(toy_samples):
    bad = dataclasses.replace(toy_samples[0], dist_gt=np.full(3, np.nan))
    with pytest.raises(TrainingDiverged) as exc:
        train([bad], TrainConfig(steps=3, batch_size=1), TINY)
    assert exc.value.step == 0


def test_train_needs_samples():
    with pytest.raises(ValueError):
        train([], TrainConfig(steps=1), TINY)
