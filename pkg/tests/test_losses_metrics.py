import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from f2vreg import tensor as T
from f2vreg.geometry import Pose
from f2vreg.losses import (
    LossWeights,
    downsample_mask,
    gaussian_window,
    msssim,
    prompt_loss,
    reg_loss,
    resample_slice,
    smooth_l1,
    ssim,
    total_loss,
)
from f2vreg.metrics import METRIC_KEYS, dist_err, evaluate, ncc, para_ncc, te_re
from f2vreg.network import NetOutput
from f2vreg.resample import extract_slice
from f2vreg.simulate import samples_for_volume, toy_config

TOY = toy_config()
finite = st.floats(-50, 50, allow_nan=False)
poses = st.builds(
    Pose,
    *[st.floats(-10, 10) for _ in range(3)],
    *[st.floats(-20, 20) for _ in range(3)],
)


@pytest.fixture(scope="module")
def samples():
    return samples_for_volume(0, 0, TOY) + samples_for_volume(0, 1, TOY)


def _perfect_output(s):
    factor = s.mask.data.shape[0] // 4
    e = downsample_mask(np.asarray(s.mask.data, np.float64), factor)
    prompt = np.stack([e, 1.0 - e])
    return NetOutput(
        T.Tensor(s.pose_gt.translation), T.Tensor(s.pose_gt.rotation), T.Tensor(s.dist_gt), T.Tensor(prompt)
    )


# ---------------------------------------------------------------- smooth L1


@given(x=finite)
def test_smooth_l1_closed_form(x):
    v = smooth_l1(T.Tensor([x]), np.zeros(1)).item()
    expect = 0.5 * x * x if abs(x) < 1 else abs(x) - 0.5
    assert v == pytest.approx(expect, rel=1e-12, abs=1e-12)


@given(a=st.lists(finite, min_size=3, max_size=3), b=st.lists(finite, min_size=3, max_size=3))
def test_smooth_l1_symmetric_nonnegative(a, b):
    u = smooth_l1(np.array(a), np.array(b)).item()
    v = smooth_l1(np.array(b), np.array(a)).item()
    assert u == v and u >= 0


def test_smooth_l1_shape_mismatch():
    with pytest.raises(T.ShapeError):
        smooth_l1(np.zeros(3), np.zeros(2))


def test_prompt_and_reg_losses():
    e = np.random.default_rng(0).uniform(size=(4, 4))
    assert prompt_loss(e, e).item() == 0.0
    assert prompt_loss(np.ones((2, 2)), np.zeros((2, 2))).item() == 1.0
    assert reg_loss(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0])).item() == 0.0
    with pytest.raises(T.ShapeError):
        reg_loss(np.zeros(2), np.zeros(2))


def test_downsample_mask():
    m = np.kron(np.array([[1.0, 0.0], [0.0, 1.0]]), np.ones((3, 3)))
    np.testing.assert_array_equal(downsample_mask(m, 3), [[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        downsample_mask(np.ones((5, 5)), 2)


# ---------------------------------------------------------------- SSIM


def test_gaussian_window_normalized():
    w = gaussian_window(11, 1.5)
    assert w.shape == (11, 11) and math.isclose(w.sum(), 1.0, rel_tol=1e-14)
    np.testing.assert_allclose(w, w.T)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_msssim_self_is_one(seed):
    a = np.random.default_rng(seed).uniform(size=(32, 32))
    assert msssim(a, a).item() == pytest.approx(1.0, abs=1e-12)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_msssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32))
    u, v = msssim(a, b).item(), msssim(b, a).item()
    assert u == pytest.approx(v, abs=1e-12)
    assert -1.0 <= u < 1.0


def test_msssim_degrades_with_noise():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(32, 32))
    vals = [msssim(a, a + s * rng.standard_normal(a.shape)).item() for s in (0.01, 0.1, 0.5)]
    assert vals[0] > vals[1] > vals[2]


def test_msssim_single_scale_is_ssim():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
    assert ssim(a, b).item() == msssim(a, b, scales=1).item()


def test_msssim_rejects_small_images():
    with pytest.raises(ValueError):
        msssim(np.ones((16, 16)), np.ones((16, 16)), scales=3)
    with pytest.raises(T.ShapeError):
        msssim(np.ones((32, 32)), np.ones((32, 16)))


# ---------------------------------------------------------------- NCC and pose metrics


@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 10), shift=st.floats(-5, 5))
def test_ncc_affine_invariance(seed, scale, shift):
    a = np.random.default_rng(seed).standard_normal(50)
    assert ncc(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ncc(a, scale * a + shift) == pytest.approx(1.0, abs=1e-9)
    assert ncc(a, -a) == pytest.approx(-1.0, abs=1e-12)


def test_ncc_constant_inputs():
    assert ncc(np.ones(5), np.ones(5)) == 1.0
    assert ncc(np.ones(5), np.full(5, 2.0)) == 0.0
    assert ncc(np.ones(5), np.arange(5.0)) == 0.0
    with pytest.raises(ValueError):
        ncc(np.ones(3), np.ones(4))


@given(p=poses)
@settings(max_examples=50)
def test_pose_metric_identities(p):
    assert dist_err(p, p, TOY.slice_spec, TOY.volume_spec) == 0.0
    assert te_re(p, p) == (0.0, 0.0)


@given(p=poses, q=poses)
@settings(max_examples=50)
def test_dist_err_symmetric_and_triangle(p, q):
    s, v = TOY.slice_spec, TOY.volume_spec
    d_pq = dist_err(p, q, s, v)
    assert d_pq == pytest.approx(dist_err(q, p, s, v), abs=1e-12)
    assert d_pq <= dist_err(p, Pose(), s, v) + dist_err(Pose(), q, s, v) + 1e-9


def test_te_re_wraps_angles():
    te, re = te_re(Pose(1, -2, 0, 179, 0, 0), Pose(0, 0, 0, -179, 0, 0))
    assert te == 3.0 and re == pytest.approx(2.0)


def test_para_ncc_perfect():
    v = np.array([1.0, -2.0, 3.0, 4.0, 0.5, -6.0])
    assert para_ncc(v, v) == pytest.approx(1.0)


# ---------------------------------------------------------------- total loss


def test_total_loss_zero_at_perfect_prediction(samples):
    s = samples[0]
    loss, terms = total_loss(_perfect_output(s), s, return_terms=True)
    assert terms[:4] == [0.0, 0.0, 0.0, 0.0]
    assert terms[4] == pytest.approx(0.0, abs=1e-12)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_total_loss_zero_weights(samples):
    out = _perfect_output(samples[1])
    out.trans = T.Tensor(out.trans.data + 3.0)
    assert total_loss(out, samples[1], LossWeights(0, 0, 0, 0, 0)).item() == 0.0
    assert total_loss(out, samples[1]).item() > 0.0


def test_total_loss_is_weighted_sum(samples):
    s = samples[2]
    out = _perfect_output(s)
    out.trans = T.Tensor(out.trans.data + np.array([0.3, -2.0, 1.0]))
    out.rot = T.Tensor(out.rot.data + np.array([4.0, 0.0, -0.2]))
    w = LossWeights(0.7, 1.3, 0.2, 0.4, 0.9)
    loss, terms = total_loss(out, s, w, return_terms=True)
    assert loss.item() == pytest.approx(float(np.dot(w.as_tuple(), terms)), rel=1e-12)


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(trans=-1.0)


def test_resample_slice_matches_extract(samples):
    s = samples[3]
    pose = T.Tensor(s.pose_gt.as_vector())
    out = resample_slice(s.volume, pose, TOY.slice_spec)
    np.testing.assert_array_equal(out.data, extract_slice(s.volume, s.pose_gt, TOY.slice_spec).data)
    with pytest.raises(T.ShapeError):
        resample_slice(s.volume, T.Tensor(np.zeros(5)), TOY.slice_spec)


# ---------------------------------------------------------------- evaluation loop


def test_oracle_evaluate_is_perfect(samples):
    rep = evaluate(samples, lambda s: s.pose_gt)
    for r in rep.rows:
        assert r["dist_err"] == 0.0 and r["te"] == 0.0 and r["re"] == 0.0
        assert r["img_ncc"] == pytest.approx(100.0, abs=1e-9)
        assert r["img_ssim"] == pytest.approx(100.0, abs=1e-9)
        assert r["para_ncc"] == pytest.approx(100.0, abs=1e-9)
    assert rep.para_ncc_per_parameter == pytest.approx(100.0, abs=1e-9)


def test_evaluate_means_are_row_means(samples):
    rep = evaluate(samples, lambda s: Pose())
    for k in METRIC_KEYS:
        assert rep.means[k] == pytest.approx(float(np.mean([r[k] for r in rep.rows])), abs=1e-9)
    table = rep.to_table().splitlines()
    assert table[0].split("\t") == ["index", *METRIC_KEYS]
    assert len(table) == len(samples) + 2 and table[-1].startswith("mean")


def test_evaluate_accepts_vectors_and_predictions(samples):
    a = evaluate(samples[:2], lambda s: s.pose_gt.as_vector())
    assert all(r["dist_err"] == 0.0 for r in a.rows)
    with pytest.raises(ValueError):
        evaluate([], lambda s: Pose())


def test_identity_dist_err_is_positive(samples):
    errs = [dist_err(Pose(), s.pose_gt, TOY.slice_spec, TOY.volume_spec) for s in samples]
    assert min(errs) > 0
