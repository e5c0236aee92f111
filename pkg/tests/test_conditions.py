import numpy as np
import pytest

from _helpers import central_fd, textured_ramp
from ccfuse.conditions import (
    BASIC,
    ENHANCED,
    TASK_SPECIFIC,
    ConditionSet,
    ConditionSpec,
    FeatureOperator,
    IdentityOperator,
    combined_loss,
    cond_edge,
    cond_feature,
    cond_highfreq,
    cond_lowfreq,
    cond_mse,
    cond_mse_pyramid,
    cond_ssim,
    cond_stat_hinge,
    default_condition_set,
    eval_condition,
    known_conditions,
)
from ccfuse.errors import DimensionError, ParamError, ShapeMismatch, UnknownCondition
from ccfuse.metrics import metric_ssim
from ccfuse.signal_ops import WaveletPyramid, downsample2, grad_magnitude, haar_dwt, haar_idwt, sobel_grad, upsample2


def _fd_check(spec, x0, sources):
    _, g = eval_condition(spec, x0, sources)
    num = central_fd(lambda y: eval_condition(spec, y, sources)[0], x0)
    np.testing.assert_allclose(g, num, rtol=1e-3, atol=1e-8)


@pytest.mark.parametrize("cid", known_conditions())
def test_gradient_matches_finite_differences(cid):
    rng = np.random.default_rng(7)
    for _ in range(2):
        x0 = textured_ramp(rng)
        sources = [rng.random((16, 16, 1)) for _ in range(2)]
        _fd_check(ConditionSpec(cid), x0, sources)


@pytest.mark.parametrize("cid,params", [
    ("mse_pyramid", {"lam_mse": 0.2, "verbatim_sign": 1}),
    ("hf", {"lam_h": 0.8, "levels": 2, "band_only": 1}),
    ("lf", {"lam_l": 0.3, "levels": 2, "band_only": 1}),
    ("edge", {"lam_e": 0.9}),
    ("ssim", {"aggregate_mean": 1}),
    ("feature", {"seed": 3, "channels": 4, "stride": 3}),
])
def test_gradient_with_non_default_params(cid, params):
    rng = np.random.default_rng(11)
    x0 = textured_ramp(rng)
    sources = [rng.random((16, 16, 1)) for _ in range(2)]
    _fd_check(ConditionSpec(cid, ENHANCED, params), x0, sources)


def test_gradient_color_image():
    rng = np.random.default_rng(2)
    x0 = np.concatenate([0.5 * rng.random((12, 12, 1)) + 0.25 for _ in range(3)], axis=2)
    sources = [rng.random((12, 12, 3)) for _ in range(2)]
    for cid in ("mse", "hf", "sf", "ssim"):
        _fd_check(ConditionSpec(cid), x0, sources)


# --------------------------------------------------------------------------
# per-condition closed forms
# --------------------------------------------------------------------------


def test_mse_values_and_midpoint_stationarity(rng):
    i, v = rng.random((8, 8, 1)), rng.random((8, 8, 1))
    loss, _ = cond_mse(np.zeros((8, 8, 1)), [np.ones((8, 8, 1)), np.full((8, 8, 1), 0.5)])
    assert loss == 1.25
    _, g = cond_mse((i + v) / 2, [i, v])
    assert np.all(g == 0.0)


def test_mse_pyramid_zero_sets(rng):
    yy, xx = np.mgrid[0:8, 0:8]
    affine = (0.1 + 0.03 * xx + 0.02 * yy)[:, :, None].astype(float)
    loss_a, _ = cond_mse_pyramid(affine, rng.random((8, 8, 1)), lam_mse=1.0)
    # bilinear reproduces affine images away from the clamped border
    resid = affine - upsample2(downsample2(affine))
    assert np.abs(resid[1:-1, 1:-1]).max() < 1e-12
    assert loss_a == pytest.approx(float(np.mean(resid**2)), abs=1e-15)
    x = rng.random((8, 8, 1))
    assert cond_mse_pyramid(x, x, 0.3)[0] == pytest.approx(cond_mse_pyramid(x, rng.random((8, 8, 1)), 1.0)[0], abs=1e-15)


def test_mse_pyramid_verbatim_sign_differs(rng):
    x, y = rng.random((8, 8, 1)), rng.random((8, 8, 1))
    assert cond_mse_pyramid(x, y, 0.5, verbatim_sign=True)[0] != cond_mse_pyramid(x, y, 0.5)[0]


def test_mse_pyramid_odd_size():
    with pytest.raises(DimensionError):
        cond_mse_pyramid(np.zeros((7, 8, 1)), np.zeros((7, 8, 1)))


def test_edge_examples(rng):
    x = rng.random((8, 8, 1))
    mag = grad_magnitude(*sobel_grad(x), 1e-6)
    loss, _ = cond_edge(x, x, x, lam_e=0.5)
    assert loss == pytest.approx(float(np.mean((0.5 * mag) ** 2)), rel=1e-12)
    c = np.full((8, 8, 1), 0.4)
    assert cond_edge(c, c, c)[0] < 1e-12


def test_highfreq_examples(rng):
    x = rng.random((4, 4, 1))
    pyr = haar_dwt(x)
    ll_only = haar_idwt(WaveletPyramid(pyr.ll, [tuple(np.zeros_like(b) for b in pyr.details[0])]))
    assert cond_highfreq(x, x, x, lam_h=1.0)[0] == pytest.approx(float(np.mean(ll_only**2)), rel=1e-12)
    c = np.full((8, 8, 1), 0.3)
    assert cond_highfreq(c, c, c)[0] == pytest.approx(0.09, rel=1e-12)
    assert cond_highfreq(c, c, c, band_only=True)[0] == 0.0


def test_highfreq_sign_preserving_selection():
    # one 2x2 block: HL coefficient of i is +0.4, of v is -0.6; v wins by magnitude
    i = np.array([[0.7, 0.3], [0.7, 0.3]])[:, :, None]
    v = np.array([[0.2, 0.8], [0.2, 0.8]])[:, :, None]
    assert haar_dwt(i).details[0][0][0, 0, 0] == pytest.approx(0.4)
    assert haar_dwt(v).details[0][0][0, 0, 0] == pytest.approx(-0.6)
    # x0 with exactly that HL coefficient and zero LL has zero loss (lam_h = 0.5 halves both)
    x0 = np.array([[-0.15, 0.15], [-0.15, 0.15]])[:, :, None]
    assert haar_dwt(x0).details[0][0][0, 0, 0] == pytest.approx(-0.3)
    assert cond_highfreq(x0, i, v, lam_h=0.5)[0] == pytest.approx(0.0, abs=1e-30)


def test_lowfreq_examples(rng):
    i, v = np.full((8, 8, 1), 0.2), np.full((8, 8, 1), 0.6)
    assert cond_lowfreq(0.25 * i + 0.75 * v, i, v, lam_l=0.25)[0] == pytest.approx(0.0, abs=1e-30)
    x = rng.random((8, 8, 1))
    hf_energy = float(np.sum(x**2) - np.sum(haar_dwt(x).ll ** 2))
    assert cond_lowfreq(x, x, x)[0] == pytest.approx(hf_energy / x.size, rel=1e-10)
    assert cond_lowfreq(x, x, x, band_only=True)[0] == pytest.approx(0.0, abs=1e-30)


@pytest.mark.parametrize("stat", ["sd", "sf", "ei"])
def test_stat_hinge_inactive_when_ahead(rng, stat):
    src = [0.5 + 0.01 * rng.random((8, 8, 1)) for _ in range(2)]
    x0 = rng.random((8, 8, 1))
    loss, g = cond_stat_hinge(x0, src, stat)
    assert loss == 0.0 and np.all(g == 0.0)


def test_stat_hinge_constant_x0_sd(rng):
    src = [rng.random((8, 8, 1)), 0.5 * rng.random((8, 8, 1))]
    loss, _ = cond_stat_hinge(np.full((8, 8, 1), 0.5), src, "sd")
    assert loss == pytest.approx(max(np.std(s) for s in src) ** 2, rel=1e-12)


def test_ssim_condition(rng):
    x = rng.random((12, 12, 1))
    assert cond_ssim(x, [x, x])[0] == 0.0
    # inverted checkerboard against the checkerboard: negative SSIM, loss above 1
    cb = (np.indices((11, 11)).sum(axis=0) % 2).astype(float)[:, :, None]
    assert metric_ssim(1 - cb, cb) < 0
    assert cond_ssim(1 - cb, [cb])[0] > 1.0
    two = cond_ssim(x, [rng.random((12, 12, 1)), rng.random((12, 12, 1))])
    mean = cond_ssim(x, [rng.random((12, 12, 1)), rng.random((12, 12, 1))], aggregate_mean=True)
    assert two[0] > 0 and mean[0] > 0


def test_feature_condition(rng):
    x = rng.random((8, 8, 1))
    assert cond_feature(x, [x])[0] == 0.0
    srcs = [rng.random((8, 8, 1)), rng.random((8, 8, 1))]
    l_id, g_id = cond_feature(x, srcs, IdentityOperator())
    l_mse, g_mse = cond_mse(x, srcs)
    assert l_id == pytest.approx(l_mse, rel=1e-14)
    np.testing.assert_allclose(g_id, g_mse, atol=1e-16)


def test_feature_operator_adjoint(rng):
    op = FeatureOperator(2, 5, stride=2, seed=1)
    x = rng.random((7, 9, 2))
    y = rng.random(op.forward(x).shape)
    assert op.forward(x).shape == (4, 5, 5)
    assert np.sum(op.forward(x) * y) == pytest.approx(np.sum(x * op.adjoint(y, x.shape)), rel=1e-12)


# --------------------------------------------------------------------------
# specs, sets and the combined loss
# --------------------------------------------------------------------------


def test_spec_validation():
    with pytest.raises(UnknownCondition):
        ConditionSpec("nope")
    with pytest.raises(ParamError):
        ConditionSpec("mse", "sometimes")
    with pytest.raises(ParamError):
        ConditionSpec("hf", ENHANCED, {"lam_x": 0.1})
    with pytest.raises(ParamError):
        ConditionSpec("hf", ENHANCED, {"lam_h": 1.5})
    assert ConditionSpec("hf", ENHANCED, {"lam_h": 0.2}).param("lam_h") == 0.2
    assert ConditionSpec("hf").param("levels") == 1.0


def test_set_validation():
    mse = ConditionSpec("mse", BASIC)
    with pytest.raises(ParamError):
        ConditionSet(basic=())
    with pytest.raises(ParamError):
        ConditionSet(basic=((mse, -1.0),))
    with pytest.raises(ParamError):
        ConditionSet(basic=((mse, 1.0),), guidance_scale=-0.1)
    with pytest.raises(ParamError):
        ConditionSet(basic=((mse, 1.0),), enhanced=(ConditionSpec("sd"), ConditionSpec("sd")))
    cs = ConditionSet(basic=((mse, 1.0),), enhanced=(ConditionSpec("sd"), ConditionSpec("mse")))
    with pytest.raises(IndexError):
        cs.active([2])


def test_eval_condition_errors(rng):
    x = rng.random((8, 8, 1))
    with pytest.raises(ShapeMismatch):
        eval_condition(ConditionSpec("mse"), x, [x, rng.random((8, 9, 1))])
    with pytest.raises(ParamError):
        eval_condition(ConditionSpec("hf"), x, [x])
    with pytest.raises(ParamError):
        eval_condition(ConditionSpec("mse"), x, [])


def _four_basic(etas):
    ids = ("mse_pyramid", "hf", "lf", "edge")
    return ConditionSet(basic=tuple((ConditionSpec(c, BASIC), e) for c, e in zip(ids, etas)))


def test_combined_loss_additive_and_homogeneous(rng):
    x = rng.random((16, 16, 1))
    srcs = [rng.random((16, 16, 1)) for _ in range(2)]
    total, grad = combined_loss(_four_basic([1, 1, 1, 1]), [], x, srcs)
    parts = [eval_condition(ConditionSpec(c), x, srcs) for c in ("mse_pyramid", "hf", "lf", "edge")]
    assert total == pytest.approx(sum(p[0] for p in parts), abs=1e-12)
    np.testing.assert_allclose(grad, sum(p[1] for p in parts), atol=1e-12)
    t2, g2 = combined_loss(_four_basic([2.6, 2.6, 2.6, 2.6]), [], x, srcs)
    assert t2 == pytest.approx(2.6 * total, rel=1e-12)
    np.testing.assert_allclose(g2, 2.6 * grad, rtol=1e-12, atol=1e-15)
    zero, gz = combined_loss(_four_basic([0, 0, 0, 0]), [], x, srcs)
    assert zero == 0.0 and np.all(gz == 0)


def test_combined_loss_includes_selected_and_task_specific(rng):
    x = rng.random((16, 16, 1))
    srcs = [rng.random((16, 16, 1)) for _ in range(2)]
    cs = ConditionSet(
        basic=((ConditionSpec("mse", BASIC), 1.0),),
        enhanced=(ConditionSpec("sd"), ConditionSpec("ssim")),
        task_specific=(ConditionSpec("feature", TASK_SPECIFIC),),
    )
    expect = sum(eval_condition(ConditionSpec(c), x, srcs)[0] for c in ("mse", "ssim", "feature"))
    assert combined_loss(cs, [1], x, srcs)[0] == pytest.approx(expect, rel=1e-12)


def test_default_condition_sets():
    vif = default_condition_set("vif")
    assert [s.id for s, _ in vif.basic] == ["mse"]
    mff = default_condition_set("mff", params={"hf": {"lam_h": 0.7}})
    assert [s.id for s, _ in mff.basic] == ["mse_pyramid", "hf", "lf", "edge"]
    assert mff.basic[1][0].param("lam_h") == 0.7
    assert len(mff.enhanced) == 8
    with pytest.raises(ParamError):
        default_condition_set("xyz")
