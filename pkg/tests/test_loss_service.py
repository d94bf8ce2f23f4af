import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from app.core.errors import InvalidArgumentError
from app.schemas.fields import FlowField, Image
from app.schemas.losses import LossReport, LossTerm, LossWeights
from app.services.loss_service import (
    census_distance,
    census_distance_map,
    charbonnier,
    charbonnier_grad,
    epe,
    fl_outliers,
    guided_loss,
    multiscale_loss,
    pixel_loss,
    pixel_loss_map,
    scale_loss,
    smoothness_loss,
    ssim,
    ssim_loss,
    ssim_loss_flow_gradient,
    total_loss,
)
from tests.conftest import central_difference, fractional_flow, relative_error

W = LossWeights()
FLOOR = (W.epsilon ** 2) ** W.alpha_pixel


# ============================================
# Charbonnier
# ============================================

def test_charbonnier_reference_values():
    assert charbonnier(0.0, 0.45, 0.001) == pytest.approx(1.9953e-3, rel=1e-4)
    assert charbonnier(1.0, 0.45, 0.001) == pytest.approx(1.00000045, rel=1e-9)


def test_charbonnier_requires_positive_epsilon():
    with pytest.raises(InvalidArgumentError):
        charbonnier(0.5, 0.45, 0.0)


@settings(max_examples=100)
@given(x=st.floats(-50, 50), alpha=st.floats(0.1, 1.0))
def test_charbonnier_is_even(x, alpha):
    assert charbonnier(-x, alpha, 0.001) == charbonnier(x, alpha, 0.001)


@settings(max_examples=100)
@given(a=st.floats(0, 20), b=st.floats(0, 20))
def test_charbonnier_increases_with_magnitude(a, b):
    if a < b:
        assert charbonnier(a, 0.45, 0.001) <= charbonnier(b, 0.45, 0.001)


def test_charbonnier_grad_matches_finite_differences(rng):
    x = rng.normal(0, 1, 50)
    numeric = np.array([(charbonnier(v + 1e-6, 0.4, 0.01) - charbonnier(v - 1e-6, 0.4, 0.01)) / 2e-6 for v in x])
    np.testing.assert_allclose(charbonnier_grad(x, 0.4, 0.01), numeric, rtol=1e-5)


# ============================================
# Pixel term
# ============================================

def test_pixel_loss_floor_for_identical_frames(rng):
    img = Image(data=rng.random((6, 6, 3)))
    value, grad = pixel_loss(img, img, FlowField.zeros(6, 6), W)
    assert value == pytest.approx(FLOOR, rel=1e-12)
    assert np.allclose(grad.as_array(), 0.0)


def test_pixel_loss_map_is_floor_where_translation_is_exact(translated_pair):
    I1, I2 = translated_pair
    loss_map = pixel_loss_map(I1, I2, FlowField.constant(64, 64, 2.0, 1.0), W)
    np.testing.assert_allclose(loss_map[:63, :62], FLOOR, rtol=1e-12)


def test_masked_pixel_loss_is_mean_over_mask(rng):
    I1 = Image(data=rng.random((6, 6)))
    I2 = Image(data=rng.random((6, 6)))
    flow = fractional_flow(rng, 6, 6, scale=1)
    mask = rng.random((6, 6)) > 0.5
    value, _ = pixel_loss(I1, I2, flow, W, mask=mask)
    assert value == pytest.approx(pixel_loss_map(I1, I2, flow, W)[mask].mean(), rel=1e-12)


def test_empty_mask_gives_zero_loss(rng):
    img = Image(data=rng.random((5, 5)))
    value, grad = pixel_loss(img, img, FlowField.zeros(5, 5), W, mask=np.zeros((5, 5)))
    assert value == 0.0
    assert not grad.as_array().any()


@pytest.mark.parametrize("seed", range(20))
def test_pixel_loss_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    channels = 3 if seed % 2 else 1
    I1 = Image(data=rng.random((6, 6, channels)))
    I2 = Image(data=rng.random((6, 6, channels)))
    flow = fractional_flow(rng, 6, 6, scale=1)
    _, grad = pixel_loss(I1, I2, flow, W)

    def f(uv):
        return pixel_loss(I1, I2, FlowField.from_array(uv), W)[0]

    numeric = central_difference(f, flow.as_array())
    assert relative_error(grad.as_array(), numeric) < 1e-4


# ============================================
# Smoothness term
# ============================================

def test_constant_flow_is_smoothness_floor():
    value, _ = smoothness_loss(FlowField.constant(5, 5, 1.3, -2.0), W)
    assert value == pytest.approx((W.epsilon ** 2) ** W.alpha_smooth, rel=1e-12)


def test_linear_ramp_has_no_second_order_penalty():
    ramp = np.tile(np.arange(6, dtype=float), (6, 1))
    value, _ = smoothness_loss(FlowField(u=ramp, v=np.zeros((6, 6))), W, order=2)
    assert value == pytest.approx((W.epsilon ** 2) ** W.alpha_smooth, rel=1e-12)


def test_smoothness_rejects_unknown_order():
    with pytest.raises(InvalidArgumentError):
        smoothness_loss(FlowField.zeros(4, 4), W, order=3)


@pytest.mark.parametrize("order", [1, 2])
@pytest.mark.parametrize("seed", range(20))
def test_smoothness_gradient_matches_finite_differences(seed, order):
    rng = np.random.default_rng(100 + seed)
    flow = FlowField(u=rng.normal(0, 1, (6, 7)), v=rng.normal(0, 1, (6, 7)))
    _, grad = smoothness_loss(flow, W, order)
    numeric = central_difference(lambda uv: smoothness_loss(FlowField.from_array(uv), W, order)[0], flow.as_array())
    assert relative_error(grad.as_array(), numeric) < 1e-4


# ============================================
# SSIM
# ============================================

def test_ssim_of_identical_patches_is_one(rng):
    patch = rng.random((8, 8))
    assert ssim(patch, patch) == pytest.approx(1.0, abs=1e-15)


def test_ssim_constant_patches():
    value = ssim(np.zeros((8, 8)), np.ones((8, 8)), c1=1e-4, c2=1e-3)
    assert value == pytest.approx(1e-4 / (1 + 1e-4), rel=1e-12)


def test_ssim_loss_zero_for_identical_images(rng):
    img = Image(data=rng.random((16, 16)))
    value, _ = ssim_loss(img, img)
    assert value == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ssim_loss_bounded(seed):
    rng = np.random.default_rng(seed)
    value, _ = ssim_loss(Image(data=rng.random((16, 16))), Image(data=rng.random((16, 16))))
    assert 0.0 <= value <= 2.0


def test_ssim_loss_requires_one_patch(rng):
    with pytest.raises(InvalidArgumentError):
        ssim_loss(Image(data=rng.random((7, 16))), Image(data=rng.random((7, 16))))


@pytest.mark.parametrize("seed", range(20))
def test_ssim_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    I1 = Image(data=rng.uniform(0.1, 0.9, (16, 16)))
    rec = rng.uniform(0.1, 0.9, (16, 16, 1))
    _, grad = ssim_loss(I1, Image(data=rec))
    numeric = central_difference(lambda x: ssim_loss(I1, Image(data=x))[0], rec, h=1e-6)
    assert relative_error(grad, numeric) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_ssim_flow_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(300 + seed)
    I1 = Image(data=rng.random((8, 8)))
    I2 = Image(data=rng.random((8, 8)))
    flow = fractional_flow(rng, 8, 8, scale=1)
    _, grad = ssim_loss_flow_gradient(I1, I2, flow)
    numeric = central_difference(lambda uv: ssim_loss_flow_gradient(I1, I2, FlowField.from_array(uv))[0], flow.as_array())
    assert relative_error(grad.as_array(), numeric) < 1e-3


# ============================================
# Census
# ============================================

CENSUS_FLOOR = 8 * (0.001 ** 2) ** 0.45


def test_census_floor_for_identical_images(rng):
    img = Image(data=rng.random((9, 9)))
    assert census_distance(img, img) == pytest.approx(CENSUS_FLOOR, rel=1e-12)


def test_census_ignores_affine_illumination(rng):
    levels = rng.integers(2, 14, size=(10, 10)) * 0.05
    img = Image(data=levels)
    brighter = Image(data=1.2 * levels + 0.05)
    assert census_distance(img, brighter) == pytest.approx(CENSUS_FLOOR, rel=1e-12)


def test_census_change_is_local():
    flat = np.full((9, 9), 0.5)
    flipped = flat.copy()
    flipped[4, 4] = 0.9
    changed = ~np.isclose(census_distance_map(Image(data=flat), Image(data=flipped)), CENSUS_FLOOR)
    rows, cols = np.nonzero(changed)
    assert 0 < changed.sum() <= 9
    assert rows.min() >= 3 and rows.max() <= 5 and cols.min() >= 3 and cols.max() <= 5


def test_census_requires_grayscale(rng):
    img = Image(data=rng.random((5, 5, 3)))
    with pytest.raises(InvalidArgumentError):
        census_distance(img, img)


# ============================================
# Combinations
# ============================================

def test_scale_loss_weights_terms():
    report = scale_loss(0.2, 0.1, 0.3, LossWeights(lambda2=0.5))
    assert report.total == pytest.approx(0.55, rel=1e-12)
    assert report.terms["smooth"].weighted == pytest.approx(0.05)


def test_scale_loss_with_zero_weights():
    assert scale_loss(0.2, 0.1, 0.3, LossWeights(lambda1=0, lambda2=0, lambda3=0)).total == 0.0


def test_total_loss_single_scale_is_identity():
    assert total_loss([0.7], [1.0]).total == pytest.approx(0.7)


def test_total_loss_equal_scales():
    assert total_loss([0.4, 0.4], [0.5, 0.5]).total == pytest.approx(0.4)


def test_total_loss_rejects_length_mismatch():
    with pytest.raises(InvalidArgumentError):
        total_loss([0.1, 0.2], [1.0])


def test_report_total_must_match_terms():
    with pytest.raises(ValidationError):
        LossReport(terms={"a": LossTerm(raw=1.0, weight=1.0, weighted=1.0)}, total=2.0)


def test_report_lines_end_with_total():
    lines = scale_loss(0.2, 0.1, 0.3, LossWeights(lambda2=0.5)).to_lines()
    assert lines == ["pixel=0.2", "smooth=0.1", "ssim=0.3", "total=0.55"]


def test_multiscale_loss_combines_five_scales(translated_pair):
    I1, I2 = translated_pair
    report = multiscale_loss(I1, I2, FlowField.constant(64, 64, 2.0, 1.0), W)
    assert list(report.terms) == [f"scale_{i}" for i in range(5)]
    assert [t.weight for t in report.terms.values()] == list(W.delta)
    assert report.diagnostics == ["ssim skipped at 4x4"]
    assert math.isclose(report.total, math.fsum(t.weighted for t in report.terms.values()), rel_tol=1e-12)


def test_original_unsupervised_exponents():
    w = LossWeights.original_unsupervised()
    assert (w.alpha_pixel, w.alpha_smooth) == (0.4, 0.3)


# ============================================
# Metrics
# ============================================

def test_epe_three_four_five():
    assert epe(FlowField.constant(4, 4, 3, 4), FlowField.zeros(4, 4)) == 5.0


def test_epe_mean_of_mixed_errors():
    u = np.array([[1.0, 3.0], [1.0, 3.0]])
    assert epe(FlowField(u=u, v=np.zeros((2, 2))), FlowField.zeros(2, 2)) == pytest.approx(2.0)


def test_epe_respects_valid_mask():
    u = np.array([[1.0, 3.0]])
    assert epe(FlowField(u=u, v=np.zeros((1, 2))), FlowField.zeros(1, 2), valid=np.array([[True, False]])) == 1.0


def test_epe_without_valid_pixels_raises():
    with pytest.raises(InvalidArgumentError):
        epe(FlowField.zeros(2, 2), FlowField.zeros(2, 2), valid=np.zeros((2, 2), dtype=bool))


@settings(max_examples=40)
@given(seed=st.integers(0, 10_000))
def test_metrics_are_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    flow = FlowField(u=rng.normal(0, 5, (4, 5)), v=rng.normal(0, 5, (4, 5)))
    gt = FlowField(u=rng.normal(0, 5, (4, 5)), v=rng.normal(0, 5, (4, 5)))
    perm = rng.permutation(20)

    def shuffle(f):
        return FlowField(u=f.u.ravel()[perm].reshape(4, 5), v=f.v.ravel()[perm].reshape(4, 5))

    assert epe(shuffle(flow), shuffle(gt)) == pytest.approx(epe(flow, gt), rel=1e-12)
    assert fl_outliers(shuffle(flow), shuffle(gt)) == fl_outliers(flow, gt)


def test_fl_needs_both_conditions():
    assert fl_outliers(FlowField.constant(3, 3, 96, 0), FlowField.constant(3, 3, 100, 0)) == 0.0
    assert fl_outliers(FlowField.zeros(3, 3), FlowField.constant(3, 3, 10, 0)) == 1.0
    assert fl_outliers(FlowField.zeros(3, 3), FlowField.zeros(3, 3)) == 0.0


def test_guided_loss_without_reconstruction_is_epe(rng):
    img = Image(data=rng.random((6, 6)))
    report = guided_loss(FlowField.constant(6, 6, 3, 4), FlowField.zeros(6, 6), img, img, lam=0.0)
    assert report.total == 5.0
    assert set(report.terms) == {"epe", "reconst"}


def test_guided_loss_at_proxy_is_floor(rng):
    img = Image(data=rng.random((6, 6)))
    report = guided_loss(FlowField.zeros(6, 6), FlowField.zeros(6, 6), img, img, lam=0.1)
    assert report.total == pytest.approx(0.1 * FLOOR, rel=1e-12)
