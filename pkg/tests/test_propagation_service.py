import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from app.core.errors import InvalidArgumentError, ShapeError
from app.schemas.fields import VOID, FlowField, Image, LabelMap, Logits
from app.services.propagation_service import (
    boundary_mask,
    confusion_matrix,
    cross_entropy_map,
    joint_propagate,
    miou,
    pixel_entropy,
    propagate_sequence,
    relaxed_loss,
    relaxed_loss_map,
)
from app.services.warp_service import round_half_up, source_coordinates
from tests.conftest import central_difference, relative_error

A, B, C = 0, 1, 2


def test_fractional_label_ids_are_rejected():
    with pytest.raises(ValidationError, match="whole numbers"):
        LabelMap(ids=[[0.0, 2.7]])
    assert LabelMap(ids=np.array([[0.0, 2.0]])).ids.tolist() == [[0, 2]]


# ============================================
# Joint propagation
# ============================================

def test_zero_flow_keeps_frame_and_labels(rng):
    img = Image(data=rng.random((5, 5, 3)))
    labels = LabelMap(ids=rng.integers(0, 4, (5, 5)))
    out_img, out_labels = joint_propagate(img, labels, FlowField.zeros(5, 5))
    assert np.array_equal(out_img.data, img.data)
    assert np.array_equal(out_labels.ids, labels.ids)


def test_integer_translation_moves_both_alike(rng):
    img = Image(data=rng.random((6, 6)))
    labels = LabelMap(ids=np.tile(np.arange(6), (6, 1)))
    out_img, out_labels = joint_propagate(img, labels, FlowField.constant(6, 6, 1.0, 0.0))
    np.testing.assert_array_equal(out_img.data[:, :5], img.data[:, 1:])
    np.testing.assert_array_equal(out_labels.ids[:, :5], labels.ids[:, 1:])
    # the image clamps where the labels go VOID
    assert np.all(out_labels.ids[:, 5] == VOID)
    np.testing.assert_array_equal(out_img.data[:, 5], img.data[:, 5])


def test_shape_mismatch_is_rejected(rng):
    with pytest.raises(ShapeError):
        joint_propagate(Image(data=rng.random((4, 4))), LabelMap(ids=np.zeros((4, 5))), FlowField.zeros(4, 4))


@pytest.mark.parametrize("seed", range(10))
def test_labels_and_frame_sample_the_same_source(seed):
    rng = np.random.default_rng(seed)
    size = 10
    rows, cols = np.mgrid[0:size, 0:size]
    # red encodes the column, green the row, so the warped frame reveals its source coordinates
    coords = Image(data=np.stack([cols / (size - 1), rows / (size - 1), np.zeros((size, size))], axis=-1))
    labels = LabelMap(ids=rows * size + cols)
    flow = FlowField(u=rng.normal(0, 3, (size, size)), v=rng.normal(0, 3, (size, size)))

    warped, warped_labels = joint_propagate(coords, labels, flow)
    x_img = round_half_up(warped.data[..., 0] * (size - 1))
    y_img = round_half_up(warped.data[..., 1] * (size - 1))
    inside = warped_labels.ids != VOID
    assert np.array_equal(warped_labels.ids[inside] // size, y_img[inside])
    assert np.array_equal(warped_labels.ids[inside] % size, x_img[inside])

    x, y = source_coordinates(flow)
    expected_inside = (round_half_up(x) >= 0) & (round_half_up(x) <= size - 1) & (round_half_up(y) >= 0) & (round_half_up(y) <= size - 1)
    assert np.array_equal(inside, expected_inside)


def test_propagate_sequence_chains_steps(rng):
    img = Image(data=rng.random((6, 6)))
    labels = LabelMap(ids=rng.integers(0, 3, (6, 6)))
    flows = [FlowField.constant(6, 6, 1.0, 0.0), FlowField.constant(6, 6, 0.0, 1.0)]
    samples = propagate_sequence(img, labels, flows)
    assert len(samples) == 2
    again = joint_propagate(*joint_propagate(img, labels, flows[0]), flows[1])
    assert np.array_equal(samples[1][0].data, again[0].data)
    assert np.array_equal(samples[1][1].ids, again[1].ids)


# ============================================
# Boundaries
# ============================================

def test_uniform_map_has_no_boundary():
    assert not boundary_mask(LabelMap(ids=np.full((4, 4), 2))).any()


def test_diagonal_neighbour_is_a_boundary():
    assert boundary_mask(LabelMap(ids=[[A, A], [A, B]])).all()


def test_void_does_not_create_boundaries():
    assert not boundary_mask(LabelMap(ids=[[A, VOID], [A, A]])).any()


@settings(max_examples=50)
@given(seed=st.integers(0, 10_000))
def test_boundary_mask_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    ids = rng.choice([A, B, C, VOID], size=(6, 6), p=[0.4, 0.3, 0.2, 0.1])
    flagged = boundary_mask(LabelMap(ids=ids))
    for r, c in zip(*np.nonzero(flagged)):
        window = ids[max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2]
        flags = flagged[max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2]
        differing = (window != VOID) & (window != ids[r, c])
        assert differing.any()
        assert flags[differing].all()


# ============================================
# Relaxation
# ============================================

def _logits_from_probs(probs, shape):
    return Logits(scores=np.broadcast_to(np.log(probs), shape + (len(probs),)))


def test_interior_pixels_reduce_to_cross_entropy(rng):
    logits = Logits(scores=rng.normal(size=(5, 5, 3)))
    labels = LabelMap(ids=np.full((5, 5), B))
    value, _ = relaxed_loss(logits, labels)
    assert value == pytest.approx(float(cross_entropy_map(logits, labels).mean()), abs=1e-12)


def test_boundary_pixel_uses_union_probability():
    logits = _logits_from_probs([0.3, 0.6, 0.1], (1, 2))
    value, _ = relaxed_loss(logits, LabelMap(ids=[[A, B]]))
    assert value == pytest.approx(-math.log(0.9), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_relaxed_never_exceeds_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    logits = Logits(scores=rng.normal(0, 3, size=(5, 5, 4)))
    labels = LabelMap(ids=rng.choice([0, 1, 2, 3, VOID], size=(5, 5)))
    relaxed = relaxed_loss_map(logits, labels)
    standard = cross_entropy_map(logits, labels)
    valid = labels.valid
    assert np.all(relaxed[valid] <= standard[valid] + 1e-12)
    assert np.all(np.isnan(relaxed[~valid]))


@pytest.mark.parametrize("seed", range(20))
def test_relaxed_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(500 + seed)
    scores = rng.normal(size=(4, 4, 3))
    labels = LabelMap(ids=rng.choice([A, B, C, VOID], size=(4, 4), p=[0.35, 0.35, 0.2, 0.1]))
    if not labels.valid.any():
        labels = LabelMap(ids=np.zeros((4, 4)))
    _, grad = relaxed_loss(Logits(scores=scores), labels)
    numeric = central_difference(lambda s: relaxed_loss(Logits(scores=s), labels)[0], scores)
    assert relative_error(grad, numeric) < 1e-4


def test_all_void_labels_are_rejected(rng):
    with pytest.raises(InvalidArgumentError):
        relaxed_loss(Logits(scores=rng.normal(size=(3, 3, 2))), LabelMap(ids=np.full((3, 3), VOID)))


def test_out_of_range_label_is_rejected(rng):
    with pytest.raises(InvalidArgumentError):
        relaxed_loss(Logits(scores=rng.normal(size=(3, 3, 2))), LabelMap(ids=np.full((3, 3), 5)))


def test_entropy_of_uniform_scores_is_log_classes():
    entropy = pixel_entropy(Logits(scores=np.zeros((2, 3, 4))))
    np.testing.assert_allclose(entropy, math.log(4))


# ============================================
# mIoU
# ============================================

def test_perfect_prediction_scores_one(rng):
    ids = rng.integers(0, 3, (4, 4))
    _, mean = miou(LabelMap(ids=ids), LabelMap(ids=ids), 3)
    assert mean == 1.0


def test_hand_counted_miou():
    per_class, mean = miou(LabelMap(ids=[[A, A, B, B]]), LabelMap(ids=[[A, B, B, B]]), 2)
    assert per_class == [pytest.approx(0.5), pytest.approx(2 / 3)]
    assert mean == pytest.approx(7 / 12, abs=1e-12)


def test_void_ground_truth_is_ignored():
    pred = LabelMap(ids=[[A, B], [B, B]])
    gt = LabelMap(ids=[[A, VOID], [VOID, VOID]])
    per_class, mean = miou(pred, gt, 2)
    assert mean == 1.0
    assert per_class[B] is None


def test_no_valid_ground_truth_raises():
    with pytest.raises(InvalidArgumentError):
        miou(LabelMap(ids=[[A]]), LabelMap(ids=[[VOID]]), 2)


def test_void_predictions_land_in_extra_column():
    hist = confusion_matrix(LabelMap(ids=[[VOID, A]]), LabelMap(ids=[[A, A]]), 2)
    np.testing.assert_array_equal(hist, [[1, 0, 1], [0, 0, 0]])


@settings(max_examples=40)
@given(seed=st.integers(0, 10_000))
def test_miou_is_invariant_to_relabelling(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 4, (5, 5))
    gt = rng.integers(0, 4, (5, 5))
    perm = rng.permutation(4)
    _, before = miou(LabelMap(ids=pred), LabelMap(ids=gt), 4)
    _, after = miou(LabelMap(ids=perm[pred]), LabelMap(ids=perm[gt]), 4)
    assert after == pytest.approx(before, rel=1e-12)
