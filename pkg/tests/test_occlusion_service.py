import numpy as np
import pytest

from app.core.errors import ShapeError
from app.schemas.fields import FlowField, OcclusionMask
from app.services.occlusion_service import (
    backward_at_forward,
    occlusion_aware_loss,
    occlusion_mask,
    occlusion_masks,
)


def test_backward_at_zero_forward_is_backward(rng):
    Mb = FlowField(u=rng.normal(size=(5, 5)), v=rng.normal(size=(5, 5)))
    out = backward_at_forward(FlowField.zeros(5, 5), Mb)
    assert np.array_equal(out.as_array(), Mb.as_array())


def test_constant_backward_is_unchanged(rng):
    Mf = FlowField(u=rng.normal(0, 3, (5, 5)), v=rng.normal(0, 3, (5, 5)))
    out = backward_at_forward(Mf, FlowField.constant(5, 5, 0.7, -1.1))
    np.testing.assert_allclose(out.u, 0.7)
    np.testing.assert_allclose(out.v, -1.1)


def test_backward_sampled_one_column_right():
    ramp = np.tile(np.arange(4, dtype=float), (4, 1))
    out = backward_at_forward(FlowField.constant(4, 4, 1.0, 0.0), FlowField(u=ramp, v=np.zeros((4, 4))))
    np.testing.assert_array_equal(out.u[0], [1, 2, 3, 3])


def test_cancelling_flows_are_visible():
    mask = occlusion_mask(FlowField.constant(6, 6, 5, 0), FlowField.constant(6, 6, -5, 0))
    assert not mask.flags.any()


def test_forward_only_motion_is_occluded():
    mask = occlusion_mask(FlowField.constant(6, 6, 5, 0), FlowField.zeros(6, 6))
    assert mask.flags.all()


def test_zero_flows_are_visible():
    assert not occlusion_mask(FlowField.zeros(4, 4), FlowField.zeros(4, 4)).flags.any()


def test_equality_counts_as_occluded():
    # |Mf + Mb|^2 = 0.5 and alpha1 = 0 puts the pixel exactly on the threshold
    Mf = FlowField.constant(3, 3, 0.5, 0.5)
    mask = occlusion_mask(Mf, FlowField.zeros(3, 3), alpha1=0.0, alpha2=0.5)
    assert mask.flags.all()


def test_mask_shapes_must_agree():
    with pytest.raises(ShapeError):
        occlusion_mask(FlowField.zeros(3, 3), FlowField.zeros(3, 4))


def _moving_square(size=16, top=4, left=3, side=6, shift=3):
    """Foreground square moving `shift` columns right over a static background."""
    in_first = np.zeros((size, size), dtype=bool)
    in_first[top : top + side, left : left + side] = True
    in_second = np.zeros((size, size), dtype=bool)
    in_second[top : top + side, left + shift : left + side + shift] = True

    Mf = FlowField(u=np.where(in_first, float(shift), 0.0), v=np.zeros((size, size)))
    Mb = FlowField(u=np.where(in_second, -float(shift), 0.0), v=np.zeros((size, size)))
    return Mf, Mb, in_first, in_second


def _hidden_by_round_trip(Mf: FlowField, Mb: FlowField) -> np.ndarray:
    """Pixel by pixel: does the forward-displaced location map back to within 0.5 px?"""
    height, width = Mf.shape
    hidden = np.zeros((height, width), dtype=bool)
    for y in range(height):
        for x in range(width):
            tx, ty = x + Mf.u[y, x], y + Mf.v[y, x]
            col, row = int(np.floor(tx + 0.5)), int(np.floor(ty + 0.5))
            if not (0 <= row < height and 0 <= col < width):
                hidden[y, x] = True
                continue
            bx, by = tx + Mb.u[row, col], ty + Mb.v[row, col]
            hidden[y, x] = np.hypot(bx - x, by - y) > 0.5
    return hidden


def test_disocclusion_band_matches_visibility():
    Mf, Mb, in_first, in_second = _moving_square()
    of, ob = occlusion_masks(Mf, Mb)

    forward_hidden = _hidden_by_round_trip(Mf, Mb)
    backward_hidden = _hidden_by_round_trip(Mb, Mf)
    assert (of.flags.astype(bool) == forward_hidden).mean() >= 0.95
    assert (ob.flags.astype(bool) == backward_hidden).mean() >= 0.95

    # the band behind the square's leading edge is covered in the second frame
    band = in_second & ~in_first
    assert band.sum() == 18
    assert forward_hidden[band].all()
    assert of.flags[band].all()


def test_aware_loss_without_occlusion_is_sum_of_means(rng):
    Lf = rng.random((5, 5))
    Lb = rng.random((5, 5))
    clear = OcclusionMask(flags=np.zeros((5, 5)))
    report = occlusion_aware_loss(Lf, Lb, clear, clear)
    assert report.total == pytest.approx(Lf.mean() + Lb.mean(), rel=1e-12)
    assert report.diagnostics == []


def test_aware_loss_ignores_occluded_pixels(rng):
    Lf = rng.random((4, 4))
    flags = np.zeros((4, 4))
    flags[:2] = 1
    report = occlusion_aware_loss(Lf, Lf, OcclusionMask(flags=flags), OcclusionMask(flags=np.zeros((4, 4))))
    assert report.raw("forward") == pytest.approx(Lf[2:].mean(), rel=1e-12)
    assert report.raw("backward") == pytest.approx(Lf.mean(), rel=1e-12)


def test_fully_occluded_directions_are_diagnosed(rng):
    full = OcclusionMask(flags=np.ones((3, 3)))
    report = occlusion_aware_loss(rng.random((3, 3)), rng.random((3, 3)), full, full)
    assert report.total == 0.0
    assert report.diagnostics == ["forward direction fully occluded", "backward direction fully occluded"]


def test_mask_must_be_binary():
    with pytest.raises(ValueError):
        OcclusionMask(flags=np.full((2, 2), 2))
