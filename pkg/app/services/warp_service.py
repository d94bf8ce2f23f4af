"""
Sampling and warping primitives shared by every other service.

Coordinates follow the Middlebury convention: x is the column, y the row,
u displaces columns and v displaces rows. Image sampling clamps to the
border; label sampling marks off-grid sources as VOID.
"""

import logging
from typing import Tuple

import numpy as np

from app.core.errors import InvalidArgumentError, require_same_shape
from app.core.parallel import map_row_blocks
from app.schemas.fields import VOID, FlowField, Image, LabelMap

logger = logging.getLogger(__name__)


# ============================================
# Raw-array sampling
# ============================================

def _corners(shape: Tuple[int, int], x: np.ndarray, y: np.ndarray):
    height, width = shape
    xc = np.clip(x, 0.0, width - 1)
    yc = np.clip(y, 0.0, height - 1)
    x0 = np.clip(np.floor(xc), 0, max(width - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(yc), 0, max(height - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = (xc - x0)[..., None]
    fy = (yc - y0)[..., None]
    return x0, x1, y0, y1, fx, fy


def sample_field(data: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Bilinearly sample an (H, W, C) array at real coordinates, clamping to the border.

    Returns an array of shape x.shape + (C,).
    """
    x0, x1, y0, y1, fx, fy = _corners(data.shape[:2], x, y)
    p00 = data[y0, x0]
    p01 = data[y0, x1]
    p10 = data[y1, x0]
    p11 = data[y1, x1]
    return (1 - fx) * (1 - fy) * p00 + fx * (1 - fy) * p01 + (1 - fx) * fy * p10 + fx * fy * p11


def sample_field_gradient(data: np.ndarray, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Derivatives of sample_field with respect to x and y.

    Piecewise linear interpolation is differentiable almost everywhere; at
    lattice lines the right-hand slope is used, and clamped coordinates
    have zero derivative.
    """
    height, width = data.shape[:2]
    x0, x1, y0, y1, fx, fy = _corners((height, width), x, y)
    p00 = data[y0, x0]
    p01 = data[y0, x1]
    p10 = data[y1, x0]
    p11 = data[y1, x1]
    inside_x = ((x >= 0) & (x <= width - 1))[..., None]
    inside_y = ((y >= 0) & (y <= height - 1))[..., None]
    dx = ((1 - fy) * (p01 - p00) + fy * (p11 - p10)) * inside_x
    dy = ((1 - fx) * (p10 - p00) + fx * (p11 - p01)) * inside_y
    return dx, dy


def source_coordinates(flow: FlowField, rows: slice = slice(None)) -> Tuple[np.ndarray, np.ndarray]:
    """Unclamped source coordinates (x = i + u, y = j + v) of every output pixel."""
    height, width = flow.shape
    jj, ii = np.mgrid[0:height, 0:width]
    return (ii + flow.u)[rows], (jj + flow.v)[rows]


# ============================================
# Image operations
# ============================================

def bilinear_sample(img: Image, x: float, y: float) -> np.ndarray:
    """Sample every channel of img at column x, row y (clamp-to-edge)."""
    if not (np.isfinite(x) and np.isfinite(y)):
        raise InvalidArgumentError(f"sampling coordinates must be finite, got ({x}, {y})")
    return sample_field(img.data, np.asarray(float(x)), np.asarray(float(y)))


def inverse_warp(target: Image, flow: FlowField) -> Image:
    """output(j, i) = target sampled at (i + u(j, i), j + v(j, i))."""
    require_same_shape("image", target.shape, "flow", flow.shape)

    def _rows(start: int, stop: int) -> np.ndarray:
        x, y = source_coordinates(flow, slice(start, stop))
        return sample_field(target.data, x, y)

    out = map_row_blocks(_rows, flow.height)
    return Image(data=np.clip(out, 0.0, 1.0))


def warp_jacobian(target: Image, flow: FlowField) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel, per-channel derivatives of inverse_warp w.r.t. u and v."""
    require_same_shape("image", target.shape, "flow", flow.shape)

    def _rows(start: int, stop: int) -> np.ndarray:
        x, y = source_coordinates(flow, slice(start, stop))
        dx, dy = sample_field_gradient(target.data, x, y)
        return np.stack([dx, dy], axis=0).swapaxes(0, 1)

    both = map_row_blocks(_rows, flow.height)
    return both[:, 0], both[:, 1]


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x) + 0.5)


def nn_warp_labels(labels: LabelMap, flow: FlowField) -> LabelMap:
    """Nearest-neighbour label warp; sources outside the grid become VOID."""
    require_same_shape("labels", labels.shape, "flow", flow.shape)
    height, width = labels.shape
    x, y = source_coordinates(flow)
    xs = round_half_up(x)
    ys = round_half_up(y)
    inside = (xs >= 0) & (xs <= width - 1) & (ys >= 0) & (ys <= height - 1)
    out = np.full((height, width), VOID, dtype=np.uint8)
    out[inside] = labels.ids[ys[inside].astype(np.intp), xs[inside].astype(np.intp)]
    return LabelMap(ids=out, num_classes=labels.num_classes)


def flow_normalize(flow: FlowField, cap: float = 20.0) -> np.ndarray:
    """
    Clip both components to [-cap, cap] and quantize to bytes:
    -cap -> 0, 0 -> 128, +cap -> 255 (round half up).
    """
    if not cap > 0:
        raise InvalidArgumentError(f"cap must be positive, got {cap}")
    uv = np.clip(flow.as_array(), -cap, cap)
    q = round_half_up((uv + cap) / (2.0 * cap) * 255.0)
    return q.astype(np.uint8)


# ============================================
# Pyramid primitives
# ============================================

def image_to_gray(img: Image) -> Image:
    if img.channels == 1:
        return img
    return Image(data=img.data.mean(axis=2, keepdims=True))


def _box_half(data: np.ndarray) -> np.ndarray:
    h = data.shape[0] // 2 * 2
    w = data.shape[1] // 2 * 2
    d = data[:h, :w]
    return 0.25 * (d[0::2, 0::2] + d[0::2, 1::2] + d[1::2, 0::2] + d[1::2, 1::2])


def _resample(data: np.ndarray, height: int, width: int) -> np.ndarray:
    # pixel-centre aligned bilinear resampling
    src_h, src_w = data.shape[:2]
    jj, ii = np.mgrid[0:height, 0:width].astype(np.float64)
    x = (ii + 0.5) * src_w / width - 0.5
    y = (jj + 0.5) * src_h / height - 0.5
    return sample_field(data, x, y)


def level_shape(shape: Tuple[int, int], scale_factor: float) -> Tuple[int, int]:
    if scale_factor == 0.5:
        return shape[0] // 2, shape[1] // 2
    return max(1, int(round(shape[0] * scale_factor))), max(1, int(round(shape[1] * scale_factor)))


def downsample_image(img: Image, scale_factor: float = 0.5) -> Image:
    """2x2 box average for factor 0.5, bilinear resampling otherwise."""
    if scale_factor == 0.5:
        return Image(data=_box_half(img.data))
    height, width = level_shape(img.shape, scale_factor)
    return Image(data=np.clip(_resample(img.data, height, width), 0.0, 1.0))


def resize_flow(flow: FlowField, height: int, width: int) -> FlowField:
    """Resample a flow field to (height, width), scaling u by the width ratio and v by the height ratio."""
    if (height, width) == flow.shape:
        return flow
    if height * 2 == flow.height and width * 2 == flow.width:
        uv = _box_half(flow.as_array())
    else:
        uv = _resample(flow.as_array(), height, width)
    return FlowField(u=uv[..., 0] * (width / flow.width), v=uv[..., 1] * (height / flow.height))


def upsample_flow(flow: FlowField, height: int, width: int) -> FlowField:
    return resize_flow(flow, height, width)
