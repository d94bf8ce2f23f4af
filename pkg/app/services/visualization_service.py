import logging
from typing import Optional

import numpy as np

from app.schemas.fields import FlowField, Image
from app.services.warp_service import flow_normalize

logger = logging.getLogger(__name__)

# Hue segments of the Middlebury wheel: red-yellow, yellow-green, green-cyan,
# cyan-blue, blue-magenta, magenta-red
WHEEL_SEGMENTS = (15, 6, 4, 11, 13, 6)
OUT_OF_RANGE_DIM = 0.75
DEFAULT_PERCENTILE = 99.0


def make_colorwheel() -> np.ndarray:
    """The 55 x 3 Middlebury color wheel with values in [0, 255]."""
    ry, yg, gc, cb, bm, mr = WHEEL_SEGMENTS
    wheel = np.zeros((sum(WHEEL_SEGMENTS), 3))
    col = 0

    wheel[col : col + ry, 0] = 255
    wheel[col : col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry

    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg

    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc

    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb

    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm

    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel


def flow_to_color(flow: FlowField, max_mag: Optional[float] = None) -> Image:
    """
    Standard flow color coding.

    Hue follows atan2(-v, -u) around the wheel; saturation grows with the
    magnitude divided by max_mag (default: the field's 99th-percentile
    magnitude). Zero flow is white, and vectors beyond max_mag are dimmed.
    """
    rad = np.hypot(flow.u, flow.v)
    if max_mag is None:
        max_mag = float(np.percentile(rad, DEFAULT_PERCENTILE))
    scaled = rad / max_mag if max_mag > 0 else np.zeros_like(rad)

    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    # + 0.0 turns -0.0 into 0.0 so purely horizontal flow lands on one hue
    a = np.arctan2(-flow.v + 0.0, -flow.u + 0.0) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.intp)
    k1 = np.where(k0 + 1 == ncols, 0, k0 + 1)
    f = (fk - k0)[..., None]

    col = ((1 - f) * wheel[k0] + f * wheel[k1]) / 255.0
    inside = (scaled <= 1)[..., None]
    col = np.where(inside, 1 - scaled[..., None] * (1 - col), col * OUT_OF_RANGE_DIM)
    return Image(data=np.floor(255 * col) / 255.0)


def flow_to_ppm_samples(flow: FlowField, max_mag: Optional[float] = None) -> np.ndarray:
    """flow_to_color as 8-bit RGB samples."""
    return np.floor(flow_to_color(flow, max_mag).data * 255.0 + 0.5).astype(np.int64)


def normalized_flow_samples(flow: FlowField, cap: float = 20.0) -> np.ndarray:
    """flow_normalize packed as RGB samples: u in red, v in green, blue = 0."""
    q = flow_normalize(flow, cap).astype(np.int64)
    return np.concatenate([q, np.zeros(q.shape[:2] + (1,), dtype=np.int64)], axis=2)
