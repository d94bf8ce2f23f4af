import logging
from typing import Tuple

import numpy as np

from app.core.errors import require_same_shape
from app.schemas.fields import FlowField, OcclusionMask
from app.schemas.losses import LossReport
from app.services.warp_service import sample_field, source_coordinates

logger = logging.getLogger(__name__)

DEFAULT_ALPHA1 = 0.01
DEFAULT_ALPHA2 = 0.5


def backward_at_forward(Mf: FlowField, Mb: FlowField) -> FlowField:
    """Backward flow bilinearly sampled at each pixel's forward-displaced position (clamp-to-edge)."""
    require_same_shape("forward flow", Mf.shape, "backward flow", Mb.shape)
    x, y = source_coordinates(Mf)
    sampled = sample_field(Mb.as_array(), x, y)
    return FlowField.from_array(sampled)


def occlusion_mask(
    Mf: FlowField,
    Mb: FlowField,
    alpha1: float = DEFAULT_ALPHA1,
    alpha2: float = DEFAULT_ALPHA2,
) -> OcclusionMask:
    """
    Forward occlusion mask: a pixel is occluded when

        |Mf + Mb(p + Mf)|^2 >= alpha1 * (|Mf|^2 + |Mb(p + Mf)|^2) + alpha2

    Equality counts as a violation.
    """
    warped = backward_at_forward(Mf, Mb)
    mismatch = (Mf.u + warped.u) ** 2 + (Mf.v + warped.v) ** 2
    magnitude = Mf.u ** 2 + Mf.v ** 2 + warped.u ** 2 + warped.v ** 2
    return OcclusionMask(flags=(mismatch >= alpha1 * magnitude + alpha2).astype(np.uint8))


def occlusion_masks(
    Mf: FlowField,
    Mb: FlowField,
    alpha1: float = DEFAULT_ALPHA1,
    alpha2: float = DEFAULT_ALPHA2,
) -> Tuple[OcclusionMask, OcclusionMask]:
    """(forward mask, backward mask); the backward mask swaps the roles of the two flows."""
    return occlusion_mask(Mf, Mb, alpha1, alpha2), occlusion_mask(Mb, Mf, alpha1, alpha2)


def _masked_mean(loss_map: np.ndarray, mask: OcclusionMask):
    keep = mask.flags == 0
    if not keep.any():
        return 0.0, False
    return float(np.asarray(loss_map, dtype=np.float64)[keep].mean()), True


def occlusion_aware_loss(
    Lf_map: np.ndarray,
    Lb_map: np.ndarray,
    of: OcclusionMask,
    ob: OcclusionMask,
) -> LossReport:
    """
    Masked mean of the forward loss map over non-occluded forward pixels plus
    the same for the backward direction. A direction with no visible pixel
    contributes 0 and is reported in the diagnostics.
    """
    require_same_shape("forward loss map", np.shape(Lf_map), "forward mask", of.shape)
    require_same_shape("backward loss map", np.shape(Lb_map), "backward mask", ob.shape)

    diagnostics = []
    forward, ok_f = _masked_mean(Lf_map, of)
    if not ok_f:
        diagnostics.append("forward direction fully occluded")
    backward, ok_b = _masked_mean(Lb_map, ob)
    if not ok_b:
        diagnostics.append("backward direction fully occluded")
    if diagnostics:
        logger.warning(f"Occlusion-aware loss: {'; '.join(diagnostics)}")

    return LossReport.from_terms({"forward": (forward, 1.0), "backward": (backward, 1.0)}, diagnostics)
