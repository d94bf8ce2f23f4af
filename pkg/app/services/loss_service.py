"""
Photometric and regularization losses with analytic gradients, plus
flow accuracy metrics.

Every loss that the solver optimizes returns (value, gradient), the gradient
being a FlowField (for flow-parameterized losses) or an array shaped like
the differentiated image.
"""

import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import InvalidArgumentError, require_same_shape
from app.schemas.fields import FlowField, Image
from app.schemas.losses import LossReport, LossWeights
from app.services.warp_service import (
    downsample_image,
    inverse_warp,
    resize_flow,
    warp_jacobian,
)

logger = logging.getLogger(__name__)

SSIM_PATCH = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
CENSUS_ALPHA = 0.45
CENSUS_EPSILON = 0.001


# ============================================
# Robust penalty
# ============================================

def charbonnier(x, alpha: float, epsilon: float):
    """Generalized Charbonnier penalty (x^2 + eps^2)^alpha."""
    if not epsilon > 0:
        raise InvalidArgumentError(f"epsilon must be positive, got {epsilon}")
    return (np.square(x) + epsilon * epsilon) ** alpha


def charbonnier_grad(x, alpha: float, epsilon: float):
    return 2.0 * alpha * x * (np.square(x) + epsilon * epsilon) ** (alpha - 1.0)


# ============================================
# Data terms
# ============================================

def pixel_loss_map(I1: Image, I2: Image, flow: FlowField, w: LossWeights) -> np.ndarray:
    """Per-pixel Charbonnier reconstruction error, averaged over channels."""
    require_same_shape("I1", I1.data.shape, "I2", I2.data.shape)
    residual = I1.data - inverse_warp(I2, flow).data
    return charbonnier(residual, w.alpha_pixel, w.epsilon).mean(axis=2)


def pixel_loss(
    I1: Image,
    I2: Image,
    flow: FlowField,
    w: LossWeights,
    mask: Optional[np.ndarray] = None,
) -> Tuple[float, FlowField]:
    """
    Mean Charbonnier error between I1 and I2 warped back by flow.

    Args:
        I1: Reference frame
        I2: Frame sampled at the flow-displaced positions
        flow: Flow from I1 to I2
        w: Penalty parameters (alpha_pixel, epsilon)
        mask: Optional per-pixel weights (1 = counted); the mean is taken over the mask

    Returns:
        (loss, gradient w.r.t. flow)
    """
    require_same_shape("I1", I1.data.shape, "I2", I2.data.shape)
    require_same_shape("I1", I1.shape, "flow", flow.shape)
    weights = np.ones(flow.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    require_same_shape("mask", weights.shape, "flow", flow.shape)

    norm = weights.sum() * I1.channels
    if norm <= 0:
        return 0.0, FlowField.zeros(*flow.shape)

    residual = I1.data - inverse_warp(I2, flow).data
    value = float((charbonnier(residual, w.alpha_pixel, w.epsilon) * weights[..., None]).sum() / norm)

    du, dv = warp_jacobian(I2, flow)
    coeff = -charbonnier_grad(residual, w.alpha_pixel, w.epsilon) * weights[..., None] / norm
    return value, FlowField(u=(coeff * du).sum(axis=2), v=(coeff * dv).sum(axis=2))


def _differences(a: np.ndarray, order: int) -> List[Tuple[np.ndarray, Tuple[Tuple[slice, slice, float], ...]]]:
    # Each entry: (difference array, stencil of (row slice, col slice, coefficient))
    full = slice(None)
    if order == 1:
        stencils = [
            ((full, slice(1, None), 1.0), (full, slice(None, -1), -1.0)),
            ((slice(1, None), full, 1.0), (slice(None, -1), full, -1.0)),
        ]
    else:
        stencils = [
            ((full, slice(2, None), 1.0), (full, slice(1, -1), -2.0), (full, slice(None, -2), 1.0)),
            ((slice(2, None), full, 1.0), (slice(1, -1), full, -2.0), (slice(None, -2), full, 1.0)),
        ]
    out = []
    for stencil in stencils:
        diff = sum(c * a[r, k] for r, k, c in stencil)
        if diff.size:
            out.append((diff, stencil))
    return out


def smoothness_loss(flow: FlowField, w: LossWeights, order: int = 1) -> Tuple[float, FlowField]:
    """
    Mean Charbonnier penalty of first (order 1) or second (order 2) forward
    differences of u and v along rows and columns. Differences that would
    leave the grid are omitted.
    """
    if order not in (1, 2):
        raise InvalidArgumentError(f"smoothness order must be 1 or 2, got {order}")

    terms = [(name, _differences(comp, order)) for name, comp in (("u", flow.u), ("v", flow.v))]
    count = sum(d.size for _, diffs in terms for d, _ in diffs)
    if count == 0:
        return 0.0, FlowField.zeros(*flow.shape)

    total = 0.0
    grads = {"u": np.zeros(flow.shape), "v": np.zeros(flow.shape)}
    for name, diffs in terms:
        for diff, stencil in diffs:
            total += float(charbonnier(diff, w.alpha_smooth, w.epsilon).sum())
            g = charbonnier_grad(diff, w.alpha_smooth, w.epsilon) / count
            for r, k, c in stencil:
                grads[name][r, k] += c * g
    return total / count, FlowField(u=grads["u"], v=grads["v"])


# ============================================
# Structural similarity
# ============================================

def ssim(patch1: np.ndarray, patch2: np.ndarray, c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """SSIM index of two equal-size patches with population moments."""
    p1 = np.asarray(patch1, dtype=np.float64)
    p2 = np.asarray(patch2, dtype=np.float64)
    require_same_shape("patch1", p1.shape, "patch2", p2.shape)
    mu1, mu2 = p1.mean(), p2.mean()
    var1 = ((p1 - mu1) ** 2).mean()
    var2 = ((p2 - mu2) ** 2).mean()
    cov = ((p1 - mu1) * (p2 - mu2)).mean()
    num = (2 * mu1 * mu2 + c1) * (2 * cov + c2)
    den = (mu1 ** 2 + mu2 ** 2 + c1) * (var1 + var2 + c2)
    return float(num / den)


def _patches(data: np.ndarray, k: int) -> np.ndarray:
    # (H, W, C) -> (rows, cols, C, k*k), trailing partial patches dropped
    ph, pw = data.shape[0] // k, data.shape[1] // k
    d = data[: ph * k, : pw * k]
    return d.reshape(ph, k, pw, k, -1).transpose(0, 2, 4, 1, 3).reshape(ph, pw, -1, k * k)


def _unpatch(patches: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    ph, pw, ch, _ = patches.shape
    out = np.zeros(shape)
    block = patches.reshape(ph, pw, ch, k, k).transpose(0, 3, 1, 4, 2).reshape(ph * k, pw * k, ch)
    out[: ph * k, : pw * k] = block
    return out


def ssim_loss(
    I1: Image,
    I1rec: Image,
    c1: float = SSIM_C1,
    c2: float = SSIM_C2,
    patch: int = SSIM_PATCH,
) -> Tuple[float, np.ndarray]:
    """
    Mean of (1 - SSIM) over non-overlapping patch x patch windows (stride = patch),
    per channel. Returns (loss, gradient w.r.t. I1rec).
    """
    require_same_shape("I1", I1.data.shape, "I1rec", I1rec.data.shape)
    if I1.height < patch or I1.width < patch:
        raise InvalidArgumentError(f"SSIM needs images of at least {patch}x{patch}, got {I1.height}x{I1.width}")

    x = _patches(I1.data, patch)
    y = _patches(I1rec.data, patch)
    n = patch * patch
    mux = x.mean(axis=-1, keepdims=True)
    muy = y.mean(axis=-1, keepdims=True)
    dx = x - mux
    dy = y - muy
    varx = (dx ** 2).mean(axis=-1, keepdims=True)
    vary = (dy ** 2).mean(axis=-1, keepdims=True)
    cov = (dx * dy).mean(axis=-1, keepdims=True)

    a1 = 2 * mux * muy + c1
    a2 = 2 * cov + c2
    b1 = mux ** 2 + muy ** 2 + c1
    b2 = varx + vary + c2
    s = a1 * a2 / (b1 * b2)

    count = s.size
    value = float((1.0 - s).sum() / count)

    ds = (2.0 / n) / (b1 * b2) * (mux * a2 + a1 * dx - s * (muy * b2 + b1 * dy))
    grad = _unpatch(-ds / count, I1rec.data.shape, patch)
    return value, grad


def ssim_loss_flow_gradient(I1: Image, I2: Image, flow: FlowField) -> Tuple[float, FlowField]:
    """ssim_loss(I1, inverse_warp(I2, flow)) and its gradient w.r.t. flow."""
    value, g_img = ssim_loss(I1, inverse_warp(I2, flow))
    du, dv = warp_jacobian(I2, flow)
    return value, FlowField(u=(g_img * du).sum(axis=2), v=(g_img * dv).sum(axis=2))


# ============================================
# Ternary census
# ============================================

def _ternary_signature(gray: np.ndarray, window: int, threshold: float) -> np.ndarray:
    r = window // 2
    padded = np.pad(gray, r, mode="edge")
    height, width = gray.shape
    sig = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            neighbour = padded[r + dy : r + dy + height, r + dx : r + dx + width]
            diff = neighbour - gray
            sig.append(np.where(diff > threshold, 1.0, np.where(diff < -threshold, -1.0, 0.0)))
    return np.stack(sig, axis=-1)


def census_distance_map(I1: Image, I1rec: Image, window: int = 3, t: float = 0.01) -> np.ndarray:
    """Per-pixel soft Hamming distance between ternary census signatures."""
    require_same_shape("I1", I1.data.shape, "I1rec", I1rec.data.shape)
    if I1.channels != 1:
        raise InvalidArgumentError("census distance needs grayscale images")
    if window < 1 or window % 2 == 0:
        raise InvalidArgumentError(f"census window must be a positive odd number, got {window}")
    s1 = _ternary_signature(I1.data[..., 0], window, t)
    s2 = _ternary_signature(I1rec.data[..., 0], window, t)
    return charbonnier(s1 - s2, CENSUS_ALPHA, CENSUS_EPSILON).sum(axis=-1)


def census_distance(I1: Image, I1rec: Image, window: int = 3, t: float = 0.01) -> float:
    """Mean census distance; identical images give the floor (window^2 - 1) * eps^(2 alpha)."""
    return float(census_distance_map(I1, I1rec, window, t).mean())


# ============================================
# Weighted combinations
# ============================================

def scale_loss(pixel: float, smooth: float, ssim_value: float, w: LossWeights) -> LossReport:
    """lambda1 * L_pixel + lambda2 * L_smooth + lambda3 * L_ssim."""
    return LossReport.from_terms({
        "pixel": (pixel, w.lambda1),
        "smooth": (smooth, w.lambda2),
        "ssim": (ssim_value, w.lambda3),
    })


def total_loss(per_scale: Sequence[Union[LossReport, float]], delta: Sequence[float]) -> LossReport:
    """Sum over scales of delta_s * L_s, scales ordered coarsest first."""
    if len(per_scale) != len(delta):
        raise InvalidArgumentError(f"{len(per_scale)} scale losses but {len(delta)} scale weights")
    values = [s.total if isinstance(s, LossReport) else float(s) for s in per_scale]
    return LossReport.from_terms({f"scale_{i}": (v, d) for i, (v, d) in enumerate(zip(values, delta))})


def multiscale_loss(
    I1: Image,
    I2: Image,
    flow: FlowField,
    w: LossWeights,
    order: int = 1,
    use_ssim: bool = True,
) -> LossReport:
    """
    The full multi-scale objective: L_s on a halving image pyramid with the
    flow resized (and its components rescaled) to each level, combined with
    the per-scale weights w.delta. The finest scale is the input resolution.
    """
    levels = len(w.delta)
    images1, images2, flows = [I1], [I2], [flow]
    for _ in range(levels - 1):
        if images1[-1].height < 2 or images1[-1].width < 2:
            raise InvalidArgumentError(f"images too small for {levels} scales")
        images1.append(downsample_image(images1[-1]))
        images2.append(downsample_image(images2[-1]))
        flows.append(resize_flow(flows[-1], *images1[-1].shape))

    per_scale = []
    diagnostics = []
    for a, b, f in zip(reversed(images1), reversed(images2), reversed(flows)):
        pix, _ = pixel_loss(a, b, f, w)
        smooth, _ = smoothness_loss(f, w, order)
        sim = 0.0
        if use_ssim:
            if a.height >= SSIM_PATCH and a.width >= SSIM_PATCH:
                sim, _ = ssim_loss(a, inverse_warp(b, f))
            else:
                diagnostics.append(f"ssim skipped at {a.height}x{a.width}")
        per_scale.append(scale_loss(pix, smooth, sim, w))

    report = total_loss(per_scale, w.delta)
    if diagnostics:
        logger.warning(f"Multi-scale loss: {'; '.join(diagnostics)}")
    return LossReport(terms=report.terms, total=report.total, diagnostics=diagnostics)


# ============================================
# Accuracy metrics
# ============================================

def _endpoint_errors(flow: FlowField, gt: FlowField, valid: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    require_same_shape("flow", flow.shape, "ground truth", gt.shape)
    mask = np.ones(flow.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    require_same_shape("valid mask", mask.shape, "flow", flow.shape)
    if not mask.any():
        raise InvalidArgumentError("no valid pixels to evaluate")
    err = np.hypot(flow.u - gt.u, flow.v - gt.v)
    return err[mask], np.hypot(gt.u, gt.v)[mask]


def epe(flow: FlowField, gt: FlowField, valid: Optional[np.ndarray] = None) -> float:
    """Mean endpoint error over valid pixels."""
    err, _ = _endpoint_errors(flow, gt, valid)
    return float(err.mean())


def fl_outliers(flow: FlowField, gt: FlowField, valid: Optional[np.ndarray] = None) -> float:
    """Fraction of valid pixels whose endpoint error exceeds 3 px and 5% of the GT magnitude."""
    err, mag = _endpoint_errors(flow, gt, valid)
    return float(((err > 3.0) & (err > 0.05 * mag)).mean())


def guided_loss(
    flow: FlowField,
    proxy_gt: FlowField,
    I1: Image,
    I2: Image,
    lam: float = 0.1,
    w: Optional[LossWeights] = None,
) -> LossReport:
    """EPE against a proxy ground truth plus lam times the reconstruction loss."""
    w = w or LossWeights()
    reconst, _ = pixel_loss(I1, I2, flow, w)
    return LossReport.from_terms({
        "epe": (epe(flow, proxy_gt), 1.0),
        "reconst": (reconst, lam),
    })
