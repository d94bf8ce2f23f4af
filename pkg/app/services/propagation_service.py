"""
Joint image-label propagation, boundary detection, boundary label
relaxation and segmentation metrics.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from app.core.errors import InvalidArgumentError, require_same_shape
from app.schemas.fields import VOID, FlowField, Image, LabelMap, Logits
from app.services.warp_service import inverse_warp, nn_warp_labels

logger = logging.getLogger(__name__)


# ============================================
# Propagation
# ============================================

def joint_propagate(img: Image, labels: LabelMap, flow: FlowField) -> Tuple[Image, LabelMap]:
    """Warp a frame and its labels with the same motion field so they stay aligned."""
    require_same_shape("image", img.shape, "labels", labels.shape)
    return inverse_warp(img, flow), nn_warp_labels(labels, flow)


def propagate_sequence(
    img: Image,
    labels: LabelMap,
    flows: Sequence[FlowField],
) -> List[Tuple[Image, LabelMap]]:
    """
    Chain joint propagation over successive motion fields, producing one
    synthesized (frame, labels) pair per step away from the annotated frame.
    """
    samples = []
    current = (img, labels)
    for step, flow in enumerate(flows, start=1):
        current = joint_propagate(current[0], current[1], flow)
        void_fraction = float((current[1].ids == VOID).mean())
        logger.info(f"Propagation step {step}: {void_fraction:.1%} of labels are VOID")
        samples.append(current)
    return samples


# ============================================
# Boundaries and relaxation
# ============================================

def _window_offsets(window: int):
    if window < 1 or window % 2 == 0:
        raise InvalidArgumentError(f"window must be a positive odd number, got {window}")
    r = window // 2
    return r, [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def _neighbours(ids: np.ndarray, window: int):
    # Yields the id map shifted by each window offset; off-grid neighbours are VOID
    r, offsets = _window_offsets(window)
    padded = np.pad(ids, r, mode="constant", constant_values=VOID)
    height, width = ids.shape
    for dy, dx in offsets:
        yield padded[r + dy : r + dy + height, r + dx : r + dx + width]


def boundary_mask(labels: LabelMap, window: int = 3) -> np.ndarray:
    """Flag non-VOID pixels whose window holds a different non-VOID id."""
    ids = labels.ids
    flagged = np.zeros(ids.shape, dtype=bool)
    for nb in _neighbours(ids, window):
        flagged |= (nb != VOID) & (nb != ids)
    return flagged & (ids != VOID)


def _class_membership(labels: LabelMap, classes: int, window: int) -> np.ndarray:
    # (H, W, C) boolean: class c occurs (non-VOID) in the pixel's window
    member = np.zeros(labels.shape + (classes,), dtype=bool)
    rows, cols = np.indices(labels.shape)
    for nb in _neighbours(labels.ids, window):
        ok = nb != VOID
        if ok.any() and int(nb[ok].max()) >= classes:
            raise InvalidArgumentError(f"label id {int(nb[ok].max())} out of range for {classes} classes")
        member[rows[ok], cols[ok], nb[ok]] = True
    return member


def cross_entropy_map(logits: Logits, labels: LabelMap) -> np.ndarray:
    """Per-pixel one-hot cross-entropy; NaN at VOID pixels."""
    require_same_shape("logits", logits.shape, "labels", labels.shape)
    logp = log_softmax(logits.scores, axis=-1)
    valid = labels.valid
    out = np.full(labels.shape, np.nan)
    ids = labels.ids.astype(np.intp)
    if valid.any() and int(ids[valid].max()) >= logits.classes:
        raise InvalidArgumentError(f"label id {int(ids[valid].max())} out of range for {logits.classes} classes")
    rows, cols = np.nonzero(valid)
    out[valid] = -logp[rows, cols, ids[valid]]
    return out


def relaxed_loss_map(logits: Logits, labels: LabelMap, window: int = 3) -> np.ndarray:
    """Per-pixel -log of the summed probability of the classes in the window; NaN at VOID."""
    require_same_shape("logits", logits.shape, "labels", labels.shape)
    member = _class_membership(labels, logits.classes, window)
    logp = log_softmax(logits.scores, axis=-1)
    out = np.full(labels.shape, np.nan)
    valid = labels.valid
    out[valid] = -logsumexp(logp[valid], b=member[valid], axis=-1)
    return out


def relaxed_loss(logits: Logits, labels: LabelMap, window: int = 3) -> Tuple[float, np.ndarray]:
    """
    Boundary label relaxation loss.

    Interior pixels (one class in the window) reduce to one-hot cross-entropy;
    boundary pixels use -log sum_{C in N} P(C). Averaged over non-VOID pixels.

    Returns:
        (loss, gradient w.r.t. the logits)
    """
    require_same_shape("logits", logits.shape, "labels", labels.shape)
    valid = labels.valid
    count = int(valid.sum())
    if count == 0:
        raise InvalidArgumentError("all pixels are VOID")

    member = _class_membership(labels, logits.classes, window)
    probs = softmax(logits.scores, axis=-1)
    losses = relaxed_loss_map(logits, labels, window)
    value = float(losses[valid].sum() / count)

    union = np.where(member, probs, 0.0).sum(axis=-1, keepdims=True)
    grad = probs - np.where(member, probs, 0.0) / np.maximum(union, np.finfo(float).tiny)
    grad[~valid] = 0.0
    return value, grad / count


def pixel_entropy(logits: Logits) -> np.ndarray:
    """Per-pixel entropy (nats) of the softmax distribution."""
    logp = log_softmax(logits.scores, axis=-1)
    return -(np.exp(logp) * logp).sum(axis=-1)


# ============================================
# Evaluation
# ============================================

def confusion_matrix(pred: LabelMap, gt: LabelMap, num_classes: int) -> np.ndarray:
    """
    (C, C+1) counts over pixels with gt != VOID; rows are ground truth,
    the last column collects VOID or out-of-range predictions.
    """
    require_same_shape("prediction", pred.shape, "ground truth", gt.shape)
    valid = gt.valid
    g = gt.ids[valid].astype(np.int64)
    if g.size and g.max() >= num_classes:
        raise InvalidArgumentError(f"ground-truth id {int(g.max())} out of range for {num_classes} classes")
    p = pred.ids[valid].astype(np.int64)
    p = np.where(p < num_classes, p, num_classes)
    return np.bincount(g * (num_classes + 1) + p, minlength=num_classes * (num_classes + 1)).reshape(
        num_classes, num_classes + 1
    )


def miou(pred: LabelMap, gt: LabelMap, num_classes: int) -> Tuple[List[Optional[float]], float]:
    """
    Per-class IoU and their mean over classes present in prediction or ground truth.
    Classes absent from both are reported as None and excluded from the mean.
    """
    if not gt.valid.any():
        raise InvalidArgumentError("ground truth has no valid pixels")
    hist = confusion_matrix(pred, gt, num_classes)
    tp = np.diag(hist[:, :num_classes]).astype(np.float64)
    union = hist.sum(axis=1) + hist[:, :num_classes].sum(axis=0) - tp

    per_class: List[Optional[float]] = [
        float(tp[c] / union[c]) if union[c] > 0 else None for c in range(num_classes)
    ]
    present = [v for v in per_class if v is not None]
    return per_class, float(np.mean(present))
