import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from app.core.errors import InvalidArgumentError
from app.schemas.fields import VOID, LabelMap
from app.schemas.sampling import CropPlan, CropSample, DepthClip, StdnScales

logger = logging.getLogger(__name__)

MAX_RTS_TRIES = 100
STDN_PERCENTILE = 95.0
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


# ============================================
# Random temporal skipping
# ============================================

def rts_indices(T: int, N: int, max_stride: int, seed: int) -> List[int]:
    """
    Sample N+1 frame indices t, t+tau1, ..., t+sum(tau) with every tau uniform
    in [0, max_stride] (0 repeats a frame). Draws whose last index falls
    outside [0, T) are rejected; after MAX_RTS_TRIES rejections the stride
    bound is lowered one step at a time down to 0, which always fits.
    """
    if T < 1 or N < 1 or max_stride < 0:
        raise InvalidArgumentError(f"need T >= 1, N >= 1, max_stride >= 0; got T={T}, N={N}, max_stride={max_stride}")

    rng = np.random.default_rng(seed)
    for stride in range(max_stride, -1, -1):
        for _ in range(MAX_RTS_TRIES):
            start = int(rng.integers(0, T))
            taus = rng.integers(0, stride + 1, size=N)
            indices = start + np.concatenate([[0], np.cumsum(taus)])
            if indices[-1] < T:
                if stride < max_stride:
                    logger.debug(f"RTS fell back to max stride {stride}")
                return [int(i) for i in indices]
    raise AssertionError("stride 0 always fits")


# ============================================
# Class-uniform crops
# ============================================

def class_centroids(labels: Sequence[LabelMap], num_classes: int) -> Dict[int, List[Tuple[int, float, float]]]:
    """Per class, the (image index, row, col) centroid of every 4-connected region."""
    centroids: Dict[int, List[Tuple[int, float, float]]] = {}
    for index, lm in enumerate(labels):
        for cls in np.unique(lm.ids):
            cls = int(cls)
            if cls == VOID or cls >= num_classes:
                continue
            regions, count = ndimage.label(lm.ids == cls, structure=FOUR_CONNECTED)
            centres = ndimage.center_of_mass(np.ones(lm.shape), regions, range(1, count + 1))
            centroids.setdefault(cls, []).extend((index, float(r), float(c)) for r, c in centres)
    return centroids


def _clamp(value: float, upper: int) -> int:
    return int(min(max(value, 0), upper))


def class_uniform_crops(
    labels: Sequence[LabelMap],
    crop: int,
    num_classes: int,
    count: int,
    seed: int,
) -> CropPlan:
    """
    Half of the crops at uniform-random positions, half centred on region
    centroids, cycling round-robin over the classes present in the data.
    """
    if not labels:
        raise InvalidArgumentError("no label maps given")
    if count < 0:
        raise InvalidArgumentError(f"count must be non-negative, got {count}")
    smallest = min(min(lm.shape) for lm in labels)
    if crop < 1 or crop > smallest:
        raise InvalidArgumentError(f"crop {crop} must be in [1, {smallest}]")

    rng = np.random.default_rng(seed)
    centroids = class_centroids(labels, num_classes)
    present = sorted(centroids)
    diagnostics = []

    n_centroid = count // 2 if present else 0
    if not present:
        diagnostics.append("no class present; all crops are random")
        logger.warning("Class-uniform sampling: no class present, falling back to random crops")

    crops: List[CropSample] = []
    for _ in range(count - n_centroid):
        index = int(rng.integers(0, len(labels)))
        height, width = labels[index].shape
        x = int(rng.integers(0, width - crop + 1))
        y = int(rng.integers(0, height - crop + 1))
        crops.append(CropSample(image_index=index, x=x, y=y, w=crop, h=crop))

    for k in range(n_centroid):
        cls = present[k % len(present)]
        index, row, col = centroids[cls][int(rng.integers(0, len(centroids[cls])))]
        height, width = labels[index].shape
        x = _clamp(np.floor(col - crop / 2 + 0.5), width - crop)
        y = _clamp(np.floor(row - crop / 2 + 0.5), height - crop)
        crops.append(CropSample(image_index=index, x=x, y=y, w=crop, h=crop, class_id=cls))

    return CropPlan(crops=crops, diagnostics=diagnostics)


# ============================================
# Depth sequences
# ============================================

def horizontal_thirds(height: int) -> List[slice]:
    """Top, middle and bottom row ranges; the remainder goes to the bottom."""
    third = height // 3
    return [slice(0, third), slice(third, 2 * third), slice(2 * third, height)]


def stdn_scales(clip: DepthClip, n: int) -> StdnScales:
    """
    Spatio-temporal depth normalization factors.

    The clip is cut into windows of n frames (the last may be short) and each
    frame into horizontal thirds. Within a window, each frame-third is scaled
    so that its 95th percentile matches the 95th percentile of the whole
    window-third subvolume (linear interpolation between order statistics).
    """
    if n < 1:
        raise InvalidArgumentError(f"window length must be >= 1, got {n}")
    stack = clip.stacked()
    thirds = horizontal_thirds(clip.shape[0])
    windows = [range(s, min(s + n, len(clip))) for s in range(0, len(clip), n)]

    scales = np.ones((len(clip), 3))
    references = np.zeros((len(windows), 3))
    diagnostics = []
    for w, frames in enumerate(windows):
        for k, rows in enumerate(thirds):
            if rows.stop <= rows.start:
                continue
            sub = stack[frames.start : frames.stop, rows]
            ref = np.percentile(sub, STDN_PERCENTILE)
            references[w, k] = ref
            for t in frames:
                own = np.percentile(stack[t, rows], STDN_PERCENTILE)
                if own > 0:
                    scales[t, k] = ref / own
                else:
                    diagnostics.append(f"frame {t} third {k}: zero percentile, left unscaled")
    if diagnostics:
        logger.warning(f"STDN: {len(diagnostics)} frame-thirds had a zero percentile")
    return StdnScales(scales=scales, references=references, diagnostics=diagnostics)


def stdn(clip: DepthClip, n: int) -> DepthClip:
    """Apply stdn_scales to every frame-third of the clip."""
    table = stdn_scales(clip, n)
    thirds = horizontal_thirds(clip.shape[0])
    frames = []
    for t, frame in enumerate(clip.frames):
        out = frame.copy()
        for k, rows in enumerate(thirds):
            out[rows] *= table.scales[t, k]
        frames.append(out)
    return DepthClip(frames=frames)


def mdmm(clip: DepthClip, t_start: int, N: int) -> np.ndarray:
    """Sum of |map[t+1] - map[t]| for t = t_start .. t_start+N-1, without thresholding."""
    if t_start < 0 or N < 0 or t_start + N >= len(clip):
        raise InvalidArgumentError(f"frames {t_start}..{t_start + N} exceed a clip of {len(clip)} frames")
    acc = np.zeros(clip.shape)
    for t in range(t_start, t_start + N):
        acc += np.abs(clip.frames[t + 1] - clip.frames[t])
    return acc


def mdmm_sequence(clip: DepthClip, N: int) -> List[np.ndarray]:
    """One MDMM per consecutive clip of N difference terms; a trailing partial clip is dropped."""
    if N < 1:
        raise InvalidArgumentError(f"clip length must be >= 1, got {N}")
    return [mdmm(clip, start, N) for start in range(0, len(clip) - N, N)]
