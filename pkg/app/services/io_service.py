"""
File codecs: binary PGM/PPM rasters, Middlebury .flo, the logits container,
headerless CSV matrices and persisted factorizations.

Every reader raises FormatError naming the path (and, for .flo and logits,
the byte offset) instead of returning partial data.
"""

import io
import logging
import struct
import warnings
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from pydantic import ValidationError

from app.core.errors import FormatError, InvalidArgumentError
from app.schemas.fields import FlowField, Image, LabelMap, Logits, OcclusionMask
from app.schemas.losses import LossReport
from app.schemas.sampling import CropPlan, DepthClip
from app.schemas.url import Factorization

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FLO_TAG = 202021.25
FLO_HEADER = struct.Struct("<fii")
LOGITS_MAGIC = b"MLTN"
LOGITS_VERSION = 1
LOGITS_HEADER = struct.Struct("<4sIIII")
MAX_DIMENSION = 1 << 20

PNM_MAGICS = (b"P5", b"P6")
EIGHT_BIT_MODES = ("L", "RGB")
SIXTEEN_BIT_MODES = ("I", "I;16", "I;16B", "I;16L")


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read file: {e.strerror or e}", path=str(path))


def _write_bytes(path: PathLike, payload: bytes) -> None:
    try:
        Path(path).write_bytes(payload)
    except OSError as e:
        raise FormatError(f"cannot write file: {e.strerror or e}", path=str(path))


def ensure_directory(path: PathLike) -> Path:
    """Create the directory (and parents) if needed; an existing file in the way is a FormatError."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise FormatError(f"cannot create directory: {e.strerror or e}", path=str(root))
    return root


# ============================================
# Netpbm rasters
# ============================================

def read_pnm(path: PathLike) -> Tuple[np.ndarray, int]:
    """
    Read a binary PGM/PPM through Pillow.

    Returns:
        (raw integer samples as (H, W) or (H, W, 3), maxval)
        maxval is 255 for 8-bit rasters and 65535 for 16-bit PGM; Pillow
        rescales any other declared maxval onto one of the two.
    """
    raw = _read_bytes(path)
    if raw[:2] not in PNM_MAGICS:
        raise FormatError(f"expected binary PGM (P5) or PPM (P6), got {raw[:2]!r}", path=str(path), offset=0)
    try:
        with PILImage.open(io.BytesIO(raw), formats=["PPM"]) as raster:
            raster.load()
            mode = raster.mode
            samples = np.asarray(raster)
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise FormatError(f"cannot decode raster: {e}", path=str(path))

    if mode in EIGHT_BIT_MODES:
        maxval = 255
    elif mode in SIXTEEN_BIT_MODES:
        maxval = 65535
    else:
        raise FormatError(f"unsupported raster mode {mode!r}", path=str(path))
    return samples.astype(np.int64), maxval


def write_pnm(path: PathLike, samples: np.ndarray, maxval: int = 255) -> None:
    """Write integer samples (H, W) as P5 or (H, W, 3) as P6; maxval 65535 gives a 16-bit PGM."""
    samples = np.asarray(samples)
    if maxval not in (255, 65535):
        raise InvalidArgumentError(f"maxval must be 255 or 65535, got {maxval}")
    if not (samples.ndim == 2 or (samples.ndim == 3 and samples.shape[2] == 3)):
        raise InvalidArgumentError(f"cannot write a raster of shape {samples.shape}")
    if maxval == 65535 and samples.ndim == 3:
        raise InvalidArgumentError("16-bit output is written as PGM only")
    if samples.size and (samples.min() < 0 or samples.max() > maxval):
        raise InvalidArgumentError(f"samples must lie in [0, {maxval}]")

    # int32 arrays become mode "I", which Pillow writes as big-endian 16-bit P5
    raster = PILImage.fromarray(samples.astype(np.uint8 if maxval == 255 else np.int32))
    try:
        raster.save(path, format="PPM")
    except OSError as e:
        raise FormatError(f"cannot write file: {e.strerror or e}", path=str(path))


def read_image(path: PathLike) -> Image:
    samples, maxval = read_pnm(path)
    return Image(data=samples / float(maxval))


def write_image(path: PathLike, img: Image) -> None:
    """8-bit PGM for one channel, PPM for three."""
    samples = np.floor(img.data * 255.0 + 0.5).astype(np.int64)
    write_pnm(path, samples[..., 0] if img.channels == 1 else samples)


def read_labels(path: PathLike, num_classes: Optional[int] = None) -> LabelMap:
    samples, maxval = read_pnm(path)
    if samples.ndim != 2 or maxval > 255:
        raise FormatError("label maps must be 8-bit PGM", path=str(path))
    try:
        return LabelMap(ids=samples, num_classes=num_classes)
    except ValidationError as e:
        raise FormatError(f"invalid label map: {e.errors()[0]['msg']}", path=str(path))


def write_labels(path: PathLike, labels: LabelMap) -> None:
    write_pnm(path, labels.ids)


def read_mask(path: PathLike) -> OcclusionMask:
    samples, _ = read_pnm(path)
    if samples.ndim != 2 or not np.all((samples == 0) | (samples == 255)):
        raise FormatError("occlusion masks must be PGM with values {0, 255}", path=str(path))
    return OcclusionMask(flags=(samples == 255).astype(np.uint8))


def write_mask(path: PathLike, mask: OcclusionMask) -> None:
    write_pnm(path, mask.flags.astype(np.int64) * 255)


# ============================================
# Depth frames
# ============================================

def read_depth(path: PathLike) -> np.ndarray:
    """Raw (unitless) 8- or 16-bit depth samples as float64."""
    samples, _ = read_pnm(path)
    if samples.ndim != 2:
        raise FormatError("depth frames must be single-channel PGM", path=str(path))
    return samples.astype(np.float64)


def write_depth16(path: PathLike, frame: np.ndarray) -> None:
    """Round and saturate to a 16-bit PGM."""
    samples = np.clip(np.floor(np.asarray(frame, dtype=np.float64) + 0.5), 0, 65535).astype(np.int64)
    write_pnm(path, samples, maxval=65535)


def list_depth_frames(directory: PathLike) -> List[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise FormatError("not a directory", path=str(root))
    frames = sorted(root.glob("*.pgm"), key=lambda p: p.name)
    if not frames:
        raise FormatError("no .pgm frames found", path=str(root))
    return frames


def read_depth_clip(directory: PathLike) -> Tuple[DepthClip, List[str]]:
    """Every PGM in the directory, in lexicographic file-name order."""
    paths = list_depth_frames(directory)
    frames = [read_depth(p) for p in paths]
    try:
        clip = DepthClip(frames=frames)
    except ValidationError as e:
        raise FormatError(f"inconsistent depth frames: {e.errors()[0]['msg']}", path=str(directory))
    logger.info(f"Loaded {len(clip)} depth frames of {clip.shape[0]}x{clip.shape[1]} from {directory}")
    return clip, [p.name for p in paths]


def write_depth_clip(directory: PathLike, clip: DepthClip, names: Sequence[str]) -> None:
    root = ensure_directory(directory)
    for name, frame in zip(names, clip.frames):
        write_depth16(root / name, frame)


# ============================================
# Middlebury .flo
# ============================================

def read_flo(path: PathLike) -> FlowField:
    """
    Read a Middlebury .flo file: float32 tag 202021.25, int32 width,
    int32 height, then row-major interleaved (u, v) float32, little-endian.
    """
    raw = _read_bytes(path)
    if len(raw) < FLO_HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} of {FLO_HEADER.size} bytes", path=str(path), offset=len(raw))
    tag, width, height = FLO_HEADER.unpack_from(raw, 0)
    if tag != FLO_TAG:
        raise FormatError(f"bad tag {tag!r}, expected {FLO_TAG}", path=str(path), offset=0)
    if not (0 < width <= MAX_DIMENSION and 0 < height <= MAX_DIMENSION):
        raise FormatError(f"invalid dimensions {width}x{height}", path=str(path), offset=4)

    needed = width * height * 2 * 4
    available = len(raw) - FLO_HEADER.size
    if available < needed:
        raise FormatError(f"truncated payload: need {needed} bytes, found {available}", path=str(path), offset=len(raw))

    data = np.frombuffer(raw, dtype="<f4", count=width * height * 2, offset=FLO_HEADER.size)
    uv = data.reshape(height, width, 2).astype(np.float64)
    if not np.all(np.isfinite(uv)):
        bad = int(np.flatnonzero(~np.isfinite(data))[0])
        raise FormatError("non-finite flow value", path=str(path), offset=FLO_HEADER.size + 4 * bad)
    return FlowField.from_array(uv)


def write_flo(flow: FlowField, path: PathLike) -> None:
    header = FLO_HEADER.pack(FLO_TAG, flow.width, flow.height)
    _write_bytes(path, header + flow.as_array().astype("<f4").tobytes())


# ============================================
# Logits container
# ============================================

def read_logits(path: PathLike) -> Logits:
    """
    Little-endian: magic "MLTN", u32 version (1), u32 height, u32 width,
    u32 channels, then float32 scores row-major with the channel fastest.
    """
    raw = _read_bytes(path)
    if len(raw) < LOGITS_HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} of {LOGITS_HEADER.size} bytes", path=str(path), offset=len(raw))
    magic, version, height, width, channels = LOGITS_HEADER.unpack_from(raw, 0)
    if magic != LOGITS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {LOGITS_MAGIC!r}", path=str(path), offset=0)
    if version != LOGITS_VERSION:
        raise FormatError(f"unsupported version {version}", path=str(path), offset=4)
    if not (0 < height <= MAX_DIMENSION and 0 < width <= MAX_DIMENSION and 2 <= channels <= 256):
        raise FormatError(f"invalid dimensions {height}x{width}x{channels}", path=str(path), offset=8)

    count = height * width * channels
    available = len(raw) - LOGITS_HEADER.size
    if available < 4 * count:
        raise FormatError(f"truncated payload: need {4 * count} bytes, found {available}", path=str(path), offset=len(raw))
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=LOGITS_HEADER.size)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data))[0])
        raise FormatError("non-finite score", path=str(path), offset=LOGITS_HEADER.size + 4 * bad)
    return Logits(scores=data.reshape(height, width, channels).astype(np.float64))


def write_logits(logits: Logits, path: PathLike) -> None:
    height, width = logits.shape
    header = LOGITS_HEADER.pack(LOGITS_MAGIC, LOGITS_VERSION, height, width, logits.classes)
    _write_bytes(path, header + logits.scores.astype("<f4").tobytes())


# ============================================
# CSV tables
# ============================================

def read_matrix(path: PathLike) -> np.ndarray:
    """Headerless comma-separated matrix (rows = feature dims, columns = samples)."""
    lines = _read_bytes(path).decode("utf-8", errors="replace").splitlines()
    try:
        with warnings.catch_warnings():
            # an empty input only warns; it is rejected below
            warnings.simplefilter("ignore", UserWarning)
            matrix = np.loadtxt(lines, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise FormatError(f"malformed matrix: {e}", path=str(path))
    if matrix.size == 0:
        raise FormatError("empty matrix", path=str(path))
    if not np.all(np.isfinite(matrix)):
        raise FormatError("non-finite entry", path=str(path))
    return matrix


def _save_table(path: PathLike, rows: np.ndarray, fmt: Union[str, List[str]], header: str = "") -> None:
    try:
        np.savetxt(path, rows, fmt=fmt, delimiter=",", header=header, comments="")
    except OSError as e:
        raise FormatError(f"cannot write file: {e.strerror or e}", path=str(path))


def write_matrix(path: PathLike, matrix: np.ndarray) -> None:
    _save_table(path, np.atleast_2d(np.asarray(matrix, dtype=np.float64)), fmt="%.17g")


def write_crops(path: PathLike, plan: CropPlan) -> None:
    rows = np.array([[c.image_index, c.x, c.y, c.w, c.h] for c in plan.crops], dtype=np.int64).reshape(-1, 5)
    _save_table(path, rows, fmt="%d", header="image_index,x,y,w,h")


def write_trace(path: PathLike, trace: Sequence[LossReport]) -> None:
    """Loss trace as CSV with columns iter,total,pixel,smooth,ssim."""
    rows = np.array(
        [[i, r.total, r.raw("pixel"), r.raw("smooth"), r.raw("ssim")] for i, r in enumerate(trace)],
        dtype=np.float64,
    ).reshape(-1, 5)
    _save_table(path, rows, fmt=["%d"] + ["%.10g"] * 4, header="iter,total,pixel,smooth,ssim")


# ============================================
# Factorization bundles
# ============================================

def save_factorization(directory: PathLike, fact: Factorization) -> None:
    """U.csv, W.csv, V.csv and a meta.txt of `key = value` lines."""
    root = ensure_directory(directory)
    write_matrix(root / "U.csv", fact.U)
    write_matrix(root / "W.csv", fact.W)
    write_matrix(root / "V.csv", fact.V)
    meta = [
        f"D = {fact.dim}",
        f"eta = {format(fact.eta, '.17g')}",
        f"iterations = {fact.iterations}",
        f"converged = {str(fact.converged).lower()}",
        f"final_objective = {format(fact.final_objective, '.17g')}",
    ]
    _write_bytes(root / "meta.txt", ("\n".join(meta) + "\n").encode("utf-8"))


def _read_meta(path: Path) -> Dict[str, str]:
    meta = {}
    for lineno, line in enumerate(_read_bytes(path).decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'", path=str(path))
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def load_factorization(directory: PathLike) -> Factorization:
    root = Path(directory)
    meta = _read_meta(root / "meta.txt")
    try:
        fact = Factorization(
            U=read_matrix(root / "U.csv"),
            W=read_matrix(root / "W.csv"),
            V=read_matrix(root / "V.csv"),
            eta=float(meta["eta"]),
            objective_trace=[float(meta["final_objective"])],
            iterations=int(meta["iterations"]),
            converged=meta.get("converged", "false") == "true",
        )
    except KeyError as e:
        raise FormatError(f"metadata is missing {e.args[0]!r}", path=str(root / "meta.txt"))
    except (ValueError, ValidationError) as e:
        raise FormatError(f"inconsistent factorization: {e}", path=str(root))
    if fact.dim != int(meta.get("D", fact.dim)):
        raise FormatError(f"meta.txt declares D = {meta['D']} but V has {fact.dim} rows", path=str(root))
    return fact
