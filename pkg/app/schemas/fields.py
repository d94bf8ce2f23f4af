from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

# ============================================
# Dense 2D field types
# ============================================

VOID = 255  # reserved label id, excluded from losses and metrics


def _frozen_array(value, dtype) -> np.ndarray:
    arr = np.array(value, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


class Image(BaseModel):
    """Raster in [0, 1] stored as (height, width, channels), channels 1 or 3."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray

    @field_validator("data", mode="before")
    @classmethod
    def _coerce(cls, value):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return _frozen_array(arr, np.float64)

    @field_validator("data")
    @classmethod
    def _check(cls, arr: np.ndarray) -> np.ndarray:
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image must be (height, width, channels), got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise ValueError(f"image must have 1 or 3 channels, got {arr.shape[2]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        return arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)


class FlowField(BaseModel):
    """
    Per-pixel displacement in pixels.
    u moves along columns (+ rightward), v along rows (+ downward),
    the Middlebury .flo convention.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    u: np.ndarray
    v: np.ndarray

    @field_validator("u", "v", mode="before")
    @classmethod
    def _coerce(cls, value):
        return _frozen_array(value, np.float64)

    @model_validator(mode="after")
    def _check(self) -> "FlowField":
        if self.u.ndim != 2 or self.u.shape != self.v.shape:
            raise ValueError(f"u and v must be equal 2D arrays, got {self.u.shape} and {self.v.shape}")
        if self.u.shape[0] < 1 or self.u.shape[1] < 1:
            raise ValueError("flow field must be at least 1x1")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow field contains non-finite values")
        return self

    @classmethod
    def from_array(cls, uv: np.ndarray) -> "FlowField":
        uv = np.asarray(uv)
        return cls(u=uv[..., 0], v=uv[..., 1])

    @classmethod
    def constant(cls, height: int, width: int, u: float, v: float) -> "FlowField":
        return cls(u=np.full((height, width), float(u)), v=np.full((height, width), float(v)))

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls.constant(height, width, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple:
        return self.u.shape


class LabelMap(BaseModel):
    """Per-pixel class ids in [0, num_classes) or VOID."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    ids: np.ndarray
    num_classes: Optional[int] = None

    @field_validator("ids", mode="before")
    @classmethod
    def _coerce(cls, value):
        arr = np.asarray(value)
        if arr.dtype.kind not in "biuf":
            raise ValueError(f"label ids must be numeric, got dtype {arr.dtype}")
        if arr.size and (arr.min() < 0 or arr.max() > VOID):
            raise ValueError(f"label ids must lie in [0, {VOID}]")
        if arr.dtype.kind == "f" and not np.array_equal(arr, np.round(arr)):
            raise ValueError("label ids must be whole numbers")
        return _frozen_array(arr, np.uint8)

    @model_validator(mode="after")
    def _check(self) -> "LabelMap":
        if self.ids.ndim != 2 or self.ids.shape[0] < 1 or self.ids.shape[1] < 1:
            raise ValueError(f"label map must be a non-empty 2D array, got shape {self.ids.shape}")
        if self.num_classes is not None:
            if not 1 <= self.num_classes <= VOID:
                raise ValueError(f"num_classes must be in [1, {VOID}], got {self.num_classes}")
            valid = self.ids[self.ids != VOID]
            if valid.size and int(valid.max()) >= self.num_classes:
                raise ValueError(f"label id {int(valid.max())} exceeds declared class count {self.num_classes}")
        return self

    @property
    def shape(self) -> tuple:
        return self.ids.shape

    @property
    def valid(self) -> np.ndarray:
        return self.ids != VOID


class OcclusionMask(BaseModel):
    """Binary per-pixel flags, 1 = occluded."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    flags: np.ndarray

    @field_validator("flags", mode="before")
    @classmethod
    def _coerce(cls, value):
        arr = np.asarray(value)
        if arr.ndim != 2:
            raise ValueError(f"occlusion mask must be 2D, got shape {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("occlusion mask must be binary")
        return _frozen_array(arr, np.uint8)

    @property
    def shape(self) -> tuple:
        return self.flags.shape

    @property
    def occluded_fraction(self) -> float:
        return float(self.flags.mean())


class Logits(BaseModel):
    """Unnormalized per-pixel class scores stored as (height, width, classes)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    scores: np.ndarray

    @field_validator("scores", mode="before")
    @classmethod
    def _coerce(cls, value):
        return _frozen_array(value, np.float64)

    @field_validator("scores")
    @classmethod
    def _check(cls, arr: np.ndarray) -> np.ndarray:
        if arr.ndim != 3 or arr.shape[2] < 2:
            raise ValueError(f"logits must be (height, width, classes>=2), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("logits contain non-finite values")
        return arr

    @property
    def shape(self) -> tuple:
        return self.scores.shape[:2]

    @property
    def classes(self) -> int:
        return self.scores.shape[2]
