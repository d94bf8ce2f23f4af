from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator


class DepthClip(BaseModel):
    """Ordered single-channel relative depth frames, all the same shape"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    frames: List[np.ndarray] = Field(min_length=1)

    @field_validator("frames", mode="before")
    @classmethod
    def _coerce(cls, value):
        frames = []
        for f in value:
            arr = np.array(f, dtype=np.float64, copy=True)
            arr.setflags(write=False)
            frames.append(arr)
        return frames

    @field_validator("frames")
    @classmethod
    def _check(cls, frames: List[np.ndarray]) -> List[np.ndarray]:
        shape = frames[0].shape
        for i, f in enumerate(frames):
            if f.ndim != 2 or f.shape != shape:
                raise ValueError(f"frame {i} has shape {f.shape}, expected 2D {shape}")
            if not np.all(np.isfinite(f)) or f.min() < 0:
                raise ValueError(f"frame {i} must be finite and non-negative")
        return frames

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple:
        return self.frames[0].shape

    def stacked(self) -> np.ndarray:
        return np.stack(self.frames, axis=0)


class CropSample(BaseModel):
    """A crop rectangle inside one image of a labelled set"""
    model_config = ConfigDict(frozen=True)

    image_index: int = Field(ge=0)
    x: int = Field(ge=0)
    y: int = Field(ge=0)
    w: int = Field(ge=1)
    h: int = Field(ge=1)
    class_id: Optional[int] = None  # None for uniform-random crops


class CropPlan(BaseModel):
    """Class-uniform crop list plus degenerate-input diagnostics"""
    model_config = ConfigDict(frozen=True)

    crops: List[CropSample]
    diagnostics: List[str] = Field(default_factory=list)


class StdnScales(BaseModel):
    """Scale factor per (frame, third); thirds ordered top, middle, bottom"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    scales: np.ndarray  # (frames, 3)
    references: np.ndarray  # (windows, 3) subvolume 95th percentiles
    diagnostics: List[str] = Field(default_factory=list)
