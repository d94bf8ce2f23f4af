from typing import List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

# ============================================
# Universal representation learning schemas
# ============================================


class Factorization(BaseModel):
    """Nonnegative joint factorization A ~ U V, B ~ W V with shared V"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    U: np.ndarray  # M1 x D
    W: np.ndarray  # M2 x D
    V: np.ndarray  # D x N
    eta: float = Field(ge=0.0)
    objective_trace: List[float]
    iterations: int
    converged: bool

    @model_validator(mode="after")
    def _check(self) -> "Factorization":
        d = self.V.shape[0]
        if self.U.shape[1] != d or self.W.shape[1] != d:
            raise ValueError(f"U {self.U.shape}, W {self.W.shape} and V {self.V.shape} disagree on D")
        for name in ("U", "W", "V"):
            mat = getattr(self, name)
            if not np.all(np.isfinite(mat)) or mat.min() < 0:
                raise ValueError(f"{name} must be finite and non-negative")
        return self

    @property
    def dim(self) -> int:
        return self.V.shape[0]

    @property
    def final_objective(self) -> float:
        return self.objective_trace[-1]


class Projection(BaseModel):
    """D x M projection with orthonormal rows"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    matrix: np.ndarray
    singular_values: np.ndarray
    rank_deficient: bool = False

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.matrix @ X


class Projections(BaseModel):
    """Projections of the visual (A) and semantic (B) spaces into V"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    P_A: Projection
    P_B: Projection
    diagnostics: List[str] = Field(default_factory=list)
