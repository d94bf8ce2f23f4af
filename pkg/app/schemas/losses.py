import math
from typing import Dict, List, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

# ============================================
# Loss configuration
# ============================================

# Per-scale weights from coarsest to finest
DEFAULT_DELTA = (0.16, 0.08, 0.04, 0.02, 0.01)


class LossWeights(BaseModel):
    """Term weights and robust-penalty parameters of the photometric objective"""
    model_config = ConfigDict(frozen=True)

    lambda1: float = Field(default=1.0, ge=0.0)  # pixel reconstruction
    lambda2: float = Field(default=0.1, ge=0.0)  # smoothness
    lambda3: float = Field(default=1.0, ge=0.0)  # SSIM
    delta: Tuple[float, ...] = DEFAULT_DELTA
    alpha_pixel: float = Field(default=0.45, gt=0.0, le=1.0)
    alpha_smooth: float = Field(default=0.45, gt=0.0, le=1.0)
    epsilon: float = Field(default=0.001, gt=0.0)

    @model_validator(mode="after")
    def _check_delta(self) -> "LossWeights":
        if any(d < 0 for d in self.delta):
            raise ValueError("per-scale weights must be non-negative")
        return self

    @classmethod
    def original_unsupervised(cls, **overrides) -> "LossWeights":
        """Exponents of the first unsupervised formulation (0.4 data, 0.3 smoothness)."""
        params = {"alpha_pixel": 0.4, "alpha_smooth": 0.3}
        params.update(overrides)
        return cls(**params)


# ============================================
# Loss reports
# ============================================

class LossTerm(BaseModel):
    """One named contribution to an objective"""
    model_config = ConfigDict(frozen=True)

    raw: float
    weight: float
    weighted: float


class LossReport(BaseModel):
    """Named loss terms with weights and their weighted total"""
    model_config = ConfigDict(frozen=True)

    terms: Dict[str, LossTerm]
    total: float
    diagnostics: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_total(self) -> "LossReport":
        expected = math.fsum(t.weighted for t in self.terms.values())
        if not math.isclose(self.total, expected, rel_tol=1e-12, abs_tol=1e-300):
            raise ValueError(f"total {self.total} does not equal the sum of weighted terms {expected}")
        return self

    @classmethod
    def from_terms(cls, terms: Dict[str, Tuple[float, float]], diagnostics: List[str] | None = None) -> "LossReport":
        """Build a report from {name: (raw value, weight)}."""
        built = {
            name: LossTerm(raw=float(raw), weight=float(weight), weighted=float(raw) * float(weight))
            for name, (raw, weight) in terms.items()
        }
        total = math.fsum(t.weighted for t in built.values())
        return cls(terms=built, total=total, diagnostics=list(diagnostics or []))

    def raw(self, name: str) -> float:
        return self.terms[name].raw

    def to_lines(self) -> List[str]:
        """Plain-text `name=value` listing, total last."""
        lines = [f"{name}={format_value(term.raw)}" for name, term in self.terms.items()]
        lines.append(f"total={format_value(self.total)}")
        return lines


def format_value(value: float) -> str:
    """Locale-independent decimal formatting with at least 6 significant digits."""
    return format(float(value), ".10g")
