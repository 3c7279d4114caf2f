"""4-parameter similarity transforms between pixel frames.

A transform maps a point p via q = scale * R(theta) * p + (tx, ty), with
R the usual rotation matrix in image coordinates (x right, y down). These
carry the spatial correspondence between each scan and the patient's
canonical frame, so the algebra must be exact: compose/invert/apply are
closed-form and form a group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

# Scale bounds outside which a registration result is never accepted.
ACCEPTED_SCALE_RANGE = (0.5, 2.0)


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    theta: float
    tx: float
    ty: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.scale, self.theta, self.tx, self.ty)):
            raise ValueError("transform parameters must be finite")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(1.0, 0.0, 0.0, 0.0)

    def apply(self, p: tuple[float, float]) -> tuple[float, float]:
        """Map a single point, subpixel precision."""
        c = math.cos(self.theta) * self.scale
        s = math.sin(self.theta) * self.scale
        x, y = p
        return (c * x - s * y + self.tx, s * x + c * y + self.ty)

    def apply_xy(self, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized point mapping."""
        c = math.cos(self.theta) * self.scale
        s = math.sin(self.theta) * self.scale
        return (c * xs - s * ys + self.tx, s * xs + c * ys + self.ty)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scale": self.scale,
            "theta_rad": self.theta,
            "tx_px": self.tx,
            "ty_px": self.ty,
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "SimilarityTransform":
        return SimilarityTransform(
            float(d["scale"]), float(d["theta_rad"]), float(d["tx_px"]), float(d["ty_px"])
        )


def apply_point(t: SimilarityTransform, p: tuple[float, float]) -> tuple[float, float]:
    return t.apply(p)


def compose(a: SimilarityTransform, b: SimilarityTransform) -> SimilarityTransform:
    """(a o b)(p) = a(b(p)): scale multiplies, angles add, b's translation
    is carried through a."""
    tbx, tby = a.apply((b.tx, b.ty))
    return SimilarityTransform(a.scale * b.scale, a.theta + b.theta, tbx, tby)


def invert(t: SimilarityTransform) -> SimilarityTransform:
    """Closed-form inverse: invert(t)(t(p)) = p."""
    inv_scale = 1.0 / t.scale
    c = math.cos(-t.theta) * inv_scale
    s = math.sin(-t.theta) * inv_scale
    return SimilarityTransform(
        inv_scale, -t.theta, -(c * t.tx - s * t.ty), -(s * t.tx + c * t.ty)
    )
