"""Anomaly detection over canonical-frame scans and the analyzer registry.

Scars and other skin anomalies are scored as robust per-channel z values
against a median/MAD skin model fitted on the foreground, then grouped
into connected blobs. Additional analyzers plug into a registry and run
in registration order; a failing analyzer is recorded in the report
without aborting the rest.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy import ndimage

from .errors import EmptyForeground
from .imaging import BinaryMask, RasterImage

MAD_SCALE = 1.4826  # makes MAD estimate sigma for a Gaussian
MAD_FLOOR = 1.0  # luma units; keeps synthetic constant skin finite

DEFAULT_TAU = 3.5
DEFAULT_MIN_AREA = 25  # px at 150 dpi, about 0.7 mm^2

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
_NAME_RE = re.compile(r"^[a-z0-9_-]+$")


@dataclass(frozen=True)
class SkinModel:
    """Per-channel robust location and spread of foreground skin color."""

    medians: tuple[float, float, float]
    mads: tuple[float, float, float]


@dataclass(frozen=True)
class AnomalyBlob:
    id: int
    centroid: tuple[float, float]  # canonical-frame px (x, y)
    bbox: tuple[int, int, int, int]  # (x, y, w, h)
    area_px: int
    mean_score: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "centroid": [self.centroid[0], self.centroid[1]],
            "bbox": list(self.bbox),
            "area_px": self.area_px,
            "mean_score": self.mean_score,
        }


@dataclass
class AnalysisReport:
    scan_id: str
    analyzers: dict[str, Any]
    blobs: list[AnomalyBlob]
    produced_at: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "scan_id": self.scan_id,
            "analyzers": self.analyzers,
            "blobs": [b.to_dict() for b in self.blobs],
            "produced_at": self.produced_at,
        }


AnalyzerFn = Callable[[RasterImage, BinaryMask, SkinModel], dict[str, Any]]


@dataclass(frozen=True)
class AnalyzerDescriptor:
    name: str
    version: str
    run: AnalyzerFn


class AnalyzerRegistry:
    """Ordered analyzer registry; immutable once the service starts."""

    def __init__(self) -> None:
        self._analyzers: dict[str, AnalyzerDescriptor] = {}

    def register(self, descriptor: AnalyzerDescriptor) -> None:
        if not _NAME_RE.match(descriptor.name):
            raise ValueError(f"analyzer name {descriptor.name!r} must match [a-z0-9_-]+")
        if descriptor.name in self._analyzers:
            raise ValueError(f"duplicate analyzer name {descriptor.name!r}")
        self._analyzers[descriptor.name] = descriptor

    def names(self) -> list[str]:
        return list(self._analyzers)

    def __iter__(self):
        return iter(self._analyzers.values())

    def __contains__(self, name: str) -> bool:
        return name in self._analyzers


def fit_skin_model(img: RasterImage, mask: BinaryMask) -> SkinModel:
    """Per-channel median and scaled MAD over foreground pixels only."""
    if mask.count == 0:
        raise EmptyForeground("cannot fit a skin model on an empty mask")
    fg = img.pixels[mask.bits].astype(np.float64)  # (n, 3)
    medians = np.median(fg, axis=0)
    mads = MAD_SCALE * np.median(np.abs(fg - medians), axis=0)
    mads = np.maximum(mads, MAD_FLOOR)
    return SkinModel(tuple(float(m) for m in medians), tuple(float(m) for m in mads))


def anomaly_score_map(img: RasterImage, mask: BinaryMask, model: SkinModel) -> np.ndarray:
    """Per-pixel robust color distance from the skin model.

    score(p) = sqrt(sum_c ((I_c - median_c) / MAD_c)^2 / 3) on foreground,
    0 on background.
    """
    rgb = img.pixels.astype(np.float64)
    acc = np.zeros(rgb.shape[:2])
    for c in range(3):
        z = (rgb[:, :, c] - model.medians[c]) / model.mads[c]
        acc += z * z
    score = np.sqrt(acc / 3.0)
    score[~mask.bits] = 0.0
    return score


def detect_blobs(
    score_map: np.ndarray,
    tau: float = DEFAULT_TAU,
    min_area: int = DEFAULT_MIN_AREA,
) -> list[AnomalyBlob]:
    """Threshold, 8-connect, drop small components, sort by area descending.

    Ties in area break by the first row-major pixel of each component, so
    blob ids and ordering are stable for identical inputs.
    """
    above = score_map > tau
    labels, n = ndimage.label(above, structure=_EIGHT_CONNECTED)
    if n == 0:
        return []

    counts = np.bincount(labels.ravel())
    order = []
    for label in range(1, n + 1):
        area = int(counts[label])
        if area < min_area:
            continue
        # scipy labels components in row-major discovery order, so the
        # label index already encodes the first-pixel tie-break.
        order.append((-area, label))
    order.sort()

    blobs = []
    for blob_id, (neg_area, label) in enumerate(order, start=1):
        ys, xs = np.nonzero(labels == label)
        x0, x1 = int(xs.min()), int(xs.max())
        y0, y1 = int(ys.min()), int(ys.max())
        blobs.append(
            AnomalyBlob(
                id=blob_id,
                centroid=(float(xs.mean()), float(ys.mean())),
                bbox=(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
                area_px=-neg_area,
                mean_score=float(score_map[ys, xs].mean()),
            )
        )
    return blobs


def scar_detect_analyzer(
    img: RasterImage, mask: BinaryMask, model: SkinModel
) -> dict[str, Any]:
    """Built-in scar detector: robust z-score map -> thresholded blobs."""
    score = anomaly_score_map(img, mask, model)
    blobs = detect_blobs(score)
    return {
        "tau": DEFAULT_TAU,
        "min_area_px": DEFAULT_MIN_AREA,
        "blobs": [b.to_dict() for b in blobs],
    }


SCAR_DETECT = AnalyzerDescriptor("scar_detect", "1", scar_detect_analyzer)


def default_registry() -> AnalyzerRegistry:
    registry = AnalyzerRegistry()
    registry.register(SCAR_DETECT)
    return registry


def run_analyzers(
    scan_id: str,
    img: RasterImage,
    mask: BinaryMask,
    registry: AnalyzerRegistry,
    clock: Callable[[], float] = time.time,
) -> AnalysisReport:
    """Run every registered analyzer; failures become error entries."""
    if "scar_detect" not in registry:
        raise ValueError("registry must contain the built-in scar_detect analyzer")

    model = fit_skin_model(img, mask)
    outputs: dict[str, Any] = {}
    blobs: list[AnomalyBlob] = []
    for descriptor in registry:
        try:
            result = descriptor.run(img, mask, model)
            outputs[descriptor.name] = result
            if descriptor.name == "scar_detect":
                blobs = [
                    AnomalyBlob(
                        id=b["id"],
                        centroid=(b["centroid"][0], b["centroid"][1]),
                        bbox=tuple(b["bbox"]),
                        area_px=b["area_px"],
                        mean_score=b["mean_score"],
                    )
                    for b in result["blobs"]
                ]
        except Exception as exc:
            outputs[descriptor.name] = {"error": f"{type(exc).__name__}: {exc}"}
    return AnalysisReport(scan_id, outputs, blobs, produced_at=clock())
