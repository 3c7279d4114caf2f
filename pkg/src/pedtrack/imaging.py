"""Pixel-level primitives: image model, grayscale, thresholding, segmentation,
connected components, orientation and physical measurement.

All operations are pure functions on immutable values. The rounding
convention everywhere is round-half-away-from-zero; for the non-negative
quantities handled here that is ``floor(x + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyForeground

# Minimum fraction of the frame the kept component must cover before we
# believe there is an appendage on the platen.
MIN_FOREGROUND_FRACTION = 0.005

# Rec.601 luma weights, fixed so every deployment agrees bit-for-bit.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def _round_half_up(values: np.ndarray) -> np.ndarray:
    """Round-half-away-from-zero for non-negative float arrays."""
    return np.floor(values + 0.5)


@dataclass(frozen=True, eq=False)
class RasterImage:
    """8-bit RGB image with a physical resolution in dots per inch."""

    pixels: np.ndarray  # (height, width, 3) uint8, row-major
    dpi: float

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("RasterImage expects a (h, w, 3) pixel array")
        if not self.dpi > 0:
            raise ValueError("dpi must be positive")
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit single-channel image with a physical resolution."""

    pixels: np.ndarray  # (height, width) uint8, row-major
    dpi: float

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("GrayImage expects a (h, w) pixel array")
        if not self.dpi > 0:
            raise ValueError("dpi must be positive")
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Row-major boolean foreground flags over an image grid."""

    bits: np.ndarray  # (height, width) bool

    def __post_init__(self) -> None:
        b = np.asarray(self.bits, dtype=bool)
        if b.ndim != 2 or b.shape[0] < 1 or b.shape[1] < 1:
            raise ValueError("BinaryMask expects a (h, w) boolean array")
        b = np.ascontiguousarray(b)
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))


@dataclass(frozen=True)
class Pose:
    """Centroid and principal-axis angle of a mask.

    ``axis_angle`` is in radians, measured from the +x axis, folded into
    the half-open interval (-pi/2, pi/2]. ``degenerate`` is set when the
    second moments admit no defined axis (rotational symmetry); the angle
    is then reported as 0.
    """

    cx: float
    cy: float
    axis_angle: float
    degenerate: bool = field(default=False)


def to_grayscale(img: RasterImage) -> GrayImage:
    """Convert RGB to 8-bit luma using Rec.601 weights."""
    rgb = img.pixels.astype(np.float64)
    luma = (
        LUMA_WEIGHTS[0] * rgb[:, :, 0]
        + LUMA_WEIGHTS[1] * rgb[:, :, 1]
        + LUMA_WEIGHTS[2] * rgb[:, :, 2]
    )
    out = np.clip(_round_half_up(luma), 0, 255).astype(np.uint8)
    return GrayImage(out, img.dpi)


def otsu_threshold(img: GrayImage) -> int:
    """Threshold maximizing between-class variance over the 256-bin histogram.

    Foreground is defined as ``luma > t``. A constant image returns the
    constant value itself (empty foreground). Ties take the smallest t.

    The comparison runs in exact integer arithmetic so tied thresholds
    order identically on every platform: the between-class variance at t
    is proportional to D(t)^2 / (n0 * n1) with D = S0*n1 - S1*n0, and
    fractions are compared by cross-multiplication.
    """
    hist = np.bincount(img.pixels.ravel(), minlength=256).tolist()
    total = img.pixels.size
    nonzero = [t for t, c in enumerate(hist) if c]
    if nonzero[0] == nonzero[-1]:
        return nonzero[0]

    s_total = sum(t * c for t, c in enumerate(hist))
    best_t = 0
    best_num = 0  # D^2 of the best threshold so far
    best_den = 1  # n0 * n1 of the best threshold so far
    n0 = 0
    s0 = 0
    for t in range(256):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        d = s0 * n1 - (s_total - s0) * n0
        num = d * d
        if num * best_den > best_num * n0 * n1:
            best_t = t
            best_num = num
            best_den = n0 * n1
    return best_t


def largest_component(mask: BinaryMask) -> BinaryMask:
    """Keep only the 8-connected component of maximal pixel count.

    Ties break toward the component whose first pixel in row-major order
    comes earliest. An empty mask maps to an empty mask.
    """
    labels, n = ndimage.label(mask.bits, structure=_EIGHT_CONNECTED)
    if n == 0:
        return BinaryMask(np.zeros_like(mask.bits))
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    # scipy assigns labels in row-major discovery order, so the first
    # maximal label is also the one with the earliest first pixel.
    best = int(np.argmax(counts))
    return BinaryMask(labels == best)


def fill_holes(mask: BinaryMask) -> BinaryMask:
    """Fill background regions not connected to the image border."""
    return BinaryMask(ndimage.binary_fill_holes(mask.bits))


def _border_median(gray: np.ndarray) -> float:
    h, w = gray.shape
    if h <= 2 or w <= 2:
        return float(np.median(gray))
    edges = np.concatenate(
        [gray[0, :], gray[-1, :], gray[1:-1, 0], gray[1:-1, -1]]
    )
    return float(np.median(edges))


def segment_foot(img: RasterImage) -> BinaryMask:
    """Segment the appendage: Otsu split, polarity by border luma, largest
    component, hole fill.

    The foreground class is the one whose mean luma is farther from the
    median luma of the 1-pixel border (scanner lids may be white or black).
    Raises EmptyForeground when the kept component covers less than 0.5%
    of the frame.
    """
    gray = to_grayscale(img)
    t = otsu_threshold(gray)
    px = gray.pixels
    high = px > t
    n_high = int(np.count_nonzero(high))
    n_low = px.size - n_high

    if n_high == 0 or n_low == 0:
        # Constant image or degenerate split: nothing to keep.
        raise EmptyForeground("no foreground class after thresholding")

    background = _border_median(px)
    mean_high = float(px[high].mean())
    mean_low = float(px[~high].mean())
    # Ties go to the bright class for determinism.
    if abs(mean_high - background) >= abs(mean_low - background):
        fg = high
    else:
        fg = ~high

    component = largest_component(BinaryMask(fg))
    if component.count < MIN_FOREGROUND_FRACTION * px.size:
        raise EmptyForeground("largest component below 0.5% of frame")
    return fill_holes(component)


_DEGENERACY_EPS = 1e-9


def estimate_pose(mask: BinaryMask) -> Pose:
    """Centroid from first moments, axis angle from second central moments.

    angle = 0.5 * atan2(2*mu11, mu20 - mu02), folded into (-pi/2, pi/2].
    A rotationally symmetric mask (mu20 == mu02 and mu11 == 0 up to
    numerical dust) is flagged degenerate with angle 0.
    """
    ys, xs = np.nonzero(mask.bits)
    if xs.size == 0:
        raise ValueError("estimate_pose requires a non-empty mask")
    cx = float(xs.mean())
    cy = float(ys.mean())
    dx = xs - cx
    dy = ys - cy
    mu20 = float(np.dot(dx, dx))
    mu02 = float(np.dot(dy, dy))
    mu11 = float(np.dot(dx, dy))

    magnitude = mu20 + mu02
    if abs(mu20 - mu02) <= _DEGENERACY_EPS * magnitude and abs(mu11) <= _DEGENERACY_EPS * magnitude:
        return Pose(cx, cy, 0.0, degenerate=True)

    angle = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)
    while angle > math.pi / 2:
        angle -= math.pi
    while angle <= -math.pi / 2:
        angle += math.pi
    return Pose(cx, cy, angle)


def measure_distance(p1: tuple[float, float], p2: tuple[float, float], dpi: float) -> float:
    """Euclidean distance between two pixel points in millimeters."""
    if not dpi > 0:
        raise ValueError("dpi must be positive")
    return math.hypot(p2[0] - p1[0], p2[1] - p1[1]) / dpi * 25.4


def downsample2(img: GrayImage) -> GrayImage:
    """Halve resolution with a 2x2 box filter; dimensions floor, dpi halves."""
    h, w = img.pixels.shape
    if h < 2 or w < 2:
        raise ValueError("downsample2 requires width and height >= 2")
    h2, w2 = h // 2, w // 2
    a = img.pixels[: 2 * h2, : 2 * w2].astype(np.uint32)
    block = a[0::2, 0::2] + a[0::2, 1::2] + a[1::2, 0::2] + a[1::2, 1::2]
    # (sum + 2) // 4 is round-half-away-from-zero of sum / 4 for ints >= 0.
    out = ((block + 2) // 4).astype(np.uint8)
    return GrayImage(out, img.dpi / 2.0)
