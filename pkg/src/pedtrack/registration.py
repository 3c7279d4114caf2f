"""Intensity-based similarity registration against a patient's canonical frame.

Pipeline: segment both images, estimate poses, seed a coarse alignment from
moments (area ratio, principal axes, centroids), then refine by minimizing
the masked mean-squared luma difference on a 3-level image pyramid with
finite-difference gradient descent and a backtracking line search.

Everything here is deterministic: identical inputs produce bit-identical
results, because there is no randomized initialization anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import DegeneratePose, NoOverlap, RegistrationRejected
from .imaging import (
    BinaryMask,
    GrayImage,
    Pose,
    RasterImage,
    downsample2,
    estimate_pose,
    segment_foot,
    to_grayscale,
)
from .transform import ACCEPTED_SCALE_RANGE, SimilarityTransform, invert


@dataclass(frozen=True)
class RegistrationResult:
    """Outcome of refining a scan against the canonical frame.

    ``transform`` maps scan-frame pixels into the canonical frame;
    ``final_mse`` is the masked mean squared luma difference over the
    overlap at full resolution; ``overlap_fraction`` is the covered share
    of the reference foreground.
    """

    transform: SimilarityTransform
    final_mse: float
    overlap_fraction: float
    iterations: int
    converged: bool

    def to_dict(self) -> dict[str, Any]:
        d = self.transform.to_dict()
        d["final_mse"] = self.final_mse
        d["overlap"] = self.overlap_fraction
        d["converged"] = self.converged
        return d

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "RegistrationResult":
        return RegistrationResult(
            transform=SimilarityTransform.from_dict(d),
            final_mse=float(d["final_mse"]),
            overlap_fraction=float(d["overlap"]),
            iterations=int(d.get("iterations", 0)),
            converged=bool(d["converged"]),
        )


@dataclass(frozen=True)
class RefineConfig:
    """Optimizer constants; defaults are the contract values."""

    levels: int = 3
    max_iterations: int = 200
    rel_improvement_tol: float = 1e-5
    max_halvings: int = 20
    min_overlap: float = 0.25
    scale_min: float = ACCEPTED_SCALE_RANGE[0]
    scale_max: float = ACCEPTED_SCALE_RANGE[1]
    fd_step_px: float = 0.25
    init_step_px: float = 1.0
    max_step_px: float = 16.0


DEFAULT_CONFIG = RefineConfig()


def _bilinear(flat: np.ndarray, w: int, h: int, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample a row-major flat image at subpixel points.

    Returns (values, inside) where ``inside`` marks points within the
    image rectangle; values for outside points are unspecified and must be
    masked by the caller.
    """
    inside = (xs >= 0.0) & (xs <= w - 1.0) & (ys >= 0.0) & (ys <= h - 1.0)
    x0 = np.clip(np.floor(xs), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, h - 2).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    idx = y0 * w + x0
    g00 = flat[idx]
    g01 = flat[idx + 1]
    g10 = flat[idx + w]
    g11 = flat[idx + w + 1]
    top = g00 + fx * (g01 - g00)
    bottom = g10 + fx * (g11 - g10)
    return top + fy * (bottom - top), inside


def resample(
    img: GrayImage | RasterImage,
    t: SimilarityTransform,
    out_width: int,
    out_height: int,
    out_dpi: float | None = None,
) -> GrayImage | RasterImage:
    """Render ``img`` into the frame that ``t`` maps it into.

    Inverse mapping with bilinear interpolation; samples falling outside
    the source are 0. The output resolution defaults to the source dpi.
    """
    inv = invert(t)
    qx, qy = np.meshgrid(
        np.arange(out_width, dtype=np.float64), np.arange(out_height, dtype=np.float64)
    )
    sx, sy = inv.apply_xy(qx.ravel(), qy.ravel())
    dpi = img.dpi if out_dpi is None else out_dpi

    h, w = img.pixels.shape[:2]
    if isinstance(img, GrayImage):
        vals, inside = _bilinear(img.pixels.astype(np.float64).ravel(), w, h, sx, sy)
        vals = np.where(inside, vals, 0.0)
        out = np.clip(np.floor(vals + 0.5), 0, 255).astype(np.uint8)
        return GrayImage(out.reshape(out_height, out_width), dpi)

    channels = []
    for c in range(3):
        vals, inside = _bilinear(img.pixels[:, :, c].astype(np.float64).ravel(), w, h, sx, sy)
        vals = np.where(inside, vals, 0.0)
        channels.append(np.clip(np.floor(vals + 0.5), 0, 255).astype(np.uint8))
    out = np.stack([c.reshape(out_height, out_width) for c in channels], axis=2)
    return RasterImage(out, dpi)


def _downsample_mask(mask: BinaryMask) -> BinaryMask:
    """Halve a mask by majority over 2x2 blocks (ties go to foreground)."""
    as_gray = GrayImage(mask.bits.astype(np.uint8) * 255, 1.0)
    return BinaryMask(downsample2(as_gray).pixels >= 128)


class _MaskedMse:
    """Masked MSE of a moving image warped onto reference foreground points.

    The reference foreground coordinates and values are gathered once;
    each evaluation applies the inverse transform to them, samples moving
    luma bilinearly and the moving mask by nearest neighbor, and averages
    squared differences over the overlap.
    """

    def __init__(
        self,
        ref_img: np.ndarray,
        ref_mask: np.ndarray,
        mov_img: np.ndarray,
        mov_mask: np.ndarray,
    ) -> None:
        ys, xs = np.nonzero(ref_mask)
        self.xs = xs.astype(np.float64)
        self.ys = ys.astype(np.float64)
        self.ref_vals = ref_img[ys, xs].astype(np.float64)
        self.ref_count = xs.size
        self.mov_h, self.mov_w = mov_img.shape
        self.mov_flat = mov_img.astype(np.float64).ravel()
        self.mov_mask = mov_mask

    def evaluate(self, params: np.ndarray) -> tuple[float, int]:
        """Return (mse, overlap_count); mse is +inf when overlap is empty."""
        scale, theta, tx, ty = params
        a = math.cos(theta) / scale
        b = math.sin(theta) / scale
        xr = self.xs - tx
        yr = self.ys - ty
        mx = a * xr + b * yr
        my = a * yr - b * xr

        w, h = self.mov_w, self.mov_h
        vals, inside = _bilinear(self.mov_flat, w, h, mx, my)
        # Nearest-neighbor mask lookup keeps the overlap test cheap.
        nx = np.clip(np.floor(mx + 0.5), 0, w - 1).astype(np.int64)
        ny = np.clip(np.floor(my + 0.5), 0, h - 1).astype(np.int64)
        valid = inside & self.mov_mask[ny, nx]

        n = int(np.count_nonzero(valid))
        if n == 0:
            return math.inf, 0
        diff = np.where(valid, vals - self.ref_vals, 0.0)
        return float(np.dot(diff, diff) / n), n


def finite_difference_gradient(
    fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    scales: np.ndarray,
    step_px: float,
) -> np.ndarray:
    """Central-difference gradient in pixel-equivalent parameter space.

    ``scales`` converts each raw parameter into pixels of boundary motion,
    so a unit step means roughly one pixel of displacement regardless of
    which parameter moves.
    """
    grad = np.zeros(4)
    for i in range(4):
        h = step_px / scales[i]
        forward = params.copy()
        backward = params.copy()
        forward[i] += h
        backward[i] -= h
        grad[i] = (fn(forward) - fn(backward)) / (2.0 * step_px)
    return grad


def _char_radius(xs: np.ndarray, ys: np.ndarray) -> float:
    """RMS radius of foreground about its centroid; scales angle and
    scale steps into pixel units."""
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    return max(1.0, math.sqrt(float((dx * dx + dy * dy).mean())))


def _descend(
    objective: _MaskedMse,
    params: np.ndarray,
    config: RefineConfig,
) -> tuple[np.ndarray, float, int]:
    """Gradient descent with backtracking line search at one pyramid level."""

    def value(p: np.ndarray) -> float:
        if not (config.scale_min <= p[0] <= config.scale_max):
            return math.inf
        return objective.evaluate(p)[0]

    radius = _char_radius(objective.xs, objective.ys)
    scales = np.array([radius, radius, 1.0, 1.0])

    f_cur = value(params)
    step = config.init_step_px
    iterations = 0
    if not math.isfinite(f_cur):
        return params, f_cur, iterations

    for _ in range(config.max_iterations):
        grad = finite_difference_gradient(value, params, scales, config.fd_step_px)
        norm = float(np.linalg.norm(grad))
        if norm == 0.0 or not math.isfinite(norm):
            break
        direction = -grad / norm

        accepted = None
        trial = step
        for _ in range(config.max_halvings + 1):
            candidate = params + trial * direction / scales
            f_new = value(candidate)
            if f_new < f_cur:
                accepted = (candidate, f_new, trial)
                break
            trial /= 2.0
        if accepted is None:
            break

        candidate, f_new, trial = accepted
        improvement = (f_cur - f_new) / max(f_cur, 1e-12)
        params, f_cur = candidate, f_new
        iterations += 1
        step = min(trial * 2.0, config.max_step_px)
        if improvement < config.rel_improvement_tol:
            break
    return params, f_cur, iterations


def _build_pyramid(
    img: GrayImage, mask: BinaryMask, levels: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Finest-first list of (luma, mask) arrays."""
    out = [(img.pixels, mask.bits)]
    g, m = img, mask
    for _ in range(levels - 1):
        g = downsample2(g)
        m = _downsample_mask(m)
        out.append((g.pixels, m.bits))
    return out


def _effective_levels(config: RefineConfig, *dims: int) -> int:
    """Cap pyramid depth so the coarsest level keeps at least 8 px per side."""
    levels = config.levels
    smallest = min(dims)
    while levels > 1 and smallest // (2 ** (levels - 1)) < 8:
        levels -= 1
    return levels


def refine(
    moving_img: GrayImage,
    moving_mask: BinaryMask,
    ref_img: GrayImage,
    ref_mask: BinaryMask,
    init: SimilarityTransform,
    config: RefineConfig = DEFAULT_CONFIG,
) -> RegistrationResult:
    """Minimize masked MSE on a coarse-to-fine pyramid starting from ``init``.

    Parameters carry up between levels with translation doubled. The
    result is flagged not-converged when the final overlap covers less
    than ``config.min_overlap`` of the reference foreground. Raises
    NoOverlap when the initial alignment shares no pixels at all.
    """
    if moving_img.dpi != ref_img.dpi:
        raise ValueError("refine expects images sharing one dpi")

    levels = _effective_levels(
        config, moving_img.width, moving_img.height, ref_img.width, ref_img.height
    )
    mov_pyr = _build_pyramid(moving_img, moving_mask, levels)
    ref_pyr = _build_pyramid(ref_img, ref_mask, levels)

    factor = float(2 ** (levels - 1))
    params = np.array([init.scale, init.theta, init.tx / factor, init.ty / factor])
    init_full = np.array([init.scale, init.theta, init.tx, init.ty])

    total_iterations = 0
    f_final = math.inf
    objective = None
    for level in range(levels - 1, -1, -1):
        ref_l, ref_m = ref_pyr[level]
        mov_l, mov_m = mov_pyr[level]
        objective = _MaskedMse(ref_l, ref_m, mov_l, mov_m)

        if level == levels - 1:
            _, n0 = objective.evaluate(params)
            if n0 == 0:
                raise NoOverlap("initial alignment has zero mask overlap")
        if level == 0:
            # Guarantee the result never degrades the caller's init at
            # full resolution, whatever the coarse levels did.
            f_carried = objective.evaluate(params)[0]
            f_init = objective.evaluate(init_full)[0]
            if f_init < f_carried:
                params = init_full.copy()

        params, f_final, iters = _descend(objective, params, config)
        total_iterations += iters
        if level > 0:
            params = params.copy()
            params[2] *= 2.0
            params[3] *= 2.0

    final_mse, overlap_count = objective.evaluate(params)
    overlap_fraction = overlap_count / objective.ref_count if objective.ref_count else 0.0
    converged = (
        overlap_fraction >= config.min_overlap
        and config.scale_min <= params[0] <= config.scale_max
        and math.isfinite(final_mse)
    )
    transform = SimilarityTransform(params[0], params[1], params[2], params[3])
    return RegistrationResult(transform, final_mse, overlap_fraction, total_iterations, converged)


def _normalized_cross_correlation(objective: _MaskedMse, params: np.ndarray) -> float:
    """NCC between the masked luma fields under a candidate transform.

    Both sides are luma zeroed outside their foreground, compared over the
    whole reference foreground. Reference pixels landing off the moving
    foot therefore pull the score down instead of silently dropping out,
    which is what makes the 180-degree flip lose on an asymmetric shape.
    Returns -inf when nearly nothing overlaps.
    """
    scale, theta, tx, ty = params
    a = math.cos(theta) / scale
    b = math.sin(theta) / scale
    xr = objective.xs - tx
    yr = objective.ys - ty
    mx = a * xr + b * yr
    my = a * yr - b * xr
    vals, inside = _bilinear(objective.mov_flat, objective.mov_w, objective.mov_h, mx, my)
    nx = np.clip(np.floor(mx + 0.5), 0, objective.mov_w - 1).astype(np.int64)
    ny = np.clip(np.floor(my + 0.5), 0, objective.mov_h - 1).astype(np.int64)
    valid = inside & objective.mov_mask[ny, nx]
    if int(np.count_nonzero(valid)) < 8:
        return -math.inf
    a_vals = objective.ref_vals
    b_vals = np.where(valid, vals, 0.0)
    a_c = a_vals - a_vals.mean()
    b_c = b_vals - b_vals.mean()
    denom = math.sqrt(float(np.dot(a_c, a_c)) * float(np.dot(b_c, b_c)))
    if denom == 0.0:
        return 0.0
    return float(np.dot(a_c, b_c)) / denom


def _quarter(img: GrayImage, mask: BinaryMask) -> tuple[np.ndarray, np.ndarray]:
    g, m = img, mask
    for _ in range(2):
        if g.width < 2 or g.height < 2:
            break
        g = downsample2(g)
        m = _downsample_mask(m)
    return g.pixels, m.bits


def coarse_align(
    moving_mask: BinaryMask,
    moving_pose: Pose,
    ref_mask: BinaryMask,
    ref_pose: Pose,
    moving_img: GrayImage,
    ref_img: GrayImage,
) -> SimilarityTransform:
    """Moment-based seed: match areas, align principal axes, map centroids.

    The principal axis leaves a 180-degree ambiguity; both candidates are
    scored by normalized cross-correlation of masked luma at quarter
    resolution and the better one wins (ties keep the unflipped one).
    """
    if moving_pose.degenerate or ref_pose.degenerate:
        raise DegeneratePose("cannot align a rotationally symmetric mask")
    if moving_mask.count == 0 or ref_mask.count == 0:
        raise ValueError("coarse_align requires non-empty masks")

    scale = math.sqrt(ref_mask.count / moving_mask.count)
    base_theta = ref_pose.axis_angle - moving_pose.axis_angle

    ref_q, ref_qm = _quarter(ref_img, ref_mask)
    mov_q, mov_qm = _quarter(moving_img, moving_mask)
    shrink = ref_img.width / ref_q.shape[1]
    # A shrunken pixel j sits at full coordinate shrink*j + off, so the
    # translation picks up the offset through the rotation as well.
    off = (shrink - 1.0) / 2.0
    objective = _MaskedMse(ref_q, ref_qm, mov_q, mov_qm)

    best = None
    for flip in (0.0, math.pi):
        theta = base_theta + flip
        c = math.cos(theta) * scale
        s = math.sin(theta) * scale
        tx = ref_pose.cx - (c * moving_pose.cx - s * moving_pose.cy)
        ty = ref_pose.cy - (s * moving_pose.cx + c * moving_pose.cy)
        tx_q = (c * off - s * off + tx - off) / shrink
        ty_q = (s * off + c * off + ty - off) / shrink
        params = np.array([scale, theta, tx_q, ty_q])
        ncc = _normalized_cross_correlation(objective, params)
        if best is None or ncc > best[0]:
            best = (ncc, SimilarityTransform(scale, theta, tx, ty))
    return best[1]


def register_to_baseline(
    scan_img: RasterImage,
    baseline_img: RasterImage,
    config: RefineConfig = DEFAULT_CONFIG,
) -> RegistrationResult:
    """Full pipeline: segment both images, coarse align, refine.

    Raises EmptyForeground / DegeneratePose / NoOverlap from the stages,
    and RegistrationRejected when refinement finishes unconverged.
    """
    scan_mask = segment_foot(scan_img)
    base_mask = segment_foot(baseline_img)
    scan_pose = estimate_pose(scan_mask)
    base_pose = estimate_pose(base_mask)
    scan_gray = to_grayscale(scan_img)
    base_gray = to_grayscale(baseline_img)

    init = coarse_align(scan_mask, scan_pose, base_mask, base_pose, scan_gray, base_gray)
    result = refine(scan_gray, scan_mask, base_gray, base_mask, init, config)
    if not result.converged:
        raise RegistrationRejected(
            f"overlap {result.overlap_fraction:.2f} below floor or scale out of bounds"
        )
    return result


def identity_result() -> RegistrationResult:
    """The baseline scan's own registration record."""
    return RegistrationResult(SimilarityTransform.identity(), 0.0, 1.0, 0, True)
