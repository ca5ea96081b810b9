from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy import ndimage

from .imgio import GrayImage, sample_bilinear
from .scalespace import EvolutionLevel, GaussianPyramid, NonlinearScaleSpace, gaussian_blur

logger = logging.getLogger("crackalign.detect")

FloatArray = npt.NDArray[np.float64]
ScaleSpace = Union[NonlinearScaleSpace, GaussianPyramid]

HESSIAN_THRESHOLD = 1e-4
DOG_CONTRAST = 0.03
MAX_OFFSET = 0.5
TWO_PI = 2.0 * math.pi

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy).
FAST_CIRCLE = (
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
)
FAST_RADIUS = 3

ORIENTATION_RADIUS = 6
ORIENTATION_SECTOR = math.pi / 3
ORIENTATION_STEP = math.pi / 36


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    sigma: float
    level: int
    response: float
    orientation: float = 0.0
    detector: str = "nonlinear-hessian"

    def sort_key(self) -> Tuple[float, float, float]:
        return (-self.response, self.y, self.x)


def canonical_order(keypoints: Sequence[Keypoint], limit: Optional[int] = None) -> List[Keypoint]:
    """Response descending, then y, then x; optionally keep the strongest `limit`."""
    ordered = sorted(keypoints, key=Keypoint.sort_key)
    if limit is not None and limit >= 0:
        ordered = ordered[:limit]
    return ordered


def hessian_response(level: EvolutionLevel) -> FloatArray:
    """Scale-normalized determinant of the Hessian, sigma^4 (Lxx Lyy - Lxy^2)."""
    s = level.sigma_level
    return (s**4) * (level.Lxx * level.Lyy - level.Lxy * level.Lxy)


def _to_grid(arr: FloatArray, shape: Tuple[int, int]) -> FloatArray:
    """Resample a neighbouring level onto `shape`: decimate finer grids, nearest-upsample coarser ones."""
    if arr.shape == shape:
        return arr
    if arr.shape[0] > shape[0]:
        ratio = int(round(arr.shape[0] / shape[0]))
        return arr[::ratio, ::ratio][: shape[0], : shape[1]]
    ratio = int(round(shape[0] / arr.shape[0]))
    up = np.repeat(np.repeat(arr, ratio, axis=0), ratio, axis=1)
    return up[: shape[0], : shape[1]]


_RING = np.ones((3, 3), dtype=bool)
_RING_NO_CENTER = _RING.copy()
_RING_NO_CENTER[1, 1] = False


def _strict_extrema(below: FloatArray, here: FloatArray, above: FloatArray, maxima_only: bool) -> npt.NDArray[np.bool_]:
    def neighbour_max(arr, footprint):
        return ndimage.maximum_filter(arr, footprint=footprint, mode="constant", cval=-np.inf)

    def neighbour_min(arr, footprint):
        return ndimage.minimum_filter(arr, footprint=footprint, mode="constant", cval=np.inf)

    nmax = np.maximum.reduce([neighbour_max(below, _RING), neighbour_max(here, _RING_NO_CENTER), neighbour_max(above, _RING)])
    is_ext = here > nmax
    if not maxima_only:
        nmin = np.minimum.reduce(
            [neighbour_min(below, _RING), neighbour_min(here, _RING_NO_CENTER), neighbour_min(above, _RING)]
        )
        is_ext |= here < nmin
    is_ext[0, :] = is_ext[-1, :] = False
    is_ext[:, 0] = is_ext[:, -1] = False
    return is_ext


def _refine(stack: FloatArray, ys: npt.NDArray[np.intp], xs: npt.NDArray[np.intp]) -> FloatArray:
    """One Newton step of a quadratic fit over (x, y, scale); offsets clamped to +-0.5."""
    b, c, a = stack[0], stack[1], stack[2]
    v = c[ys, xs]
    dx = 0.5 * (c[ys, xs + 1] - c[ys, xs - 1])
    dy = 0.5 * (c[ys + 1, xs] - c[ys - 1, xs])
    ds = 0.5 * (a[ys, xs] - b[ys, xs])
    dxx = c[ys, xs + 1] - 2 * v + c[ys, xs - 1]
    dyy = c[ys + 1, xs] - 2 * v + c[ys - 1, xs]
    dss = a[ys, xs] - 2 * v + b[ys, xs]
    dxy = 0.25 * (c[ys + 1, xs + 1] - c[ys + 1, xs - 1] - c[ys - 1, xs + 1] + c[ys - 1, xs - 1])
    dxs = 0.25 * (a[ys, xs + 1] - a[ys, xs - 1] - b[ys, xs + 1] + b[ys, xs - 1])
    dys = 0.25 * (a[ys + 1, xs] - a[ys - 1, xs] - b[ys + 1, xs] + b[ys - 1, xs])
    hess = np.stack(
        [np.stack([dxx, dxy, dxs], -1), np.stack([dxy, dyy, dys], -1), np.stack([dxs, dys, dss], -1)], -2
    )
    grad = np.stack([dx, dy, ds], -1)
    offsets = np.zeros_like(grad)
    solvable = np.abs(np.linalg.det(hess)) > 1e-15
    if np.any(solvable):
        offsets[solvable] = -np.linalg.solve(hess[solvable], grad[solvable][..., None])[..., 0]
    offsets = np.where(np.isfinite(offsets), offsets, 0.0)
    return np.clip(offsets, -MAX_OFFSET, MAX_OFFSET)


def _collect(
    stack: FloatArray,
    mask: npt.NDArray[np.bool_],
    level_index: int,
    sigma: float,
    factor: int,
    sublevels: int,
    base_shape: Tuple[int, int],
    detector: str,
) -> List[Keypoint]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return []
    offsets = _refine(stack, ys, xs)
    response = np.abs(stack[1][ys, xs])
    h, w = base_shape
    bx = np.clip((xs + offsets[:, 0]) * factor, 0.0, w - 1.0)
    by = np.clip((ys + offsets[:, 1]) * factor, 0.0, h - 1.0)
    sig = sigma * np.power(2.0, offsets[:, 2] / sublevels)
    return [
        Keypoint(x=float(bx[i]), y=float(by[i]), sigma=float(sig[i]), level=level_index, response=float(response[i]), detector=detector)
        for i in range(ys.size)
    ]


def detect_extrema(space: ScaleSpace, threshold: Optional[float] = None, max_keypoints: Optional[int] = None) -> List[Keypoint]:
    """Strict 3x3x3 scale-space extrema above threshold, refined to subpixel/subscale.

    Nonlinear spaces use positive maxima of the Hessian response (default threshold 1e-4);
    Gaussian pyramids use DoG extrema with |DoG| > threshold / 2 (default contrast 0.03).
    """
    if isinstance(space, NonlinearScaleSpace):
        keypoints = _detect_hessian(space, HESSIAN_THRESHOLD if threshold is None else threshold)
    else:
        keypoints = _detect_dog(space, DOG_CONTRAST if threshold is None else threshold)
    keypoints = canonical_order(keypoints, max_keypoints)
    logger.debug("detect_extrema kind=%s keypoints=%s", type(space).__name__, len(keypoints))
    return keypoints


def _detect_hessian(space: NonlinearScaleSpace, threshold: float) -> List[Keypoint]:
    levels = space.levels
    if len(levels) < 3:
        return []
    responses = [hessian_response(level) for level in levels]
    base_shape = levels[0].L.shape
    out: List[Keypoint] = []
    for i in range(1, len(levels) - 1):
        here = responses[i]
        shape = here.shape
        stack = np.stack([_to_grid(responses[i - 1], shape), here, _to_grid(responses[i + 1], shape)])
        mask = _strict_extrema(stack[0], stack[1], stack[2], maxima_only=True) & (here > threshold)
        out.extend(
            _collect(stack, mask, i, levels[i].sigma, levels[i].factor, space.schedule.sublevels, base_shape, "nonlinear-hessian")
        )
    return out


def _detect_dog(pyramid: GaussianPyramid, contrast: float) -> List[Keypoint]:
    if pyramid.planes_per_octave < 3:
        return []
    base_shape = pyramid.octaves[0][0].L.shape
    out: List[Keypoint] = []
    for o, dogs in enumerate(pyramid.dogs):
        for s in range(1, len(dogs) - 1):
            stack = np.stack([dogs[s - 1], dogs[s], dogs[s + 1]])
            mask = _strict_extrema(stack[0], stack[1], stack[2], maxima_only=False)
            mask &= np.abs(dogs[s]) > 0.5 * contrast
            plane = pyramid.octaves[o][s]
            out.extend(
                _collect(stack, mask, pyramid.flat_index(o, s), plane.sigma, plane.factor, pyramid.schedule.sublevels, base_shape, "dog")
            )
    return out


def _max_run(flags: npt.NDArray[np.bool_]) -> npt.NDArray[np.int64]:
    """Longest circular run of True along axis 0 of a (16, ...) array."""
    n = flags.shape[0]
    run = np.zeros(flags.shape[1:], dtype=np.int64)
    best = np.zeros_like(run)
    for i in range(2 * n):
        run = np.where(flags[i % n], run + 1, 0)
        best = np.maximum(best, run)
    return np.minimum(best, n)


def fast_response(data: FloatArray, threshold: float, arc: int = 9) -> FloatArray:
    """Segment-test score per pixel; 0 where the test fails or the circle leaves the image."""
    h, w = data.shape
    r = FAST_RADIUS
    score = np.zeros_like(data)
    if h <= 2 * r or w <= 2 * r:
        return score
    centre = data[r : h - r, r : w - r]
    ring = np.stack([data[r + dy : h - r + dy, r + dx : w - r + dx] for dx, dy in FAST_CIRCLE])
    brighter = ring > centre + threshold
    darker = ring < centre - threshold
    bright_ok = _max_run(brighter) >= arc
    dark_ok = _max_run(darker) >= arc
    diff = np.abs(ring - centre)
    bright_sum = np.where(brighter, diff, 0.0).sum(axis=0)
    dark_sum = np.where(darker, diff, 0.0).sum(axis=0)
    score[r : h - r, r : w - r] = np.where(bright_ok, bright_sum, 0.0) + np.where(dark_ok, dark_sum, 0.0)
    return score


def fast_levels(img: GrayImage, scales: int = 3) -> List[EvolutionLevel]:
    """Full-resolution image plus 2x, 4x ... decimations, each Gaussian-smoothed before decimation."""
    levels = [EvolutionLevel.from_image(img, 1.0, octave=0, factor=1)]
    current = img
    for o in range(1, scales):
        if min(current.shape) < 2 * (2 * FAST_RADIUS + 1):
            break
        current = GrayImage(gaussian_blur(current, 1.0).data[::2, ::2])
        factor = 2**o
        levels.append(EvolutionLevel.from_image(current, float(factor), octave=o, factor=factor))
    return levels


def fast_corners(
    img: GrayImage,
    threshold: float = 0.05,
    arc: int = 9,
    scales: int = 3,
    max_keypoints: Optional[int] = None,
    levels: Optional[List[EvolutionLevel]] = None,
) -> List[Keypoint]:
    """FAST segment test with 3x3 non-max suppression, repeated on decimated copies."""
    if not 0 < threshold < 1:
        raise ValueError(f"FAST threshold must lie in (0, 1), got {threshold}")
    if not 1 <= arc <= len(FAST_CIRCLE):
        raise ValueError(f"arc must lie in [1, 16], got {arc}")
    levels = levels if levels is not None else fast_levels(img, scales)
    out: List[Keypoint] = []
    for index, level in enumerate(levels):
        score = fast_response(level.L.data, threshold, arc)
        peak = ndimage.maximum_filter(score, size=3, mode="constant", cval=0.0)
        ys, xs = np.nonzero((score > 0) & (score >= peak))
        f = level.factor
        out.extend(
            Keypoint(
                x=float(min(x * f, img.width - 1)),
                y=float(min(y * f, img.height - 1)),
                sigma=float(f),
                level=index,
                response=float(score[y, x]),
                detector="fast",
            )
            for y, x in zip(ys, xs)
        )
    return canonical_order(out, max_keypoints)


def assign_orientation(kp: Keypoint, level: EvolutionLevel) -> float:
    """Angle of the largest Gaussian-weighted gradient sum over pi/3 sectors, in [0, 2 pi)."""
    f = level.factor
    s = kp.sigma / f
    step = max(1, int(round(s)))
    ij = np.arange(-ORIENTATION_RADIUS, ORIENTATION_RADIUS + 1)
    gi, gj = np.meshgrid(ij, ij, indexing="xy")
    inside = gi * gi + gj * gj < ORIENTATION_RADIUS * ORIENTATION_RADIUS
    gi, gj = gi[inside].astype(np.float64), gj[inside].astype(np.float64)
    xs = kp.x / f + gi * step
    ys = kp.y / f + gj * step
    lx, valid = sample_bilinear(level.Lx, xs, ys)
    ly, _ = sample_bilinear(level.Ly, xs, ys)
    weight = np.exp(-(gi * gi + gj * gj) * step * step / (2.0 * (2.5 * s) ** 2))
    keep = valid & ((lx != 0) | (ly != 0))
    if not np.any(keep):
        return 0.0
    gx, gy = lx[keep] * weight[keep], ly[keep] * weight[keep]
    angles = np.mod(np.arctan2(gy, gx), TWO_PI)
    starts = np.arange(int(round(TWO_PI / ORIENTATION_STEP))) * ORIENTATION_STEP
    rel = np.mod(angles[None, :] - starts[:, None], TWO_PI)
    in_sector = rel < ORIENTATION_SECTOR
    sum_x = (in_sector * gx[None, :]).sum(axis=1)
    sum_y = (in_sector * gy[None, :]).sum(axis=1)
    norms = sum_x * sum_x + sum_y * sum_y
    best = int(np.argmax(norms))
    if norms[best] == 0:
        return 0.0
    angle = math.atan2(sum_y[best], sum_x[best]) % TWO_PI
    return 0.0 if angle >= TWO_PI else angle


def orient(keypoints: Sequence[Keypoint], levels: Sequence[EvolutionLevel]) -> List[Keypoint]:
    return [replace(kp, orientation=assign_orientation(kp, levels[kp.level])) for kp in keypoints]
