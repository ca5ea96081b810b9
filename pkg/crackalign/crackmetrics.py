from __future__ import annotations

import logging
import math
from typing import Optional, Tuple

import numpy as np
import numpy.typing as npt
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import minimum_spanning_tree
from skimage.filters import threshold_otsu
from skimage.morphology import reconstruction
from skimage.morphology import skeletonize as zhang_skeletonize

from .errors import DimensionMismatchError
from .homography import Homography, invert, project
from .imgio import GrayImage
from .models import CrackMetrics, MetricErrors

logger = logging.getLogger("crackalign.crackmetrics")

BinaryMask = npt.NDArray[np.bool_]

VALID_TOL = 1e-6
CROSS = ndimage.generate_binary_structure(2, 1)
EIGHT = np.ones((3, 3), dtype=bool)

RED = (255, 0, 0)
BLUE = (0, 0, 255)
PURPLE = (128, 0, 128)
WHITE = (255, 255, 255)


def warp_image(img: GrayImage, H: Homography, out_w: int, out_h: int) -> Tuple[GrayImage, BinaryMask]:
    """Inverse mapping: output pixel q samples img at invert(H)(q); unmapped pixels are 0 and invalid."""
    back = invert(H)
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    src, _ = project(back.h, np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64))
    sx = src[:, 0].reshape(out_h, out_w)
    sy = src[:, 1].reshape(out_h, out_w)
    finite = np.isfinite(sx) & np.isfinite(sy)
    valid = (
        finite
        & (sx >= -VALID_TOL)
        & (sx <= img.width - 1 + VALID_TOL)
        & (sy >= -VALID_TOL)
        & (sy <= img.height - 1 + VALID_TOL)
    )
    cx = np.clip(np.where(finite, sx, 0.0), 0.0, img.width - 1.0)
    cy = np.clip(np.where(finite, sy, 0.0), 0.0, img.height - 1.0)
    values = ndimage.map_coordinates(img.data, [cy, cx], order=1, mode="nearest")
    return GrayImage.from_array(np.where(valid, values, 0.0)), valid


def _largest_component(mask: BinaryMask) -> BinaryMask:
    labels, count = ndimage.label(mask, structure=EIGHT)
    if count <= 1:
        return labels > 0
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def segment_crack(img: GrayImage, valid: Optional[BinaryMask] = None) -> BinaryMask:
    """Otsu on the inverted image, opening by reconstruction with a 3x3 cross, largest 8-component."""
    region = np.ones(img.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if region.shape != img.shape:
        raise DimensionMismatchError(f"valid mask {region.shape} does not match image {img.shape}")
    inverted = 1.0 - img.data
    values = inverted[region]
    if values.size == 0 or float(values.max() - values.min()) < 1e-12:
        return np.zeros(img.shape, dtype=bool)
    mask = (inverted > threshold_otsu(values)) & region
    marker = ndimage.binary_erosion(mask, structure=CROSS)
    if marker.any():
        opened = reconstruction(marker.astype(np.uint8), mask.astype(np.uint8), method="dilation", footprint=EIGHT) > 0
    else:
        opened = mask
    return _largest_component(opened)


def skeletonize(mask: BinaryMask) -> BinaryMask:
    """Zhang-Suen thinning to a one-pixel-wide, 8-connected skeleton."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    return zhang_skeletonize(mask)


def spine_length(skeleton: BinaryMask) -> float:
    """Weight of a minimum spanning forest over 8-adjacent skeleton pixels (1 axial, sqrt 2 diagonal)."""
    ys, xs = np.nonzero(skeleton)
    n = ys.size
    if n < 2:
        return 0.0
    index = -np.ones(skeleton.shape, dtype=np.int64)
    index[ys, xs] = np.arange(n)
    h, w = skeleton.shape
    rows, cols, weights = [], [], []
    for dy, dx, weight in ((0, 1, 1.0), (1, 0, 1.0), (1, 1, math.sqrt(2.0)), (1, -1, math.sqrt(2.0))):
        ny, nx = ys + dy, xs + dx
        inside = (ny < h) & (nx >= 0) & (nx < w)
        other = np.full(n, -1, dtype=np.int64)
        other[inside] = index[ny[inside], nx[inside]]
        linked = other >= 0
        rows.append(np.flatnonzero(linked))
        cols.append(other[linked])
        weights.append(np.full(int(linked.sum()), weight))
    graph = coo_matrix((np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return float(minimum_spanning_tree(graph.tocsr()).sum())


def compute_metrics(mask: BinaryMask, valid: Optional[BinaryMask] = None) -> CrackMetrics:
    mask = np.asarray(mask, dtype=bool)
    if valid is not None:
        mask = mask & np.asarray(valid, dtype=bool)
    area = int(np.count_nonzero(mask))
    if area == 0:
        return CrackMetrics()
    skel = skeletonize(mask)
    length = spine_length(skel)
    distance = ndimage.distance_transform_edt(mask)
    width = float(np.mean(2.0 * distance[skel] - 1.0)) if skel.any() else 0.0
    return CrackMetrics(
        area=area,
        spine_length=length,
        avg_width=max(width, 0.0),
        area_over_length=area / length if length > 0 else 0.0,
    )


def metric_errors(corrected: CrackMetrics, baseline: CrackMetrics) -> MetricErrors:
    """Percent deviation of each metric from a positive baseline."""
    pairs = (
        ("area", corrected.area, baseline.area),
        ("spine_length", corrected.spine_length, baseline.spine_length),
        ("avg_width", corrected.avg_width, baseline.avg_width),
    )
    errs = []
    for name, value, base in pairs:
        if base <= 0:
            raise ValueError(f"baseline {name} must be > 0, got {base}")
        errs.append(100.0 * abs(value - base) / base)
    return MetricErrors(area_err=errs[0], length_err=errs[1], width_err=errs[2])


def render_overlay(baseline_mask: BinaryMask, corrected_mask: BinaryMask) -> npt.NDArray[np.uint8]:
    """RGB canvas: baseline-only red, corrected-only blue, overlap purple, background white."""
    base = np.asarray(baseline_mask, dtype=bool)
    corr = np.asarray(corrected_mask, dtype=bool)
    if base.shape != corr.shape:
        raise DimensionMismatchError(f"overlay masks differ: {base.shape} vs {corr.shape}")
    canvas = np.empty(base.shape + (3,), dtype=np.uint8)
    canvas[...] = WHITE
    canvas[base & ~corr] = RED
    canvas[corr & ~base] = BLUE
    canvas[base & corr] = PURPLE
    return canvas
