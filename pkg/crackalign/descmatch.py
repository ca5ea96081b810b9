"""Descriptor extraction and mutual nearest-neighbour matching."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.spatial.distance import cdist

from .detect import Keypoint, ScaleSpace
from .errors import KeypointOutOfBoundsError
from .imgio import GrayImage, sample_bilinear
from .scalespace import EvolutionLevel, gaussian_blur

logger = logging.getLogger("crackalign.descmatch")

FloatArray = npt.NDArray[np.float64]

FLOAT_DIM = 64
BINARY_BITS = 256
SUBREGION_STARTS = (-12, -7, -2, 3)
SUBREGION_SAMPLES = 9
SUBREGION_CENTRES = (-1.5, -0.5, 0.5, 1.5)
OUTER_SIGMA = 1.5

RING_RADII = (0.0, 2.0, 4.0, 7.0, 11.0)
RING_COUNTS = (1, 6, 9, 12, 15)
BINARY_BORDER = 16.0
TIE_EPS = 1e-12


@dataclass(frozen=True)
class FloatDescriptor:
    values: FloatArray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size != FLOAT_DIM or not np.all(np.isfinite(v)):
            raise ValueError(f"float descriptor needs {FLOAT_DIM} finite values")
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ValueError("float descriptor must be unit norm")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class BinaryDescriptor:
    packed: npt.NDArray[np.uint8]

    def __post_init__(self):
        p = np.asarray(self.packed, dtype=np.uint8).reshape(-1)
        if p.size != BINARY_BITS // 8:
            raise ValueError(f"binary descriptor needs {BINARY_BITS} bits")
        p.setflags(write=False)
        object.__setattr__(self, "packed", p)

    @classmethod
    def from_bits(cls, bits: npt.ArrayLike) -> "BinaryDescriptor":
        bits = np.asarray(bits, dtype=bool).reshape(-1)
        if bits.size != BINARY_BITS:
            raise ValueError(f"binary descriptor needs {BINARY_BITS} bits, got {bits.size}")
        return cls(np.packbits(bits))

    @property
    def bits(self) -> npt.NDArray[np.bool_]:
        return np.unpackbits(self.packed).astype(bool)


Descriptor = Union[FloatDescriptor, BinaryDescriptor]


@dataclass(frozen=True)
class Match:
    query: int
    train: int
    distance: float
    ratio: float


@dataclass(frozen=True)
class MatchSet:
    matches: List[Match]
    mutual: int = 0


# ---------------------------------------------------------------- float descriptor


def _float_offsets() -> Tuple[FloatArray, FloatArray, FloatArray]:
    """Sample coordinates (u, v) in keypoint-sigma units, inner weights, outer weights; each (16, 81)."""
    us, vs, inner, outer = [], [], [], []
    for j, vstart in enumerate(SUBREGION_STARTS):
        for i, ustart in enumerate(SUBREGION_STARTS):
            u = ustart + 0.5 + np.arange(SUBREGION_SAMPLES, dtype=np.float64)
            v = vstart + 0.5 + np.arange(SUBREGION_SAMPLES, dtype=np.float64)
            gu, gv = np.meshgrid(u, v, indexing="xy")
            cu, cv = ustart + 4.5, vstart + 4.5
            us.append(gu.ravel())
            vs.append(gv.ravel())
            inner.append(np.exp(-((gu - cu) ** 2 + (gv - cv) ** 2).ravel() / (2.0 * 2.5**2)))
            a, b = SUBREGION_CENTRES[i], SUBREGION_CENTRES[j]
            outer.append(math.exp(-(a * a + b * b) / (2.0 * OUTER_SIGMA**2)))
    return np.array(us), np.array(vs), np.array(inner) * np.array(outer)[:, None]


_U, _V, _WEIGHTS = _float_offsets()


def describe_at_level(keypoints: Sequence[Keypoint], level: EvolutionLevel) -> FloatArray:
    """(n, 64) unit-norm descriptors for keypoints living on one evolution level."""
    n = len(keypoints)
    if n == 0:
        return np.zeros((0, FLOAT_DIM))
    f = level.factor
    cx = np.array([kp.x for kp in keypoints])[:, None, None] / f
    cy = np.array([kp.y for kp in keypoints])[:, None, None] / f
    s = np.array([kp.sigma for kp in keypoints])[:, None, None] / f
    theta = np.array([kp.orientation for kp in keypoints])[:, None, None]
    co, si = np.cos(theta), np.sin(theta)
    xs = cx + s * (_U * co - _V * si)
    ys = cy + s * (_U * si + _V * co)
    gx, valid = sample_bilinear(level.Lx, xs, ys)
    gy, _ = sample_bilinear(level.Ly, xs, ys)
    if np.any(~valid.reshape(n, -1).any(axis=1)):
        raise KeypointOutOfBoundsError("descriptor window lies entirely outside the image")
    dx = (gx * co + gy * si) * _WEIGHTS
    dy = (-gx * si + gy * co) * _WEIGHTS
    desc = np.concatenate(
        [dx.sum(axis=2)[..., None], dy.sum(axis=2)[..., None], np.abs(dx).sum(axis=2)[..., None], np.abs(dy).sum(axis=2)[..., None]],
        axis=2,
    ).reshape(n, FLOAT_DIM)
    norms = np.linalg.norm(desc, axis=1)
    flat = norms <= 0
    desc[~flat] /= norms[~flat, None]
    desc[flat] = 0.0
    desc[flat, 0] = 1.0
    return desc


def float_descriptor(kp: Keypoint, space: ScaleSpace) -> FloatDescriptor:
    return FloatDescriptor(describe_at_level([kp], space.levels[kp.level])[0])


def float_descriptors(keypoints: Sequence[Keypoint], levels: Sequence[EvolutionLevel]) -> FloatArray:
    """Batched float descriptors grouped by level, returned in keypoint order."""
    out = np.zeros((len(keypoints), FLOAT_DIM))
    by_level: Dict[int, List[int]] = {}
    for i, kp in enumerate(keypoints):
        by_level.setdefault(kp.level, []).append(i)
    for index, members in sorted(by_level.items()):
        out[members] = describe_at_level([keypoints[i] for i in members], levels[index])
    return out


# ---------------------------------------------------------------- binary descriptor


@dataclass(frozen=True)
class BinaryPattern:
    points: FloatArray  # (43, 2) in keypoint-sigma units
    smoothing: FloatArray  # (43,) Gaussian sigma per point, keypoint-sigma units
    pairs: npt.NDArray[np.intp]  # (256, 2)


@lru_cache(maxsize=1)
def binary_pattern() -> BinaryPattern:
    """Concentric rings and their 256 shortest point pairs, ties ordered by index."""
    pts, smooth = [], []
    for radius, count in zip(RING_RADII, RING_COUNTS):
        for i in range(count):
            angle = 2.0 * math.pi * i / count
            pts.append((radius * math.cos(angle), radius * math.sin(angle)))
            smooth.append(0.5 if radius == 0 else 0.4 * radius)
    points = np.array(pts)
    dist = cdist(points, points)
    ii, jj = np.triu_indices(len(points), k=1)
    order = np.lexsort((jj, ii, np.round(dist[ii, jj], 9)))[:BINARY_BITS]
    return BinaryPattern(points=points, smoothing=np.array(smooth), pairs=np.stack([ii[order], jj[order]], axis=1))


@dataclass
class SmoothingCache:
    """Blurred copies of one image keyed by sigma, shared by every keypoint on it."""

    img: GrayImage
    planes: Dict[float, FloatArray] = field(default_factory=dict)

    def get(self, sigma: float) -> FloatArray:
        key = round(float(sigma), 6)
        if key not in self.planes:
            self.planes[key] = gaussian_blur(self.img, key).data
        return self.planes[key]


def binary_border_ok(kp: Keypoint, img: GrayImage) -> bool:
    margin = BINARY_BORDER * kp.sigma
    return margin <= kp.x <= img.width - 1 - margin and margin <= kp.y <= img.height - 1 - margin


def binary_descriptor(kp: Keypoint, img: GrayImage, cache: Optional[SmoothingCache] = None) -> BinaryDescriptor:
    """256 intensity comparisons I(p_i) > I(p_j) over the rotated, smoothed ring pattern."""
    if not binary_border_ok(kp, img):
        raise KeypointOutOfBoundsError(
            f"keypoint ({kp.x:.1f}, {kp.y:.1f}) sigma={kp.sigma:.2f} closer than {BINARY_BORDER} sigma to the border"
        )
    cache = cache if cache is not None and cache.img is img else SmoothingCache(img)
    pattern = binary_pattern()
    co, si = math.cos(kp.orientation), math.sin(kp.orientation)
    px = kp.x + kp.sigma * (pattern.points[:, 0] * co - pattern.points[:, 1] * si)
    py = kp.y + kp.sigma * (pattern.points[:, 0] * si + pattern.points[:, 1] * co)
    values = np.empty(len(pattern.points))
    for sigma in np.unique(pattern.smoothing):
        idx = np.flatnonzero(pattern.smoothing == sigma)
        values[idx], _ = sample_bilinear(cache.get(sigma * kp.sigma), px[idx], py[idx])
    bits = values[pattern.pairs[:, 0]] > values[pattern.pairs[:, 1]] + TIE_EPS
    return BinaryDescriptor.from_bits(bits)


# ---------------------------------------------------------------- matching


def _as_matrix(descriptors: Sequence[Descriptor]) -> Tuple[str, np.ndarray]:
    kinds = {type(d) for d in descriptors}
    if len(kinds) > 1:
        raise TypeError("descriptor list mixes float and binary descriptors")
    if not descriptors:
        return "empty", np.zeros((0, 0))
    if kinds == {FloatDescriptor}:
        return "float", np.stack([d.values for d in descriptors])
    return "binary", np.stack([d.bits for d in descriptors])


def distance_matrix(a: np.ndarray, b: np.ndarray, kind: str) -> FloatArray:
    """Euclidean distances for float rows, Hamming bit counts for boolean rows."""
    if kind == "binary":
        return cdist(a.astype(bool), b.astype(bool), metric="hamming") * a.shape[1]
    return cdist(a, b, metric="euclidean")


def match_arrays(a: np.ndarray, b: np.ndarray, kind: str, ratio: float = 0.8) -> MatchSet:
    """Mutual nearest neighbours of a in b that pass best/second < ratio."""
    if b.shape[0] == 0:
        raise ValueError("cannot match against an empty descriptor set")
    if a.shape[0] == 0:
        return MatchSet(matches=[], mutual=0)
    dist = distance_matrix(a, b, kind)
    order = np.argsort(dist, axis=1, kind="stable")
    best = order[:, 0]
    best_d = dist[np.arange(a.shape[0]), best]
    reverse = np.argmin(dist, axis=0)
    mutual = reverse[best] == np.arange(a.shape[0])
    if b.shape[0] >= 2:
        second_d = dist[np.arange(a.shape[0]), order[:, 1]]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(second_d > 0, best_d / second_d, 1.0)
    else:
        ratios = np.zeros(a.shape[0])
    keep = mutual & (ratios < ratio)
    matches = [
        Match(query=int(q), train=int(best[q]), distance=float(best_d[q]), ratio=float(ratios[q]))
        for q in np.flatnonzero(keep)
    ]
    logger.debug("match kind=%s queries=%s mutual=%s kept=%s", kind, a.shape[0], int(mutual.sum()), len(matches))
    return MatchSet(matches=matches, mutual=int(mutual.sum()))


def match_descriptors(A: Sequence[Descriptor], B: Sequence[Descriptor], ratio: float = 0.8) -> List[Match]:
    kind_a, mat_a = _as_matrix(A)
    kind_b, mat_b = _as_matrix(B)
    if kind_b == "empty":
        raise ValueError("cannot match against an empty descriptor set")
    if kind_a == "empty":
        return []
    if kind_a != kind_b:
        raise TypeError(f"cannot match {kind_a} descriptors against {kind_b} descriptors")
    return match_arrays(mat_a, mat_b, kind_a, ratio).matches
