"""Planar projective estimation: normalized DLT and adaptive-threshold RANSAC.

Homographies map reference-image pixels to target-image pixels. All batch
operations are vectorized over hypotheses; RANSAC draws every iteration's
sample from one seeded stream so results do not depend on the batch size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from .errors import DegenerateConfigurationError, InsufficientMatchesError, RansacFailure
from .models import RansacConfig

logger = logging.getLogger("crackalign.homography")

FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]

H33_EPS = 1e-12
DET_EPS = 1e-12
W_EPS = 1e-12
EIGEN_GAP_RTOL = 1e-9
SIGMA_FLOOR = 0.25
CHI2_GATE = 5.99
RANSAC_BATCH = 256


def canonical_scale(h: npt.ArrayLike) -> FloatArray:
    """h33 = 1 when |h33| > 1e-12, else unit Frobenius norm with a positive first nonzero entry."""
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if abs(h[2, 2]) > H33_EPS:
        return h / h[2, 2]
    norm = np.linalg.norm(h)
    if norm == 0:
        raise DegenerateConfigurationError("zero matrix is not a homography")
    h = h / norm
    flat = h.ravel()
    first = flat[np.flatnonzero(np.abs(flat) > 0)[0]]
    return -h if first < 0 else h


@dataclass(frozen=True)
class Homography:
    h: FloatArray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        if h.shape != (3, 3) or not np.all(np.isfinite(h)):
            raise DegenerateConfigurationError(f"homography must be a finite 3x3 matrix, got shape {h.shape}")
        h = canonical_scale(h)
        if abs(np.linalg.det(h)) <= DET_EPS:
            raise DegenerateConfigurationError("homography is rank deficient")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    def to_list(self) -> list:
        """Nine numbers, row-major."""
        return [float(v) for v in self.h.ravel()]

    def compose(self, other: "Homography") -> "Homography":
        """self after other."""
        return Homography(self.h @ other.h)


@dataclass(frozen=True)
class Correspondence:
    p1: Tuple[float, float]
    p2: Tuple[float, float]

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (*self.p1, *self.p2)):
            raise ValueError("correspondence coordinates must be finite")


def project(h: FloatArray, points: npt.ArrayLike) -> Tuple[FloatArray, FloatArray]:
    """Homogeneous product of an (n, 2) point array; returns (x, y) after the divide and the raw w."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x = h[0, 0] * pts[:, 0] + h[0, 1] * pts[:, 1] + h[0, 2]
    y = h[1, 0] * pts[:, 0] + h[1, 1] * pts[:, 1] + h[1, 2]
    w = h[2, 0] * pts[:, 0] + h[2, 1] * pts[:, 1] + h[2, 2]
    safe = np.where(np.abs(w) < W_EPS, np.nan, w)
    return np.stack([x / safe, y / safe], axis=1), w


def apply(H: Homography, point: Sequence[float]) -> Tuple[float, float]:
    mapped, w = project(H.h, [point])
    if abs(w[0]) < W_EPS:
        raise DegenerateConfigurationError(f"point {tuple(point)} maps to infinity")
    return float(mapped[0, 0]), float(mapped[0, 1])


def invert(H: Homography) -> Homography:
    try:
        inverse = np.linalg.inv(H.h)
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfigurationError("singular homography") from exc
    return Homography(inverse)


def reprojection_errors(h: FloatArray, src: FloatArray, dst: FloatArray) -> FloatArray:
    """Euclidean distance between dst and the image of src; inf where src maps to infinity."""
    mapped, _ = project(h, src)
    err = np.hypot(mapped[:, 0] - dst[:, 0], mapped[:, 1] - dst[:, 1])
    return np.where(np.isfinite(err), err, np.inf)


def reprojection_error(H: Homography, c: Correspondence) -> float:
    x, y = apply(H, c.p1)
    return float(math.hypot(c.p2[0] - x, c.p2[1] - y))


def normalize_points(points: npt.ArrayLike) -> Tuple[FloatArray, FloatArray]:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] < 2:
        raise DegenerateConfigurationError("normalize_points needs at least 2 points")
    centroid = pts.mean(axis=0)
    mean_dist = float(np.mean(np.hypot(*(pts - centroid).T)))
    if mean_dist <= 0:
        raise DegenerateConfigurationError("all points coincide")
    s = math.sqrt(2.0) / mean_dist
    T = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    return T, (pts - centroid) * s


def smallest_singular_vector(A: npt.ArrayLike) -> FloatArray:
    """Unit eigenvector of the smallest eigenvalue of A^T A, i.e. the last right-singular vector of A."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != 9 or A.shape[0] < 8:
        raise DegenerateConfigurationError(f"expected a (>=8)x9 design matrix, got {A.shape}")
    try:
        _, vectors = np.linalg.eigh(A.T @ A)
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfigurationError("eigen-solve did not converge") from exc
    v = vectors[:, 0]
    pivot = v[np.argmax(np.abs(v))]
    return v if pivot >= 0 else -v


def _design_matrices(src: FloatArray, dst: FloatArray) -> FloatArray:
    """Stacked (batch, 2n, 9) DLT systems from (batch, n, 2) point arrays."""
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    zeros = np.zeros_like(x)
    ones = np.ones_like(x)
    row1 = np.stack([-x, -y, -ones, zeros, zeros, zeros, u * x, u * y, u], axis=-1)
    row2 = np.stack([zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v], axis=-1)
    batch, n = x.shape
    return np.stack([row1, row2], axis=2).reshape(batch, 2 * n, 9)


def _normalize_batch(points: FloatArray) -> Tuple[FloatArray, FloatArray, BoolArray]:
    centroid = points.mean(axis=1, keepdims=True)
    centered = points - centroid
    mean_dist = np.mean(np.hypot(centered[..., 0], centered[..., 1]), axis=1)
    ok = mean_dist > 0
    s = np.where(ok, math.sqrt(2.0) / np.where(ok, mean_dist, 1.0), 1.0)
    T = np.zeros((points.shape[0], 3, 3))
    T[:, 0, 0] = s
    T[:, 1, 1] = s
    T[:, 0, 2] = -s * centroid[:, 0, 0]
    T[:, 1, 2] = -s * centroid[:, 0, 1]
    T[:, 2, 2] = 1.0
    return T, centered * s[:, None, None], ok


def dlt_batch(src: FloatArray, dst: FloatArray) -> Tuple[FloatArray, BoolArray]:
    """Normalized DLT for a (batch, n, 2) stack of samples.

    Returns canonically scaled (batch, 3, 3) matrices and a flag per sample that is False
    when the smallest eigenvalue is not unique or the result is rank deficient.
    """
    T1, n1, ok1 = _normalize_batch(src)
    T2, n2, ok2 = _normalize_batch(dst)
    A = _design_matrices(n1, n2)
    M = np.einsum("bij,bik->bjk", A, A)
    values, vectors = np.linalg.eigh(M)
    lam_max = np.maximum(np.abs(values[:, -1]), np.finfo(float).tiny)
    unique = (values[:, 1] - values[:, 0]) > EIGEN_GAP_RTOL * lam_max
    h_norm = vectors[:, :, 0].reshape(-1, 3, 3)
    h = np.linalg.inv(T2) @ h_norm @ T1
    h33 = h[:, 2, 2]
    scale = np.where(np.abs(h33) > H33_EPS, h33, np.linalg.norm(h, axis=(1, 2)))
    scale = np.where(scale == 0, 1.0, scale)
    h = h / scale[:, None, None]
    ok = ok1 & ok2 & unique & (np.abs(np.linalg.det(h)) > DET_EPS) & np.all(np.isfinite(h), axis=(1, 2))
    return h, ok


def dlt(src: npt.ArrayLike, dst: npt.ArrayLike) -> Homography:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ValueError(f"point arrays differ in shape: {src.shape} vs {dst.shape}")
    if src.shape[0] < 4:
        raise InsufficientMatchesError(f"dlt needs >= 4 correspondences, got {src.shape[0]}")
    h, ok = dlt_batch(src[None], dst[None])
    if not ok[0]:
        raise DegenerateConfigurationError("degenerate point configuration")
    return Homography(h[0])


def update_sigma(errors: Sequence[float]) -> float:
    """RMS of the errors, floored at 0.25 px."""
    values = np.asarray(errors, dtype=np.float64)
    if values.size == 0:
        raise ValueError("update_sigma needs at least one error")
    return max(float(np.sqrt(np.mean(values * values))), SIGMA_FLOOR)


def required_iterations(p: float, e: float, k: int, cap: int = 5000) -> int:
    """ceil(log(1-p) / log(1-(1-e)^k)), clamped to [1, cap]."""
    if not 0 < p < 1:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if not 0 <= e < 1:
        raise ValueError(f"e must lie in [0, 1), got {e}")
    if e == 0:
        return 1
    w = (1.0 - e) ** k
    if w <= 0:
        return cap
    if w >= 1:
        return 1
    denom = math.log1p(-w)
    if denom == 0:
        return cap
    n = math.ceil(math.log(1.0 - p) / denom)
    return int(min(max(n, 1), cap))


def gate(sigma: float) -> float:
    return math.sqrt(CHI2_GATE) * sigma


@dataclass(frozen=True)
class RansacResult:
    H: Homography
    inliers: BoolArray
    sigma_final: float
    iterations_run: int
    total_error: float
    model_before_refinement: Homography

    @property
    def inlier_count(self) -> int:
        return int(np.count_nonzero(self.inliers))


@dataclass
class _Best:
    count: int
    total: float
    iteration: int
    h: FloatArray
    errors: FloatArray


def _draw_samples(rng: np.random.Generator, batch: int, n: int, k: int) -> npt.NDArray[np.intp]:
    # Exactly n uniforms per iteration keeps iteration i's sample fixed for any batch size.
    keys = rng.random((batch, n))
    return np.sort(np.argpartition(keys, k - 1, axis=1)[:, :k], axis=1)


def ransac(src: npt.ArrayLike, dst: npt.ArrayLike, cfg: Optional[RansacConfig] = None) -> RansacResult:
    """Adaptive RANSAC: k-point DLT hypotheses scored under a sqrt(5.99)*sigma gate.

    sigma and the outlier ratio are updated from the incumbent best model whenever it
    improves, and the iteration budget is recomputed from the new ratio.
    """
    cfg = cfg or RansacConfig()
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = src.shape[0]
    if dst.shape[0] != n:
        raise ValueError(f"point arrays differ in length: {n} vs {dst.shape[0]}")
    if n < max(4, cfg.k):
        raise InsufficientMatchesError(f"ransac needs >= {max(4, cfg.k)} correspondences, got {n}")

    rng = np.random.default_rng(cfg.seed)
    sigma = cfg.sigma0
    e = cfg.e0
    budget = required_iterations(cfg.p, e, cfg.k, cfg.cap)
    best: Optional[_Best] = None
    done = 0

    while done < budget:
        size = min(RANSAC_BATCH, budget - done)
        idx = _draw_samples(rng, size, n, cfg.k)
        hs, ok = dlt_batch(src[idx], dst[idx])
        mapped = np.einsum("bij,nj->bni", hs, np.column_stack([src, np.ones(n)]))
        w = mapped[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = mapped[..., 0] / w
            py = mapped[..., 1] / w
            errs = np.hypot(px - dst[None, :, 0], py - dst[None, :, 1])
        errs = np.where((np.abs(w) < W_EPS) | ~np.isfinite(errs), np.inf, errs)

        for j in range(size):
            iteration = done + j
            if iteration >= budget:
                break
            if not ok[j]:
                continue
            inl = errs[j] < gate(sigma)
            count = int(np.count_nonzero(inl))
            total = float(errs[j][inl].sum())
            if best is None or count > best.count or (count == best.count and total < best.total):
                best = _Best(count, total, iteration, hs[j], errs[j])
                if count:
                    sigma = update_sigma(errs[j][inl])
                e = min(e, 1.0 - count / n)
                budget = min(budget, required_iterations(cfg.p, e, cfg.k, cfg.cap))
                logger.debug(
                    "iteration=%s inliers=%s sigma=%.4f e=%.3f budget=%s", iteration, count, sigma, e, budget
                )
        done = min(done + size, budget)

    if best is None:
        raise RansacFailure(f"every one of {done} samples was degenerate")
    final = best.errors < gate(sigma)
    count = int(np.count_nonzero(final))
    if count < 4:
        raise RansacFailure(f"best model has {count} inliers, at least 4 required")
    try:
        refined = dlt(src[final], dst[final])
        before = Homography(best.h)
    except DegenerateConfigurationError as exc:
        raise RansacFailure(f"refinement over {count} inliers is degenerate") from exc
    total_error = float(reprojection_errors(refined.h, src[final], dst[final]).sum())
    logger.debug("ransac done iterations=%s inliers=%s/%s sigma=%.4f", done, count, n, sigma)
    return RansacResult(
        H=refined,
        inliers=final,
        sigma_final=sigma,
        iterations_run=done,
        total_error=total_error,
        model_before_refinement=before,
    )


def max_corner_error(estimated: Homography, truth: Homography, width: int, height: int) -> float:
    """Largest distance between the images of the four frame corners under the two maps."""
    corners = np.array([[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]])
    a, _ = project(estimated.h, corners)
    b, _ = project(truth.h, corners)
    dist = np.hypot(a[:, 0] - b[:, 0], a[:, 1] - b[:, 1])
    return float(np.max(np.where(np.isfinite(dist), dist, np.inf)))
