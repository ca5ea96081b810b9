from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import numpy.typing as npt
from scipy import ndimage

from .errors import DimensionMismatchError, ImageTooSmallError
from .imgio import GrayImage

logger = logging.getLogger("crackalign.scalespace")

FloatArray = npt.NDArray[np.float64]

MIN_IMAGE_SIDE = 32
MIN_OCTAVE_SIDE = 16
KAPPA_FALLBACK = 0.01
PRESMOOTH_SIGMA = 1.0
ZERO_GRADIENT = 1e-12

# Scharr: [3, 10, 3] / 16 across, central difference along.
_SCHARR_SMOOTH = np.array([3.0, 10.0, 3.0]) / 16.0


@dataclass(frozen=True)
class ScaleSchedule:
    base_sigma: float = 1.6
    octaves: int = 4
    sublevels: int = 4

    def __post_init__(self):
        if self.base_sigma <= 0:
            raise ValueError("base_sigma must be > 0")
        if self.octaves < 1 or self.sublevels < 1:
            raise ValueError("octaves and sublevels must be >= 1")

    def sigma(self, octave: int, sublevel: int) -> float:
        return self.base_sigma * 2.0 ** (octave + sublevel / self.sublevels)

    def levels(self) -> List[Tuple[int, int, float, float]]:
        """(octave, sublevel, sigma, time) for every evolution level, time = sigma^2 / 2."""
        out = []
        for o in range(self.octaves):
            for s in range(self.sublevels):
                sigma = self.sigma(o, s)
                out.append((o, s, sigma, sigma * sigma / 2.0))
        return out

    def fit(self, width: int, height: int) -> "ScaleSchedule":
        """Same schedule with the octave count reduced until every octave keeps >= 16 px per side."""
        octaves = self.octaves
        while octaves > 1 and min(width, height) >> (octaves - 1) < MIN_OCTAVE_SIDE:
            octaves -= 1
        if octaves == self.octaves:
            return self
        logger.info("octaves clamped %s -> %s for %sx%s image", self.octaves, octaves, width, height)
        return ScaleSchedule(self.base_sigma, octaves, self.sublevels)


def _check_min_size(img: GrayImage, schedule: ScaleSchedule):
    if img.width < MIN_IMAGE_SIDE or img.height < MIN_IMAGE_SIDE:
        raise ImageTooSmallError(f"scale space needs >= {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {img.width}x{img.height}")
    smallest = min(img.width, img.height) >> (schedule.octaves - 1)
    if smallest < MIN_OCTAVE_SIDE:
        raise ImageTooSmallError(
            f"{schedule.octaves} octaves need >= {MIN_OCTAVE_SIDE} px per side at the coarsest octave, got {smallest}"
        )


def _blur(arr: FloatArray, sigma: float) -> FloatArray:
    if sigma == 0:
        return arr
    return ndimage.gaussian_filter(arr, sigma, mode="reflect", truncate=3.0, radius=int(math.ceil(3 * sigma)))


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """Separable Gaussian with radius ceil(3 sigma), normalized kernel, reflective borders."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img
    return GrayImage.from_array(_blur(img.data, sigma))


def _kernel(smooth_axis: int, diff: FloatArray, step: int) -> FloatArray:
    """Dilated separable kernel: `diff` along one axis, Scharr smoothing across the other."""
    size = 2 * step + 1
    across = np.zeros(size)
    across[[0, step, 2 * step]] = _SCHARR_SMOOTH
    along = np.zeros(size)
    along[[0, step, 2 * step]] = diff
    if smooth_axis == 0:
        return np.outer(across, along)
    return np.outer(along, across)


def scharr_derivatives(arr: FloatArray, step: int = 1) -> Tuple[FloatArray, FloatArray]:
    """First derivatives (d/dx, d/dy) in pixels of the sampled grid; taps spaced `step` apart."""
    diff = np.array([-1.0, 0.0, 1.0]) / (2.0 * step)
    lx = ndimage.correlate(arr, _kernel(0, diff, step), mode="reflect")
    ly = ndimage.correlate(arr, _kernel(1, diff, step), mode="reflect")
    return lx, ly


def second_derivatives(arr: FloatArray, step: int = 1) -> Tuple[FloatArray, FloatArray, FloatArray]:
    curv = np.array([1.0, -2.0, 1.0]) / float(step * step)
    lxx = ndimage.correlate(arr, _kernel(0, curv, step), mode="reflect")
    lyy = ndimage.correlate(arr, _kernel(1, curv, step), mode="reflect")
    lx, _ = scharr_derivatives(arr, step)
    _, lxy = scharr_derivatives(lx, step)
    return lxx, lyy, lxy


def gradient(img: GrayImage) -> Tuple[FloatArray, FloatArray, FloatArray]:
    """Scharr 3x3 derivatives and the gradient magnitude sqrt(Lx^2 + Ly^2)."""
    if img.width < 3 or img.height < 3:
        raise ImageTooSmallError(f"gradient needs >= 3x3, got {img.width}x{img.height}")
    lx, ly = scharr_derivatives(img.data, 1)
    return lx, ly, np.hypot(lx, ly)


def estimate_kappa(img: GrayImage, percentile: float = 0.70, bins: int = 300) -> float:
    """Contrast parameter: the given percentile of the non-zero gradient-magnitude histogram."""
    if not 0 < percentile < 1:
        raise ValueError(f"percentile must lie in (0, 1), got {percentile}")
    _, _, mag = gradient(gaussian_blur(img, PRESMOOTH_SIGMA))
    values = mag[mag > ZERO_GRADIENT]
    if values.size == 0:
        return KAPPA_FALLBACK
    hmax = float(values.max())
    hist, _ = np.histogram(values, bins=bins, range=(0.0, hmax))
    cumulative = np.cumsum(hist)
    idx = int(np.searchsorted(cumulative, percentile * values.size, side="left"))
    idx = min(idx, bins - 1)
    return hmax * (idx + 1) / bins


def conductivity(magnitude: FloatArray, kappa: float) -> FloatArray:
    """Perona-Malik g2: 1 / (1 + (|grad L| / kappa)^2)."""
    if kappa <= 0:
        raise ValueError(f"kappa must be > 0, got {kappa}")
    ratio = np.asarray(magnitude, dtype=np.float64) / kappa
    return 1.0 / (1.0 + ratio * ratio)


def _solve_tridiagonal(lower: FloatArray, diag: FloatArray, upper: FloatArray, rhs: FloatArray) -> FloatArray:
    """Thomas algorithm along axis 0; every column is an independent system.

    Row i reads lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i].
    """
    n = diag.shape[0]
    cp = np.empty_like(diag)
    dp = np.empty_like(rhs)
    cp[0] = upper[0] / diag[0]
    dp[0] = rhs[0] / diag[0]
    for i in range(1, n):
        denom = diag[i] - lower[i] * cp[i - 1]
        cp[i] = upper[i] / denom
        dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / denom
    x = np.empty_like(rhs)
    x[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x


def _implicit_1d(values: FloatArray, c: FloatArray, tau: float) -> FloatArray:
    """Solve (I - tau * A(c)) x = values along axis 0 with Neumann ends."""
    half = 0.5 * (c[:-1] + c[1:])  # conductivity at i + 1/2
    n = values.shape[0]
    lower = np.zeros_like(values)
    upper = np.zeros_like(values)
    lower[1:] = -tau * half
    upper[:-1] = -tau * half
    diag = np.ones_like(values)
    diag[:-1] += tau * half
    diag[1:] += tau * half
    if n == 1:
        return values.copy()
    return _solve_tridiagonal(lower, diag, upper, values)


def diffuse_step(L: GrayImage, c: FloatArray, dt: float) -> GrayImage:
    """One AOS step: average of the row-wise and column-wise semi-implicit solves."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != L.shape:
        raise DimensionMismatchError(f"conductivity {c.shape} does not match image {L.shape}")
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    tau = 2.0 * dt
    along_y = _implicit_1d(L.data, c, tau)
    along_x = _implicit_1d(L.data.T, c.T, tau).T
    return GrayImage.from_array(0.5 * (along_y + along_x))


def nonlinear_diffusion(
    L: GrayImage,
    kappa: float,
    duration: float,
    dt_max: float = 10.0,
) -> GrayImage:
    """Evolve L by `duration` (px^2) in sub-steps of at most dt_max.

    Conductivity is refreshed from the sigma=1 smoothed current image before every sub-step.
    """
    if duration <= 0:
        return L
    steps = max(1, int(math.ceil(duration / dt_max - 1e-12)))
    dt = duration / steps
    for _ in range(steps):
        _, _, mag = gradient(gaussian_blur(L, PRESMOOTH_SIGMA))
        L = diffuse_step(L, conductivity(mag, kappa), dt)
    return L


def derivative_step(sigma_level: float) -> int:
    return max(1, int(sigma_level // 2))


@dataclass(frozen=True)
class EvolutionLevel:
    sigma: float
    time: float
    L: GrayImage
    Lx: FloatArray
    Ly: FloatArray
    Lxx: FloatArray
    Lyy: FloatArray
    Lxy: FloatArray
    octave: int = 0
    factor: int = 1

    @property
    def sigma_level(self) -> float:
        """Sigma in pixels of this level's own grid."""
        return self.sigma / self.factor

    @classmethod
    def from_image(cls, L: GrayImage, sigma: float, time: Optional[float] = None, octave: int = 0, factor: int = 1):
        return cls._build(L, L.data, sigma, time, octave, factor)

    @classmethod
    def from_base_grid(cls, L: GrayImage, sigma: float, time: float, octave: int, factor: int):
        """Keep L on the base grid; derivative fields come from every `factor`-th sample."""
        return cls._build(L, L.data[::factor, ::factor], sigma, time, octave, factor)

    @classmethod
    def _build(cls, L: GrayImage, grid: FloatArray, sigma: float, time: Optional[float], octave: int, factor: int):
        step = derivative_step(sigma / factor)
        lx, ly = scharr_derivatives(grid, step)
        lxx, lyy, lxy = second_derivatives(grid, step)
        return cls(
            sigma=sigma,
            time=sigma * sigma / 2.0 if time is None else time,
            L=L,
            Lx=lx,
            Ly=ly,
            Lxx=lxx,
            Lyy=lyy,
            Lxy=lxy,
            octave=octave,
            factor=factor,
        )


@dataclass(frozen=True)
class NonlinearScaleSpace:
    levels: List[EvolutionLevel]
    schedule: ScaleSchedule
    kappa: float
    kappas: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class GaussianPyramid:
    octaves: List[List[EvolutionLevel]]
    dogs: List[List[FloatArray]]
    schedule: ScaleSchedule

    @property
    def levels(self) -> List[EvolutionLevel]:
        return [level for octave in self.octaves for level in octave]

    @property
    def planes_per_octave(self) -> int:
        return self.schedule.sublevels + 3

    def flat_index(self, octave: int, plane: int) -> int:
        return octave * self.planes_per_octave + plane


def decimate(img: GrayImage) -> GrayImage:
    return GrayImage(img.data[::2, ::2])


def build_nonlinear_scale_space(
    img: GrayImage,
    schedule: ScaleSchedule,
    kappa: Optional[float] = None,
    percentile: float = 0.70,
    bins: int = 300,
    dt_max: float = 10.0,
) -> NonlinearScaleSpace:
    """Anisotropic-diffusion scale space: Gaussian to sigma_0, then AOS evolution level to level.

    The evolution runs on the base grid so conductivity always sees base-pixel gradients;
    each octave's derivative fields are sampled 2^o apart.
    """
    _check_min_size(img, schedule)
    k = estimate_kappa(img, percentile, bins) if kappa is None else float(kappa)
    if k <= 0:
        raise ValueError(f"kappa must be > 0, got {k}")
    plan = schedule.levels()
    _, _, sigma0, t0 = plan[0]
    L = gaussian_blur(img, sigma0)
    levels = [EvolutionLevel.from_image(L, sigma0, t0, 0, 1)]
    # kappa expressed in each octave's own gradient units
    kappas = [k * 2**o for o in range(schedule.octaves)]
    prev_t = t0
    for octave, _sub, sigma, t in plan[1:]:
        L = nonlinear_diffusion(L, k, t - prev_t, dt_max)
        levels.append(EvolutionLevel.from_base_grid(L, sigma, t, octave, 2**octave))
        prev_t = t
    logger.debug("nonlinear scale space levels=%s kappa=%.5f", len(levels), k)
    return NonlinearScaleSpace(levels=levels, schedule=schedule, kappa=k, kappas=kappas)


def build_gaussian_pyramid(img: GrayImage, schedule: ScaleSchedule) -> GaussianPyramid:
    """S+3 blurred planes per octave and their S+2 differences."""
    _check_min_size(img, schedule)
    s0 = schedule.base_sigma
    n_sub = schedule.sublevels
    base = gaussian_blur(img, s0)
    octaves: List[List[EvolutionLevel]] = []
    dogs: List[List[FloatArray]] = []
    for o in range(schedule.octaves):
        factor = 2**o
        planes: List[EvolutionLevel] = []
        for s in range(n_sub + 3):
            rel = s0 * 2.0 ** (s / n_sub)
            plane = base if s == 0 else gaussian_blur(base, math.sqrt(rel * rel - s0 * s0))
            planes.append(EvolutionLevel.from_image(plane, rel * factor, None, o, factor))
        octaves.append(planes)
        dogs.append([planes[s + 1].L.data - planes[s].L.data for s in range(n_sub + 2)])
        # The plane at 2*sigma_0 becomes the next base after 2x decimation.
        base = decimate(planes[n_sub].L)
    return GaussianPyramid(octaves=octaves, dogs=dogs, schedule=schedule)
