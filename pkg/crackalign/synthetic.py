"""Synthetic crack scenes, ground-truth homographies and the perturbation grid.

A scene is rendered on a padded canvas; the reference is the central crop and the
target is the same crop of the perturbed canvas, so the target never shows the
black border of an inverse warp.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy import ndimage

from .crackmetrics import warp_image
from .errors import ConfigError
from .homography import Homography
from .imgio import GrayImage
from .models import PerturbSpec

logger = logging.getLogger("crackalign.synthetic")

TILT_LEVELS: Dict[str, float] = {"none": 0.0, "mild": 1e-4, "medium": 5e-4, "severe": 1.5e-3}
NOISE_LEVELS: Dict[str, float] = {"none": 0.0, "low": 2 / 255, "med": 5 / 255, "high": 10 / 255}
BLUR_LEVELS: Dict[str, float] = {"none": 0.0, "low": 0.5, "med": 1.5, "high": 3.0}
CONTRAST_LEVELS: Dict[str, float] = {"none": 1.0, "high": 1.0, "med": 0.6, "low": 0.3}
SHADOW_LEVELS: Dict[str, float] = {"none": 1.0, "low": 0.9, "med": 0.6, "high": 0.3}
TEXTURE_LEVELS: Dict[str, float] = {"high": 0.08, "medium": 0.05, "low": 0.02}

GRID_FACTORS: Dict[str, Tuple[str, ...]] = {
    "tilt": ("mild", "medium", "severe"),
    "noise": ("low", "med", "high"),
    "blur": ("low", "med", "high"),
    "contrast": ("high", "med", "low"),
    "shadow": ("low", "med", "high"),
    "texture": ("high", "medium", "low"),
}

SCENARIOS: Dict[str, PerturbSpec] = {
    "ideal": PerturbSpec(tilt="mild"),
    "cropped": PerturbSpec(tilt="severe", crop=True),
    "brick": PerturbSpec(tilt="severe", background="brick"),
    "shadow": PerturbSpec(tilt="medium", shadow="med"),
}

BACKGROUND = 0.7
CRACK_VALUE = 0.12
CRACK_WIDTH = 7
CRACK_MARGIN = 24
BLOB_COUNT = 40
BRICK_H, BRICK_W = 16, 32
BRICK_VALUE, MORTAR_VALUE = 0.72, 0.6


@dataclass(frozen=True)
class Scene:
    canvas: GrayImage
    margin: int
    size: int

    @property
    def reference(self) -> GrayImage:
        return crop(self.canvas, self.margin, self.size)


@dataclass(frozen=True)
class SyntheticPair:
    reference: GrayImage
    target: GrayImage
    h_gt: Homography
    spec: PerturbSpec
    seed: int


def crop(img: GrayImage, margin: int, size: int) -> GrayImage:
    return GrayImage(img.data[margin : margin + size, margin : margin + size])


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def _texture(shape: Tuple[int, int], amplitude: float, rng: np.random.Generator) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.normal(size=shape), 1.5, mode="reflect")
    noise *= amplitude / max(float(noise.std()), 1e-12)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(BLOB_COUNT):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = rng.uniform(2.5, 7.0)
        sign = rng.choice([-1.0, 1.0])
        noise += sign * 3.0 * amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius * radius))
    return noise


def _bricks(shape: Tuple[int, int]) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    course = yy // BRICK_H
    offset = np.where(course % 2 == 1, BRICK_W // 2, 0)
    mortar = (yy % BRICK_H < 2) | ((xx + offset) % BRICK_W < 2)
    return ndimage.gaussian_filter(np.where(mortar, MORTAR_VALUE, BRICK_VALUE), 0.8, mode="reflect")


def _crack_alpha(shape: Tuple[int, int], margin: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Soft mask of a smooth wavy crack spanning the crop, kept CRACK_MARGIN px inside it."""
    lo, hi = CRACK_MARGIN, size - 1 - CRACK_MARGIN
    amplitude = rng.uniform(0.05, 0.1) * size
    wavelength = rng.uniform(0.6, 1.2) * size
    phase = rng.uniform(0, 2 * math.pi)
    slope = rng.uniform(-0.15, 0.15)
    centre = size / 2 + rng.uniform(-0.1, 0.1) * size
    xs = np.linspace(lo, hi, int((hi - lo) * 4) + 1)
    ys = centre + slope * (xs - size / 2) + amplitude * np.sin(2 * math.pi * xs / wavelength + phase)
    ys = np.clip(ys, lo, hi)
    line = np.zeros(shape, dtype=bool)
    line[np.round(ys).astype(int) + margin, np.round(xs).astype(int) + margin] = True
    hard = ndimage.distance_transform_edt(~line) <= CRACK_WIDTH / 2.0
    return ndimage.gaussian_filter(hard.astype(np.float64), 0.7, mode="reflect")


def render_scene(size: int = 256, texture: str = "medium", background: str = "plain", seed: int = 0) -> Scene:
    """Textured concrete-like surface with one dark crack, on a canvas padded by size/2."""
    if size < 2 * CRACK_MARGIN + 16:
        raise ConfigError(f"scene size {size} too small")
    if texture not in TEXTURE_LEVELS:
        raise ConfigError(f"unknown texture level {texture!r}")
    margin = size // 2
    shape = (size + 2 * margin, size + 2 * margin)
    rng = _rng(seed, 0)
    base = _bricks(shape) if background == "brick" else np.full(shape, BACKGROUND)
    surface = base + _texture(shape, TEXTURE_LEVELS[texture], rng)
    alpha = _crack_alpha(shape, margin, size, rng)
    data = surface * (1.0 - alpha) + CRACK_VALUE * alpha
    return Scene(canvas=GrayImage.from_array(data), margin=margin, size=size)


def _translate(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def ground_truth_homography(spec: PerturbSpec, width: int, height: Optional[int] = None, seed: int = 0) -> Homography:
    """Reference -> target map in crop coordinates: a tilt about the centre, plus the crop shift."""
    height = width if height is None else height
    tilt = TILT_LEVELS[spec.tilt]
    direction = _rng(seed, 1).uniform(0, 2 * math.pi)
    persp = np.eye(3)
    persp[2, 0] = tilt * math.cos(direction)
    persp[2, 1] = tilt * math.sin(direction)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    h = _translate(cx, cy) @ persp @ _translate(-cx, -cy)
    if spec.crop:
        h = _translate(-width / 4.0, 0.0) @ h
    return Homography(h)


def perturb(img: GrayImage, spec: Union[PerturbSpec, Mapping], seed: int, h: Optional[Homography] = None) -> GrayImage:
    """warp, then noise, blur, contrast about 0.5 and a multiplicative left-to-right shadow ramp."""
    spec = coerce_spec(spec)
    if h is None:
        h = ground_truth_homography(spec, img.width, img.height, seed)
    data = img.data
    if not np.allclose(h.h, np.eye(3)):
        data = warp_image(img, h, img.width, img.height)[0].data
    noise = NOISE_LEVELS[spec.noise]
    if noise > 0:
        data = data + _rng(seed, 2).normal(0.0, noise, size=data.shape)
    blur = BLUR_LEVELS[spec.blur]
    if blur > 0:
        data = ndimage.gaussian_filter(np.clip(data, 0.0, 1.0), blur, mode="reflect", radius=int(math.ceil(3 * blur)))
    contrast = CONTRAST_LEVELS[spec.contrast]
    if contrast != 1.0:
        data = 0.5 + contrast * (data - 0.5)
    shadow = SHADOW_LEVELS[spec.shadow]
    if shadow != 1.0:
        ramp = 1.0 + (shadow - 1.0) * np.linspace(0.0, 1.0, data.shape[1])
        data = data * ramp[None, :]
    return GrayImage.from_array(data)


def make_pair(spec: PerturbSpec, seed: int, size: int = 256) -> SyntheticPair:
    scene = render_scene(size, spec.texture, spec.background, seed)
    h_gt = ground_truth_homography(spec, size, size, seed)
    m = scene.margin
    h_canvas = Homography(_translate(m, m) @ h_gt.h @ _translate(-m, -m))
    target = crop(perturb(scene.canvas, spec, seed, h_canvas), m, size)
    return SyntheticPair(reference=scene.reference, target=target, h_gt=h_gt, spec=spec, seed=seed)


def coerce_spec(spec: Union[PerturbSpec, Mapping]) -> PerturbSpec:
    if isinstance(spec, PerturbSpec):
        return spec
    try:
        return PerturbSpec(**dict(spec))
    except ValidationError as exc:
        raise ConfigError(f"perturbation outside the declared grid: {exc.errors()[0]['msg']}") from exc


def default_grid() -> List[Tuple[str, PerturbSpec]]:
    """One factor varied at a time, the rest neutral, tilt mild unless tilt is the factor."""
    return grid_cells({factor: list(levels) for factor, levels in GRID_FACTORS.items()})


def grid_cells(factors: Mapping[str, Iterable[str]]) -> List[Tuple[str, PerturbSpec]]:
    cells: List[Tuple[str, PerturbSpec]] = []
    for factor, levels in factors.items():
        if factor not in GRID_FACTORS:
            raise ConfigError(f"unknown grid factor {factor!r}; expected one of {sorted(GRID_FACTORS)}")
        for level in levels:
            if level not in GRID_FACTORS[factor]:
                raise ConfigError(f"{factor}={level} is outside the grid {GRID_FACTORS[factor]}")
            cells.append((f"{factor}={level}", coerce_spec({factor: level})))
    return cells


def parse_grid(items: Iterable[str]) -> List[Tuple[str, PerturbSpec]]:
    """Parse CLI grid items of the form FACTOR=LEVEL[,LEVEL]."""
    factors: Dict[str, List[str]] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid item {item!r} must look like factor=level[,level]")
        factor, levels = item.split("=", 1)
        factors.setdefault(factor.strip(), []).extend(v.strip() for v in levels.split(",") if v.strip())
    return grid_cells(factors)


def scenario_cells(name: str) -> List[Tuple[str, PerturbSpec]]:
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; expected one of {sorted(SCENARIOS)}")
    return [(f"scenario={name}", SCENARIOS[name])]
