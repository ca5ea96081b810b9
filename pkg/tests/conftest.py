import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from crackalign.imgio import GrayImage
from crackalign.models import PerturbSpec
from crackalign.synthetic import make_pair, render_scene


def gaussian_blob(size: int, centres, sigma: float, background: float = 0.2, amplitude: float = 0.6) -> GrayImage:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    data = np.full((size, size), background)
    for cx, cy in centres:
        data += amplitude * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma * sigma))
    return GrayImage.from_array(data)


def smooth_random(shape, sigma: float, seed: int = 0, lo: float = 0.2, hi: float = 0.8) -> GrayImage:
    rng = np.random.default_rng(seed)
    data = ndimage.gaussian_filter(rng.random(shape), sigma, mode="reflect")
    data = (data - data.min()) / max(data.max() - data.min(), 1e-12)
    return GrayImage(lo + (hi - lo) * data)


@pytest.fixture
def step_edge() -> GrayImage:
    data = np.zeros((64, 64))
    data[:, 32:] = 1.0
    return GrayImage(data)


@pytest.fixture
def textured() -> GrayImage:
    return smooth_random((96, 96), 2.0, seed=7)


@pytest.fixture(scope="session")
def scene_reference() -> GrayImage:
    return render_scene(size=160, seed=3).reference


@pytest.fixture(scope="session")
def mild_pair():
    return make_pair(PerturbSpec(tilt="mild", noise="low"), seed=0, size=192)


@pytest.fixture
def write_gray(tmp_path):
    def _write(name: str, img: GrayImage) -> str:
        path = tmp_path / name
        Image.fromarray(np.round(img.data * 255).astype(np.uint8)).save(path)
        return str(path)

    return _write
