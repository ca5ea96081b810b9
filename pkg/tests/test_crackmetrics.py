import math

import numpy as np
import pytest

from crackalign.crackmetrics import (
    BLUE,
    PURPLE,
    RED,
    WHITE,
    compute_metrics,
    metric_errors,
    render_overlay,
    segment_crack,
    skeletonize,
    spine_length,
    warp_image,
)
from crackalign.errors import DimensionMismatchError
from crackalign.homography import Homography, invert
from crackalign.imgio import GrayImage
from crackalign.models import CrackMetrics
from tests.conftest import smooth_random


def _bar(width: int = 3, length: int = 400, shape=(30, 420), top: int = 10, left: int = 10) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[top : top + width, left : left + length] = True
    return mask


def _render(mask: np.ndarray, dark: float = 0.1, light: float = 0.9) -> GrayImage:
    return GrayImage(np.where(mask, dark, light))


def test_warp_identity_and_translation():
    img = smooth_random((40, 50), 2.0, seed=1)
    same, valid = warp_image(img, Homography.identity(), 50, 40)
    assert valid.all()
    assert np.allclose(same.data, img.data)

    moved, valid = warp_image(img, Homography.translation(10, 0), 50, 40)
    assert not valid[:, :10].any()
    assert valid[:, 10:].all()
    assert np.allclose(moved.data[:, 10:], img.data[:, :-10])
    assert np.all(moved.data[:, :10] == 0.0)


def test_warp_round_trip_on_interior():
    img = smooth_random((80, 80), 4.0, seed=2)
    angle = math.radians(4)
    H = Homography(
        np.array(
            [
                [math.cos(angle), -math.sin(angle), 3.0],
                [math.sin(angle), math.cos(angle), -2.0],
                [1e-5, 0.0, 1.0],
            ]
        )
    )
    there, _ = warp_image(img, H, 80, 80)
    back, valid = warp_image(there, invert(H), 80, 80)
    inner = np.zeros_like(valid)
    inner[15:-15, 15:-15] = True
    assert valid[inner].all()
    assert np.max(np.abs(back.data - img.data)[inner]) <= 0.02


def test_segment_blank_bar_and_speck():
    assert not segment_crack(GrayImage.constant(30, 40, 1.0)).any()

    bar = _bar()
    assert np.array_equal(segment_crack(_render(bar)), bar)

    speckled = bar.copy()
    speckled[25, 200] = True
    assert np.array_equal(segment_crack(_render(speckled)), bar)


def test_segment_respects_valid_region():
    bar = _bar()
    img = _render(bar)
    valid = np.ones(bar.shape, dtype=bool)
    valid[:, 210:] = False
    segmented = segment_crack(img, valid)
    assert not segmented[:, 210:].any()
    assert segmented[:, :210].sum() == bar[:, :210].sum()
    with pytest.raises(DimensionMismatchError):
        segment_crack(img, np.ones((3, 3), dtype=bool))


def test_skeleton_properties():
    line = np.zeros((20, 30), dtype=bool)
    line[10, 5:25] = True
    assert np.array_equal(skeletonize(line), line)

    skel = skeletonize(_bar())
    rows = np.unique(np.nonzero(skel)[0])
    assert rows.tolist() == [11]
    assert 396 <= int(skel.sum()) <= 400
    assert np.array_equal(skeletonize(skel), skel)
    assert not skeletonize(np.zeros((5, 5), dtype=bool)).any()


def test_spine_length_counts_axial_and_diagonal_steps():
    assert spine_length(np.zeros((4, 4), dtype=bool)) == 0.0
    diagonal = np.eye(10, dtype=bool)
    assert spine_length(diagonal) == pytest.approx(9 * math.sqrt(2))
    line = np.zeros((3, 12), dtype=bool)
    line[1, 1:11] = True
    assert spine_length(line) == pytest.approx(9.0)


def test_metrics_of_a_bar():
    m = compute_metrics(_bar())
    assert m.area == 1200
    assert m.spine_length == pytest.approx(398, abs=2)
    assert m.avg_width == pytest.approx(3.0, abs=0.1)
    assert m.area_over_length == pytest.approx(1200 / m.spine_length)


def test_metrics_of_a_diagonal():
    mask = np.zeros((14, 14), dtype=bool)
    idx = np.arange(2, 12)
    mask[idx, idx] = True
    m = compute_metrics(mask)
    assert m.area == 10
    assert m.spine_length == pytest.approx(12.73, abs=0.1)
    assert m.avg_width == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize("width", [1, 3, 5])
def test_width_tracks_bar_thickness(width):
    m = compute_metrics(_bar(width=width, length=300, shape=(40, 320), top=12))
    assert m.avg_width == pytest.approx(width, abs=0.25)


def test_metrics_empty_and_valid_restriction():
    assert compute_metrics(np.zeros((10, 10), dtype=bool)) == CrackMetrics()
    bar = _bar()
    valid = np.ones(bar.shape, dtype=bool)
    valid[:, 210:] = False
    assert compute_metrics(bar, valid).area == bar[:, :210].sum()


def test_metric_errors():
    baseline = CrackMetrics(area=1000, spine_length=100.0, avg_width=10.0, area_over_length=10.0)
    corrected = CrackMetrics(area=1050, spine_length=98.0, avg_width=10.5, area_over_length=10.7)
    errs = metric_errors(corrected, baseline)
    assert errs.area_err == pytest.approx(5.0)
    assert errs.length_err == pytest.approx(2.0)
    assert errs.width_err == pytest.approx(5.0)
    with pytest.raises(ValueError):
        metric_errors(corrected, CrackMetrics())


def test_render_overlay_colours():
    base = np.array([[True, True, False, False]])
    corr = np.array([[True, False, True, False]])
    canvas = render_overlay(base, corr)
    assert canvas.shape == (1, 4, 3)
    assert canvas.dtype == np.uint8
    assert [tuple(px) for px in canvas[0]] == [PURPLE, RED, BLUE, WHITE]
    with pytest.raises(DimensionMismatchError):
        render_overlay(base, np.zeros((2, 2), dtype=bool))
