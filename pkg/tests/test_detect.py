import math

import numpy as np
import pytest

from crackalign.detect import (
    Keypoint,
    assign_orientation,
    detect_extrema,
    fast_corners,
    hessian_response,
)
from crackalign.imgio import GrayImage
from crackalign.scalespace import (
    EvolutionLevel,
    ScaleSchedule,
    build_gaussian_pyramid,
    build_nonlinear_scale_space,
)
from tests.conftest import gaussian_blob, smooth_random


def _angle_gap(a: float, b: float) -> float:
    d = (a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def test_hessian_response_flat_and_edge(step_edge):
    flat = EvolutionLevel.from_image(GrayImage.constant(32, 32, 0.5), 2.0)
    assert np.all(hessian_response(flat) == 0)

    edge = EvolutionLevel.from_image(step_edge, 2.0)
    response = hessian_response(edge)
    assert np.allclose(response[8:-8, 8:-8], 0.0, atol=1e-12)


def test_hessian_response_peaks_at_blob_centre():
    img = gaussian_blob(64, [(32, 32)], sigma=3.0)
    level = EvolutionLevel.from_image(img, 3.0)
    response = hessian_response(level)
    assert response[32, 32] > 0
    assert np.unravel_index(np.argmax(response), response.shape) == (32, 32)


def test_detect_extrema_constant_image_is_empty():
    flat = GrayImage.constant(64, 64, 0.5)
    assert detect_extrema(build_nonlinear_scale_space(flat, ScaleSchedule(1.6, 2, 3))) == []
    assert detect_extrema(build_gaussian_pyramid(flat, ScaleSchedule(1.6, 2, 3))) == []


def test_single_blob_gives_one_keypoint_at_its_scale():
    img = gaussian_blob(96, [(48, 48)], sigma=4.0)
    space = build_nonlinear_scale_space(img, ScaleSchedule(1.6, 3, 4), kappa=1.0)
    keypoints = detect_extrema(space)
    assert len(keypoints) == 1
    kp = keypoints[0]
    assert math.hypot(kp.x - 48, kp.y - 48) < 1.0
    assert abs(math.log2(kp.sigma / 4.0)) <= 0.35
    assert kp.detector == "nonlinear-hessian"


def test_two_blobs_give_two_keypoints():
    img = gaussian_blob(96, [(28, 30), (68, 66)], sigma=4.0)
    space = build_nonlinear_scale_space(img, ScaleSchedule(1.6, 3, 4), kappa=1.0)
    keypoints = detect_extrema(space)
    assert len(keypoints) == 2
    found = sorted((round(kp.x), round(kp.y)) for kp in keypoints)
    assert math.hypot(found[0][0] - 28, found[0][1] - 30) < 1.5
    assert math.hypot(found[1][0] - 68, found[1][1] - 66) < 1.5


def test_keypoints_pass_threshold_and_counts_shrink_with_threshold(textured):
    space = build_nonlinear_scale_space(textured, ScaleSchedule(1.6, 2, 4))
    counts = []
    for threshold in (1e-6, 1e-5, 1e-4, 1e-3):
        keypoints = detect_extrema(space, threshold)
        assert all(kp.response > threshold for kp in keypoints)
        assert all(0 <= kp.x <= textured.width - 1 and 0 <= kp.y <= textured.height - 1 for kp in keypoints)
        counts.append(len(keypoints))
    assert counts == sorted(counts, reverse=True)


def _strict_local_max(responses, levels, i, gx, gy):
    here = responses[i]
    h, w = here.shape
    if not (1 <= gx < w - 1 and 1 <= gy < h - 1):
        return False
    value = here[gy, gx]
    fi = levels[i].factor
    for j in (i - 1, i, i + 1):
        fj = levels[j].factor
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if j == i and dx == 0 and dy == 0:
                    continue
                if responses[j][((gy + dy) * fi) // fj, ((gx + dx) * fi) // fj] >= value:
                    return False
    return True


def test_keypoints_survive_an_independent_recheck(textured):
    space = build_nonlinear_scale_space(textured, ScaleSchedule(1.6, 2, 4))
    threshold = 1e-4
    keypoints = detect_extrema(space, threshold)
    assert keypoints
    responses = [hessian_response(level) for level in space.levels]
    sublevels = space.schedule.sublevels
    for kp in keypoints:
        assert 1 <= kp.level <= len(space.levels) - 2
        level = space.levels[kp.level]
        gx, gy = kp.x / level.factor, kp.y / level.factor
        cells = [
            (cx, cy)
            for cx in {math.floor(gx), math.ceil(gx)}
            for cy in {math.floor(gy), math.ceil(gy)}
            if abs(cx - gx) <= 0.5 + 1e-9 and abs(cy - gy) <= 0.5 + 1e-9
        ]
        passing = [(cx, cy) for cx, cy in cells if _strict_local_max(responses, space.levels, kp.level, cx, cy)]
        assert passing
        assert any(responses[kp.level][cy, cx] > threshold for cx, cy in passing)
        assert abs(math.log2(kp.sigma / level.sigma)) * sublevels <= 0.5 + 1e-9


def test_dog_keypoints_and_canonical_order(textured):
    keypoints = detect_extrema(build_gaussian_pyramid(textured, ScaleSchedule(1.6, 2, 3)), 0.01)
    assert keypoints
    assert all(kp.detector == "dog" and kp.response > 0.005 for kp in keypoints)
    keys = [(-kp.response, kp.y, kp.x) for kp in keypoints]
    assert keys == sorted(keys)
    capped = detect_extrema(build_gaussian_pyramid(textured, ScaleSchedule(1.6, 2, 3)), 0.01, max_keypoints=3)
    assert capped == keypoints[:3]


def test_fast_constant_corner_and_edge():
    assert fast_corners(GrayImage.constant(48, 48, 0.5)) == []

    square = np.zeros((60, 60))
    square[20:40, 20:40] = 1.0
    corners = fast_corners(GrayImage(square), threshold=0.1, scales=1)
    assert any(math.hypot(kp.x - 20, kp.y - 20) <= 1.5 for kp in corners)
    assert all(kp.detector == "fast" and kp.response > 0 for kp in corners)

    edge = np.zeros((64, 64))
    edge[:, 32:] = 1.0
    assert fast_corners(GrayImage(edge), threshold=0.1, scales=3) == []


def test_fast_rejects_bad_parameters():
    img = GrayImage.constant(32, 32, 0.5)
    with pytest.raises(ValueError):
        fast_corners(img, threshold=0.0)
    with pytest.raises(ValueError):
        fast_corners(img, arc=17)


def test_orientation_of_axis_aligned_ramps():
    ramp = np.tile(np.arange(64) / 64.0, (64, 1))
    kp = Keypoint(x=32, y=32, sigma=2.0, level=0, response=1.0)
    horizontal = EvolutionLevel.from_image(GrayImage(ramp), 2.0)
    vertical = EvolutionLevel.from_image(GrayImage(ramp.T.copy()), 2.0)
    assert assign_orientation(kp, horizontal) == pytest.approx(0.0, abs=1e-12)
    assert assign_orientation(kp, vertical) == pytest.approx(math.pi / 2)


def test_orientation_follows_a_quarter_turn():
    patch = smooth_random((65, 65), 3.0, seed=11)
    turned = GrayImage(np.rot90(patch.data).copy())
    kp = Keypoint(x=32, y=32, sigma=2.0, level=0, response=1.0)
    before = assign_orientation(kp, EvolutionLevel.from_image(patch, 2.0))
    after = assign_orientation(kp, EvolutionLevel.from_image(turned, 2.0))
    assert 0 <= before < 2 * math.pi
    assert _angle_gap(after, before - math.pi / 2) <= math.pi / 36
