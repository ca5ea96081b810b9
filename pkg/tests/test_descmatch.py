import numpy as np
import pytest

from crackalign.descmatch import (
    BinaryDescriptor,
    FloatDescriptor,
    binary_descriptor,
    binary_pattern,
    describe_at_level,
    match_descriptors,
)
from crackalign.detect import Keypoint
from crackalign.errors import KeypointOutOfBoundsError
from crackalign.imgio import GrayImage
from crackalign.scalespace import EvolutionLevel
from tests.conftest import smooth_random


def _kp(x: float, y: float, sigma: float = 1.0, orientation: float = 0.0) -> Keypoint:
    return Keypoint(x=x, y=y, sigma=sigma, level=0, response=1.0, orientation=orientation)


def _unit_rows(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(n, 64))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def test_float_descriptor_of_flat_patch_is_first_basis_vector():
    level = EvolutionLevel.from_image(GrayImage.constant(64, 64, 0.5), 2.0)
    desc = describe_at_level([_kp(32, 32)], level)[0]
    expected = np.zeros(64)
    expected[0] = 1.0
    assert np.array_equal(desc, expected)
    FloatDescriptor(desc)


def test_float_descriptor_is_unit_norm_and_deterministic(textured):
    level = EvolutionLevel.from_image(textured, 2.0)
    kps = [_kp(40, 40, 1.5), _kp(50, 44, 2.0, orientation=1.0)]
    first = describe_at_level(kps, level)
    second = describe_at_level(kps, level)
    assert np.array_equal(first, second)
    assert np.allclose(np.linalg.norm(first, axis=1), 1.0)


def test_float_descriptor_follows_a_translation():
    img = smooth_random((96, 96), 2.0, seed=21)
    shifted = GrayImage(np.roll(img.data, shift=(3, 5), axis=(0, 1)))
    a = describe_at_level([_kp(40, 40, 2.0)], EvolutionLevel.from_image(img, 2.0))[0]
    b = describe_at_level([_kp(45, 43, 2.0)], EvolutionLevel.from_image(shifted, 2.0))[0]
    elsewhere = describe_at_level([_kp(58, 30, 2.0)], EvolutionLevel.from_image(img, 2.0))[0]
    assert np.linalg.norm(a - b) < 1e-9
    assert np.linalg.norm(a - elsewhere) > 0.1


def _blob_field(size: int, scale: float, seed: int) -> GrayImage:
    """Sum of random Gaussian blobs drawn in coordinates divided by `scale`."""
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0, 96, size=(14, 2))
    widths = rng.uniform(5.0, 8.0, size=14)
    amps = rng.uniform(-0.25, 0.25, size=14)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / scale
    data = np.full((size, size), 0.5)
    for (cx, cy), w, a in zip(centres, widths, amps):
        data += a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * w * w))
    return GrayImage.from_array(data)


def test_float_descriptor_survives_a_twofold_rescale():
    small = EvolutionLevel.from_image(_blob_field(96, 1.0, seed=4), 1.5)
    large = EvolutionLevel.from_image(_blob_field(192, 2.0, seed=4), 3.0)
    a = describe_at_level([_kp(48, 48, 1.5)], small)[0]
    b = describe_at_level([_kp(96, 96, 3.0)], large)[0]
    other = describe_at_level([_kp(30, 62, 1.5)], small)[0]
    assert np.linalg.norm(a - b) < np.linalg.norm(a - other)


def test_float_descriptor_window_outside_image_raises():
    level = EvolutionLevel.from_image(GrayImage.constant(32, 32, 0.5), 2.0)
    with pytest.raises(KeypointOutOfBoundsError):
        describe_at_level([_kp(500, 500, 1.0)], level)


def test_float_descriptor_rejects_bad_vectors():
    with pytest.raises(ValueError):
        FloatDescriptor(np.ones(64))
    with pytest.raises(ValueError):
        FloatDescriptor(np.ones(10) / np.sqrt(10))


def test_binary_pattern_layout():
    pattern = binary_pattern()
    assert pattern.points.shape == (43, 2)
    assert pattern.pairs.shape == (256, 2)
    assert len({tuple(p) for p in pattern.pairs.tolist()}) == 256
    assert np.all(pattern.pairs[:, 0] < pattern.pairs[:, 1])


def test_binary_descriptor_flat_deterministic_and_offset_invariant():
    flat = GrayImage.constant(80, 80, 0.4)
    assert not binary_descriptor(_kp(40, 40), flat).bits.any()

    patch = smooth_random((80, 80), 2.0, seed=4, lo=0.0, hi=0.8)
    kp = _kp(40, 40, 1.2, orientation=0.7)
    a = binary_descriptor(kp, patch)
    assert np.array_equal(a.bits, binary_descriptor(kp, patch).bits)
    brighter = binary_descriptor(kp, GrayImage(patch.data + 0.1))
    assert int(np.count_nonzero(a.bits != brighter.bits)) == 0


def test_binary_descriptor_near_border_raises():
    img = GrayImage.constant(80, 80, 0.4)
    with pytest.raises(KeypointOutOfBoundsError):
        binary_descriptor(_kp(10, 40), img)
    with pytest.raises(KeypointOutOfBoundsError):
        binary_descriptor(_kp(40, 40, sigma=3.0), img)


def test_binary_descriptor_bit_count():
    with pytest.raises(ValueError):
        BinaryDescriptor.from_bits(np.zeros(100, dtype=bool))
    desc = BinaryDescriptor.from_bits(np.arange(256) % 3 == 0)
    assert desc.bits.sum() == 86


def test_match_singleton_and_identity():
    rows = _unit_rows(6, seed=1)
    single = match_descriptors([FloatDescriptor(rows[0])], [FloatDescriptor(rows[1])])
    assert len(single) == 1
    assert single[0].ratio == 0.0

    descs = [FloatDescriptor(r) for r in rows]
    matches = match_descriptors(descs, descs)
    assert [(m.query, m.train) for m in matches] == [(i, i) for i in range(6)]
    assert all(m.distance == 0.0 and m.ratio == 0.0 for m in matches)


def test_match_rejects_equidistant_candidates():
    q = np.zeros(64)
    q[0] = 1.0
    a = np.zeros(64)
    a[1] = 1.0
    b = np.zeros(64)
    b[2] = 1.0
    assert match_descriptors([FloatDescriptor(q)], [FloatDescriptor(a), FloatDescriptor(b)]) == []


def test_match_recovers_a_permutation():
    rows = _unit_rows(10, seed=2)
    perm = np.random.default_rng(3).permutation(10)
    A = [FloatDescriptor(r) for r in rows]
    B = [FloatDescriptor(rows[i]) for i in perm]
    matches = match_descriptors(A, B)
    assert len(matches) == 10
    for m in matches:
        assert perm[m.train] == m.query


def test_match_binary_and_errors():
    rng = np.random.default_rng(5)
    bits = rng.random((4, 256)) > 0.5
    A = [BinaryDescriptor.from_bits(b) for b in bits]
    matches = match_descriptors(A, list(reversed(A)))
    assert sorted((m.query, m.train) for m in matches) == [(0, 3), (1, 2), (2, 1), (3, 0)]

    floats = [FloatDescriptor(r) for r in _unit_rows(2, seed=6)]
    with pytest.raises(TypeError):
        match_descriptors(floats, A)
    with pytest.raises(ValueError):
        match_descriptors(floats, [])
    assert match_descriptors([], floats) == []
