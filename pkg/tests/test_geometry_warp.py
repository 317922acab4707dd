import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from landmark_discovery import ConfigError
from landmark_discovery.geometry_warp import (
    IDENTITY,
    DeformParams,
    DeformRanges,
    apply_warp_image,
    apply_warp_points,
    sample_deform,
    warp_matrix,
)

params_st = st.builds(
    DeformParams,
    scale=st.floats(0.9, 1.1),
    rotation=st.floats(-math.radians(15), math.radians(15)),
    tx=st.floats(-0.1, 0.1),
    ty=st.floats(-0.1, 0.1),
)


class TestSampleDeform:
    def test_degenerate_ranges_give_identity(self):
        p = sample_deform(DeformRanges(1.0, 1.0, 0.0, 0.0), np.random.default_rng(3))
        assert p == DeformParams(1.0, 0.0, 0.0, 0.0)

    def test_default_ranges_containment(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            p = sample_deform(DeformRanges(), rng)
            assert 0.9 <= p.scale <= 1.1
            assert abs(p.rotation) <= 0.2618
            assert abs(p.tx) <= 0.1 and abs(p.ty) <= 0.1

    def test_seed_determinism(self):
        a = sample_deform(DeformRanges(), np.random.default_rng(11))
        b = sample_deform(DeformRanges(), np.random.default_rng(11))
        c = sample_deform(DeformRanges(), np.random.default_rng(12))
        assert a == b
        assert a != c

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(scale_min=0.0, scale_max=1.0),
            dict(scale_min=1.2, scale_max=1.1),
            dict(rot_max=-0.1),
            dict(trans_max=0.6),
        ],
    )
    def test_invalid_ranges(self, kwargs):
        with pytest.raises(ConfigError):
            DeformRanges(**kwargs)

    def test_param_invariants(self):
        with pytest.raises(ValueError):
            DeformParams(scale=0.0)
        with pytest.raises(ValueError):
            DeformParams(tx=0.7)


class TestWarpImage:
    def test_identity(self):
        img = np.random.default_rng(0).random((17, 23, 3)).astype(np.float32)
        out = apply_warp_image(img, IDENTITY)
        assert out.shape == img.shape
        assert np.max(np.abs(out - img)) <= 1e-6

    def test_translation_moves_lit_pixel(self):
        # tx = 0.25 of width 4 is one pixel: output column c reads input column c - 1
        img = np.zeros((4, 4))
        img[1, 1] = 1.0
        out = apply_warp_image(img, DeformParams(tx=0.25))
        assert out[1, 2] == pytest.approx(1.0)
        assert out[1, 1] == 0.0 and out[1, 3] == 0.0
        # column 0 reads column -1, which mirror padding reflects onto column 1
        assert out[1, 0] == pytest.approx(1.0)

    def test_half_turn_on_symmetric_image(self):
        rng = np.random.default_rng(1)
        half = rng.random((8, 16))
        img = np.concatenate([half, half[::-1, ::-1]], axis=0)  # invariant under 180 deg
        out = apply_warp_image(img, DeformParams(rotation=math.pi))
        np.testing.assert_allclose(out, img, atol=1e-5)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            apply_warp_image(np.zeros((0, 4, 3)), IDENTITY)

    @settings(max_examples=60, deadline=None)
    @given(params_st, st.integers(10, 21), st.integers(10, 21))
    def test_lit_pixel_follows_points(self, p, row, col):
        img = np.zeros((32, 32))
        img[row, col] = 1.0
        out = apply_warp_image(img, p)
        peak_r, peak_c = np.unravel_index(np.argmax(out), out.shape)
        expected = apply_warp_points([col, row], p, (32, 32))
        assert np.hypot(peak_c - expected[0], peak_r - expected[1]) <= 1.0

    @settings(max_examples=30, deadline=None)
    @given(params_st)
    def test_identity_composition_bitwise(self, p):
        img = np.random.default_rng(5).random((20, 20, 3))
        a = apply_warp_image(apply_warp_image(img, IDENTITY), p)
        b = apply_warp_image(img, p)
        assert np.array_equal(a, b)


class TestWarpPoints:
    def test_identity(self):
        pts = np.random.default_rng(0).random((6, 2)) * 60
        np.testing.assert_array_equal(apply_warp_points(pts, IDENTITY, (64, 64)), pts)

    def test_translation(self):
        pts = np.array([[3.0, 4.0], [10.0, 50.0]])
        out = apply_warp_points(pts, DeformParams(tx=0.1, ty=-0.05), (40, 80))
        np.testing.assert_allclose(out, pts + [0.1 * 80, -0.05 * 40], atol=1e-12)

    def test_quarter_turn(self):
        # x right, y down: (d, 0) -> (0, d) about the center
        h = w = 33
        c = np.array([(w - 1) / 2, (h - 1) / 2])
        d = 5.0
        out = apply_warp_points(c + [d, 0.0], DeformParams(rotation=math.pi / 2), (h, w))
        np.testing.assert_allclose(out, c + [0.0, d], atol=1e-12)

    def test_matrix_shape(self):
        m = warp_matrix(DeformParams(scale=1.05, rotation=0.1, tx=0.02, ty=0.03), (64, 64))
        assert m.shape == (2, 3)

    @settings(max_examples=100, deadline=None)
    @given(params_st, st.floats(0, 1),
           st.tuples(st.floats(-5, 70), st.floats(-5, 70)),
           st.tuples(st.floats(-5, 70), st.floats(-5, 70)))
    def test_exactly_affine(self, p, lam, a, b):
        a, b = np.array(a), np.array(b)
        lhs = apply_warp_points(lam * a + (1 - lam) * b, p, (64, 64))
        rhs = lam * apply_warp_points(a, p, (64, 64)) + (1 - lam) * apply_warp_points(b, p, (64, 64))
        np.testing.assert_allclose(lhs, rhs, atol=1e-9, rtol=0)
