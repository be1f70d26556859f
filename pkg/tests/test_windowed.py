import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from countgrid.windowed import (InvalidTessellationError, InvalidWindowError,
                                TessellationSpec, WindowSpec, cumulative_sum_2d,
                                sector_window_sums, shifted_window_sum,
                                toroidal_window_sum)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


def test_cumsum_zero_plane():
    np.testing.assert_array_equal(cumulative_sum_2d(np.zeros((3, 3))), np.zeros((3, 3)))


def test_cumsum_ones():
    np.testing.assert_array_equal(cumulative_sum_2d(np.ones((2, 2))), [[1, 2], [2, 4]])


def test_cumsum_matches_double_loop():
    p = np.random.default_rng(0).normal(size=(5, 7))
    assert rel_err(cumulative_sum_2d(p), oracles.prefix_sum(p)) <= 1e-12


@pytest.mark.parametrize("method", ["blocked", "corner"])
def test_unit_window_is_identity(method):
    p = np.random.default_rng(1).random((4, 5))
    np.testing.assert_allclose(toroidal_window_sum(p, WindowSpec(1, 1), method), p, rtol=1e-14)


@pytest.mark.parametrize("method", ["blocked", "corner"])
def test_full_window_is_global_sum(method):
    p = np.random.default_rng(2).random((4, 6))
    out = toroidal_window_sum(p, WindowSpec(4, 6), method)
    np.testing.assert_allclose(out, np.full((4, 6), p.sum()), rtol=1e-13)


@pytest.mark.parametrize("method", ["blocked", "corner"])
def test_window_sum_4x4_w2x3(method):
    p = np.random.default_rng(3).random((4, 4))
    assert rel_err(toroidal_window_sum(p, WindowSpec(2, 3), method),
                   oracles.window_sum(p, 2, 3)) <= 1e-12


def test_window_larger_than_extent_rejected():
    with pytest.raises(InvalidWindowError):
        toroidal_window_sum(np.ones((3, 3)), WindowSpec(4, 1))


def test_trailing_axes_carried():
    p = np.random.default_rng(4).random((5, 3, 4))
    out = toroidal_window_sum(p, WindowSpec(3, 2))
    for z in range(4):
        np.testing.assert_allclose(out[..., z], oracles.window_sum(p[..., z], 3, 2), rtol=1e-13)


def test_blocked_keeps_tiny_sums_accurate():
    # a huge value next to tiny ones: differencing prefix sums would lose the tiny windows
    p = np.full((8, 8), 1e-30)
    p[0, 0] = 1e10
    out = toroidal_window_sum(p, WindowSpec(2, 2))
    expected = oracles.window_sum(p, 2, 2)
    np.testing.assert_allclose(out, expected, rtol=1e-13)


def test_shifted_window_sum_covers_anchors_containing_cell():
    p = np.random.default_rng(5).random((5, 6))
    out = shifted_window_sum(p, WindowSpec(2, 3))
    for ix in range(5):
        for iy in range(6):
            want = sum(p[(ix - dx) % 5, (iy - dy) % 6] for dx in range(2) for dy in range(3))
            assert out[ix, iy] == pytest.approx(want, rel=1e-13)


def test_sector_sums_degenerate_is_bit_identical():
    p = np.random.default_rng(6).random((6, 5))
    w = WindowSpec(4, 2)
    (only,) = sector_window_sums(p, w, TessellationSpec(1, 1))
    assert np.array_equal(only, toroidal_window_sum(p, w))


def test_unit_sectors_copy_cells():
    p = np.random.default_rng(7).random((5, 5))
    planes = sector_window_sums(p, WindowSpec(3, 2), TessellationSpec(3, 2))
    for sx in range(3):
        for sy in range(2):
            np.testing.assert_array_equal(planes[sx * 2 + sy],
                                          np.roll(p, (-sx, -sy), axis=(0, 1)))


def test_sector_sums_6x6_w4_s2():
    p = np.random.default_rng(8).random((6, 6))
    got = sector_window_sums(p, WindowSpec(4, 4), TessellationSpec(2, 2))
    for a, b in zip(got, oracles.sector_sums(p, 4, 4, 2, 2)):
        assert rel_err(a, b) <= 1e-12


def test_sector_sums_non_divisible_rejected():
    with pytest.raises(InvalidTessellationError):
        sector_window_sums(np.ones((6, 6)), WindowSpec(3, 4), TessellationSpec(2, 2))


@st.composite
def plane_and_window(draw):
    ex = draw(st.integers(1, 9))
    ey = draw(st.integers(1, 9))
    wx = draw(st.integers(1, ex))
    wy = draw(st.integers(1, ey))
    seed = draw(st.integers(0, 2**31))
    p = np.random.default_rng(seed).normal(size=(ex, ey))
    return p, WindowSpec(wx, wy)


@given(plane_and_window())
@settings(max_examples=60, deadline=None)
def test_window_sum_matches_brute_force(case):
    p, w = case
    expected = oracles.window_sum(p, w.wx, w.wy)
    scale = np.abs(p).sum() * w.area
    assert np.max(np.abs(toroidal_window_sum(p, w) - expected)) <= 1e-12 * scale


@given(plane_and_window())
@settings(max_examples=60, deadline=None)
def test_every_cell_counted_area_times(case):
    p, w = case
    total = toroidal_window_sum(p, w).sum()
    assert total == pytest.approx(w.area * p.sum(), rel=1e-10, abs=1e-10)
