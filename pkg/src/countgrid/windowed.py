"""Toroidal window sums over 2-D planes.

All kernels treat the first two axes of the input as the (x, y) plane and
carry any trailing axes (typically the feature axis) along unchanged. A
window anchored at ``k`` covers cells ``k .. k + W - 1`` on each axis,
wrapping modulo the plane extent.
"""

from dataclasses import dataclass

import numpy as np


class InvalidWindowError(ValueError):
    pass


class InvalidTessellationError(ValueError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    wx: int
    wy: int

    def __post_init__(self):
        if self.wx < 1 or self.wy < 1:
            raise InvalidWindowError(f"window must be at least 1x1, got {self}")

    @property
    def area(self):
        return self.wx * self.wy

    def check_fits(self, extent):
        ex, ey = extent
        if self.wx > ex or self.wy > ey:
            raise InvalidWindowError(
                f"window {self.wx}x{self.wy} larger than extent {ex}x{ey}")

    def __str__(self):
        return f"{self.wx}x{self.wy}"


@dataclass(frozen=True)
class TessellationSpec:
    sx: int
    sy: int

    def __post_init__(self):
        if self.sx < 1 or self.sy < 1:
            raise InvalidTessellationError(
                f"tessellation must be at least 1x1, got {self}")

    @property
    def n_sectors(self):
        return self.sx * self.sy

    def sector_window(self, window):
        """Sub-window size for each sector of ``window``."""
        if window.wx % self.sx or window.wy % self.sy:
            raise InvalidTessellationError(
                f"window {window} not divisible by tessellation {self}")
        return WindowSpec(window.wx // self.sx, window.wy // self.sy)

    def offsets(self, window):
        """Anchor offset of every sector, sector index ``sx * Sy + sy``."""
        sub = self.sector_window(window)
        return [(i * sub.wx, j * sub.wy)
                for i in range(self.sx) for j in range(self.sy)]

    def __str__(self):
        return f"{self.sx}x{self.sy}"


def cumulative_sum_2d(p):
    """Inclusive prefix sum over the first two axes."""
    p = np.asarray(p, dtype=np.float64)
    return np.cumsum(np.cumsum(p, axis=0), axis=1)


def _sliding_sum_axis(a, w, axis):
    # Blocked prefix/suffix sums: every window of length w spans at most two
    # blocks of length w, so each sum is a suffix of one block plus a prefix
    # of the next. Only additions of original values, hence no cancellation.
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    if w == 1:
        return np.moveaxis(a.copy(), 0, axis)
    need = n + w - 1
    n_blocks = -(-need // w)
    length = n_blocks * w
    idx = np.arange(length) % n
    padded = a[idx]
    if length > need:
        padded[need:] = 0.0
    blocks = padded.reshape((n_blocks, w) + a.shape[1:])
    prefix = np.cumsum(blocks, axis=1).reshape(padded.shape)
    suffix = np.flip(np.cumsum(np.flip(blocks, axis=1), axis=1),
                     axis=1).reshape(padded.shape)
    k = np.arange(n)
    out = suffix[k].copy()
    tail = k % w != 0
    out[tail] += prefix[k[tail] + w - 1]
    return np.moveaxis(out, 0, axis)


def _corner_window_sum(p, window):
    # Classic four-corner integral image on a wrap-padded plane.
    ex, ey = p.shape[:2]
    padded = np.take(p, np.arange(ex + window.wx - 1) % ex, axis=0)
    padded = np.take(padded, np.arange(ey + window.wy - 1) % ey, axis=1)
    f = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1) + p.shape[2:])
    f[1:, 1:] = cumulative_sum_2d(padded)
    wx, wy = window.wx, window.wy
    return (f[wx:wx + ex, wy:wy + ey] - f[:ex, wy:wy + ey]
            - f[wx:wx + ex, :ey] + f[:ex, :ey])


def toroidal_window_sum(p, window, method="blocked"):
    """Sum of ``p`` over the window anchored at every cell, wrapping.

    ``method="blocked"`` (default) uses per-block cumulative sums and never
    subtracts, which keeps tiny window sums accurate next to large ones.
    ``method="corner"`` is the textbook integral-image identity.
    """
    p = np.asarray(p, dtype=np.float64)
    window.check_fits(p.shape[:2])
    if method == "corner":
        return _corner_window_sum(p, window)
    if method != "blocked":
        raise ValueError(f"unknown method {method!r}")
    return _sliding_sum_axis(_sliding_sum_axis(p, window.wx, 0), window.wy, 1)


def shifted_window_sum(p, window, method="blocked"):
    """Sum over the window whose bottom-right corner is each cell.

    out[i] = sum of p[k] for k in i - W + 1 .. i (wrapped), i.e. the set of
    anchors whose window contains i.
    """
    s = toroidal_window_sum(p, window, method=method)
    return np.roll(s, (window.wx - 1, window.wy - 1), axis=(0, 1))


def sector_window_sums(p, window, tess, method="blocked"):
    """Per-sector window sums; one plane per sector, sector-major order.

    Sector ``(sx, sy)`` sums the sub-window of size W/S anchored at
    ``k + (sx * Wx/Sx, sy * Wy/Sy)``. Each plane is a cyclic shift of the
    sub-window sum plane.
    """
    p = np.asarray(p, dtype=np.float64)
    window.check_fits(p.shape[:2])
    sub = tess.sector_window(window)
    base = toroidal_window_sum(p, sub, method=method)
    if tess.n_sectors == 1:
        return [base]
    return [np.roll(base, (-ox, -oy), axis=(0, 1))
            for ox, oy in tess.offsets(window)]
