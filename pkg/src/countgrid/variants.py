"""Tessellated grids, discrete feature epitomes, the hybrid model and the degenerate reductions.

Each variant is an estimator (log-likelihood per anchor plus an update) run
by the shared EM driver in :mod:`countgrid.grid`.

Epitome index convention: a feature at map offset ``s`` is scored against
grid cell ``k + s`` for a window anchored at ``k``; the update copies it back
to that same cell.
"""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .corpus import map_histograms
from .grid import (InvalidInputError, PlainEstimator, _finish_update,
                   _safe_log, _weighted_ratio, bag_log_likelihood,
                   counts_log_likelihood,
                   dirichlet_penalty, fit_with, posterior_from_loglik)
from .windowed import (InvalidTessellationError, InvalidWindowError,
                       TessellationSpec, WindowSpec, sector_window_sums,
                       shifted_window_sum, toroidal_window_sum)

VARIANT_NAMES = ("plain", "tessellated", "epitome", "hybrid",
                 "mixture_unigrams", "spatial_bow")


@dataclass(frozen=True)
class VariantKind:
    name: str
    tess: Optional[TessellationSpec] = None

    def __post_init__(self):
        if self.name not in VARIANT_NAMES:
            raise ValueError(f"unknown variant {self.name!r}")
        if self.name in ("tessellated", "spatial_bow") and self.tess is None:
            raise ValueError(f"variant {self.name} needs a tessellation")

    @classmethod
    def parse(cls, text):
        """``plain``, ``tessellated:2x2``, ``spatial_bow:3x3``, ..."""
        name, _, geom = text.partition(":")
        tess = None
        if geom:
            a, b = geom.lower().split("x")
            tess = TessellationSpec(int(a), int(b))
        return cls(name, tess)

    def __str__(self):
        return self.name if self.tess is None else f"{self.name}:{self.tess}"


# -- tessellated ---------------------------------------------------------------

def _sector_histograms(g, tess):
    sub = tess.sector_window(g.window)
    return [s / sub.area for s in sector_window_sums(g.pi, g.window, tess)]


def tessellated_log_likelihood(g, sectioned, tess):
    """sum_s sum_z c^s_z log h^s[k, z] for a (T, S, Z) stack -> (T, Ex, Ey)."""
    sectioned = np.asarray(sectioned, dtype=np.float64)
    if sectioned.ndim == 2:
        sectioned = sectioned[None]
    if sectioned.shape[1] != tess.n_sectors:
        raise InvalidTessellationError(
            f"sectioned bag has {sectioned.shape[1]} sectors, model expects {tess.n_sectors}")
    ll = None
    for s, hs in enumerate(_sector_histograms(g, tess)):
        part = counts_log_likelihood(hs, sectioned[:, s])
        ll = part if ll is None else ll + part
    return ll


def e_step_tessellated(g, log_prior, sectioned, tess=None):
    tess = tess or g.tess
    sectioned = np.asarray(sectioned, dtype=np.float64)
    log_q = posterior_from_loglik(
        log_prior, tessellated_log_likelihood(g, sectioned, tess))
    return log_q[0] if sectioned.ndim == 2 else log_q


def m_step_tessellated(g, sectioned, log_q, cfg, tess=None):
    tess = tess or g.tess
    sectioned = np.asarray(sectioned, dtype=np.float64)
    if sectioned.ndim == 2:
        sectioned = sectioned[None]
    log_q = np.asarray(log_q).reshape(-1, *g.extent)
    if sectioned.shape[0] == 0:
        raise InvalidInputError("empty corpus")
    if sectioned.shape[0] != log_q.shape[0]:
        raise InvalidInputError("posteriors not aligned with corpus")
    sub = tess.sector_window(g.window)
    ex, ey, z = g.pi.shape
    q = np.exp(log_q).reshape(log_q.shape[0], -1)
    # Sector s of anchor k reads the sub-window anchored at k + offset_s, so
    # shift each sector's weighted counts onto that sub-window anchor; all
    # sectors then share one sub-window histogram plane.
    weighted = np.zeros((ex, ey, z))
    for s, off in enumerate(tess.offsets(g.window)):
        ws = (q.T @ sectioned[:, s]).reshape(ex, ey, z)
        weighted += np.roll(ws, off, axis=(0, 1))
    h = toroidal_window_sum(g.pi, sub) / sub.area
    spread = shifted_window_sum(_weighted_ratio(weighted, h), sub)
    pi = _finish_update(g.pi, g.pi * spread, cfg.eta_vector(z))
    return replace(g, pi=pi)


class TessellatedEstimator:
    def __init__(self, tess):
        self.tess = tess

    def loglik(self, g, data):
        return tessellated_log_likelihood(g, data, self.tess)

    def update(self, g, data, log_q, cfg):
        return m_step_tessellated(g, data, log_q, cfg, self.tess)

    def penalty(self, g, eta):
        return dirichlet_penalty(g, eta / self.tess.sector_window(g.window).area)


# -- discrete epitome ------------------------------------------------------------

def _check_maps(g, maps):
    maps = np.asarray(maps, dtype=np.int64)
    if maps.ndim == 2:
        maps = maps[None]
    nx, ny = maps.shape[1:]
    if (nx, ny) != (g.window.wx, g.window.wy):
        raise InvalidWindowError(
            f"feature map extent {nx}x{ny} must equal the window {g.window}")
    if maps.size and (maps.min() < 0 or maps.max() >= g.vocab_size):
        raise InvalidInputError("feature index out of range")
    return maps


def epitome_log_likelihood(g, maps, method="direct"):
    """sum_s log pi[k + s, z_s] for a (T, Nx, Ny) stack of maps -> (T, Ex, Ey)."""
    maps = _check_maps(g, maps)
    logpi = _safe_log(g.pi)
    if method == "fft" and np.all(np.isfinite(logpi)):
        return _epitome_loglik_fft(logpi, maps)
    if method not in ("direct", "fft"):
        raise ValueError(f"unknown method {method!r}")
    t, nx, ny = maps.shape
    ll = np.zeros((t,) + g.extent)
    for sx in range(nx):
        for sy in range(ny):
            shifted = np.roll(logpi, (-sx, -sy), axis=(0, 1))
            ll += np.moveaxis(shifted[:, :, maps[:, sx, sy]], -1, 0)
    return ll


def _epitome_loglik_fft(logpi, maps):
    ex, ey, z = logpi.shape
    t, nx, ny = maps.shape
    ind = np.zeros((t, ex, ey, z))
    tt, xx, yy = np.meshgrid(np.arange(t), np.arange(nx), np.arange(ny),
                             indexing="ij")
    ind[tt, xx, yy, maps] = 1.0
    fp = np.fft.fft2(logpi, axes=(0, 1))
    fi = np.fft.fft2(ind, axes=(1, 2))
    # circular cross-correlation: sum_s ind[s] logpi[k + s]
    spec = np.sum(fp[None] * np.conj(fi), axis=-1)
    return np.fft.ifft2(spec, axes=(1, 2)).real


def e_step_epitome(g, log_prior, maps, method="direct"):
    maps = np.asarray(maps)
    log_q = posterior_from_loglik(
        log_prior, epitome_log_likelihood(g, maps, method=method))
    return log_q[0] if maps.ndim == 2 else log_q


def epitome_counts(extent, z, maps, log_q):
    """A[i, z] = sum_t sum_k q_t(k) [feature at offset i - k equals z]."""
    maps = np.asarray(maps, dtype=np.int64)
    if maps.ndim == 2:
        maps = maps[None]
    ex, ey = extent
    t, nx, ny = maps.shape
    q = np.exp(np.asarray(log_q).reshape(t, -1))
    acc = np.zeros((ex, ey, z))
    eye = np.eye(z)
    for sx in range(nx):
        for sy in range(ny):
            part = (q.T @ eye[maps[:, sx, sy]]).reshape(ex, ey, z)
            acc += np.roll(part, (sx, sy), axis=(0, 1))
    return acc


def m_step_epitome(g, maps, log_q, cfg):
    """Copy each map's features into the grid at its mapped windows, plus pseudocounts."""
    maps = _check_maps(g, maps)
    if maps.shape[0] != np.asarray(log_q).reshape(-1, *g.extent).shape[0]:
        raise InvalidInputError("posteriors not aligned with corpus")
    acc = epitome_counts(g.extent, g.vocab_size, maps, log_q)
    pi = _finish_update(g.pi, acc, cfg.eta_vector(g.vocab_size))
    return replace(g, pi=pi)


class EpitomeEstimator:
    def __init__(self, method="direct"):
        self.method = method

    def loglik(self, g, data):
        return epitome_log_likelihood(g, data, method=self.method)

    def update(self, g, data, log_q, cfg):
        return m_step_epitome(g, data, log_q, cfg)

    def penalty(self, g, eta):
        return dirichlet_penalty(g, eta)


class HybridEstimator:
    """Pooled-bag E-step with the epitome copy M-step; data is (maps, bags)."""

    def loglik(self, g, data):
        return PlainEstimator().loglik(g, data[1])

    def update(self, g, data, log_q, cfg):
        return m_step_epitome(g, data[0], log_q, cfg)

    def penalty(self, g, eta):
        return dirichlet_penalty(g, eta)


# -- dispatch ------------------------------------------------------------------

def _require(corpus, kinds, variant):
    if corpus.kind not in kinds:
        raise InvalidInputError(
            f"variant {variant} needs a {' or '.join(kinds)} corpus, got {corpus.kind}")


def convert_corpus(kind, corpus):
    """The corpus in the representation ``kind`` consumes, pooling or tessellating maps."""
    if isinstance(kind, str):
        kind = VariantKind.parse(kind)
    if kind.name in ("plain", "mixture_unigrams"):
        return corpus.pooled()
    if kind.name in ("tessellated", "spatial_bow") and corpus.kind == "maps":
        return corpus.sectioned(kind.tess)
    return corpus


def prepare(kind, corpus, window):
    """Validate a (variant, corpus, window) triple.

    Returns (estimator, data, window, tess) ready for the EM driver.
    """
    name = kind.name
    if len(corpus) == 0:
        raise InvalidInputError("empty corpus")
    corpus = convert_corpus(kind, corpus)
    if name == "plain":
        _require(corpus, ("bags",), kind)
        return PlainEstimator(), corpus.data, window, TessellationSpec(1, 1)
    if name == "mixture_unigrams":
        _require(corpus, ("bags",), kind)
        if window is not None and (window.wx, window.wy) != (1, 1):
            raise InvalidWindowError("mixture of unigrams uses a 1x1 window")
        return PlainEstimator(), corpus.data, WindowSpec(1, 1), TessellationSpec(1, 1)
    if name in ("tessellated", "spatial_bow"):
        tess = kind.tess
        _require(corpus, ("sectioned",), kind)
        if corpus.tess != tess:
            raise InvalidTessellationError(
                f"corpus tessellation {corpus.tess} != variant tessellation {tess}")
        if name == "spatial_bow":
            if window is not None and (window.wx, window.wy) != (tess.sx, tess.sy):
                raise InvalidWindowError("spatial BoW uses a window equal to the tessellation")
            window = WindowSpec(tess.sx, tess.sy)
        tess.sector_window(window)
        return TessellatedEstimator(tess), corpus.data, window, tess
    _require(corpus, ("maps",), kind)
    n = WindowSpec(*corpus.map_extent)
    if window is not None and window != n:
        raise InvalidWindowError(
            f"{name} requires the window to equal the map extent {n}, got {window}")
    if name == "epitome":
        return EpitomeEstimator(), corpus.data, n, TessellationSpec(*corpus.map_extent)
    bags = map_histograms(corpus.data, corpus.vocab_size)
    return HybridEstimator(), (corpus.data, bags), n, TessellationSpec(1, 1)


def fit_variant(kind, corpus, extent, window, cfg, init=None, log_prior=None):
    """Fit any variant with the shared EM driver.

    ``window`` may be None for variants that fix it (epitome, hybrid,
    mixture of unigrams, spatial BoW).
    """
    if isinstance(kind, str):
        kind = VariantKind.parse(kind)
    estimator, data, window, tess = prepare(kind, corpus, window)
    if window is None:
        raise InvalidWindowError(f"variant {kind} needs a window")
    window.check_fits(extent)
    return fit_with(estimator, data, extent, window, corpus.vocab_size, cfg,
                    kind=kind.name, tess=tess, init=init, log_prior=log_prior)


def sample_log_likelihood(g, kind, sample):
    """Per-anchor log-likelihood of samples in the variant's representation.

    Hybrid models score pooled bags; feature maps given to them are pooled here.
    """
    name = kind.name if isinstance(kind, VariantKind) else kind
    sample = np.asarray(sample)
    if name == "hybrid" and sample.dtype.kind in "iu":
        maps = sample if sample.ndim == 3 else sample[None]
        sample = map_histograms(maps, g.vocab_size)
    if name in ("plain", "mixture_unigrams", "hybrid"):
        return bag_log_likelihood(g, sample)
    if name in ("tessellated", "spatial_bow"):
        return tessellated_log_likelihood(g, sample, g.tess)
    return epitome_log_likelihood(g, sample)
