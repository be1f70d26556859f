"""Counting grid model: parameters, E/M steps, location priors, bound and EM driver.

Shapes used throughout::

    pi          (Ex, Ey, Z)   per-cell feature distributions
    log_prior   (Ex, Ey)      log P(l = k)
    bags        (T, Z)        feature counts, one row per sample
    log_q       (T, Ex, Ey)   per-sample log posterior over window anchors

Priors and posteriors are kept as plain log-probability arrays.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .windowed import (TessellationSpec, WindowSpec,
                       shifted_window_sum, toroidal_window_sum)

log = logging.getLogger(__name__)

PRIOR_UPDATES = ("counts", "smoothed", "fixed-uniform")


class DegenerateModelError(ValueError):
    """A sample has zero likelihood under every window."""


class InvalidInputError(ValueError):
    pass


class NonFiniteBoundError(FloatingPointError):
    def __init__(self, iteration, value):
        super().__init__(f"non-finite bound {value} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


@dataclass
class CountingGrid:
    pi: np.ndarray
    window: WindowSpec
    kind: str = "plain"
    tess: TessellationSpec = field(default_factory=lambda: TessellationSpec(1, 1))

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        if self.pi.ndim != 3:
            raise InvalidInputError(f"pi must be (Ex, Ey, Z), got {self.pi.shape}")
        self.window.check_fits(self.extent)

    @property
    def extent(self):
        return self.pi.shape[:2]

    @property
    def vocab_size(self):
        return self.pi.shape[2]

    @property
    def n_cells(self):
        return self.pi.shape[0] * self.pi.shape[1]


@dataclass
class TrainConfig:
    eta: object = 1e-2
    tol: float = 1e-5
    max_iters: int = 200
    restarts: int = 3
    seed: int = 0
    prior_update: str = "smoothed"
    init_noise: float = 1e-2

    def __post_init__(self):
        if np.any(np.asarray(self.eta) < 0):
            raise ValueError("eta must be nonnegative")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.prior_update not in PRIOR_UPDATES:
            raise ValueError(f"prior_update must be one of {PRIOR_UPDATES}")

    def eta_vector(self, z):
        eta = np.broadcast_to(np.asarray(self.eta, dtype=np.float64), (z,))
        return eta.copy()


@dataclass
class FitReport:
    bound_trace: list
    converged: bool
    chosen_restart: int
    iterations_used: int
    restart_bounds: list = field(default_factory=list)

    @property
    def final_bound(self):
        return self.bound_trace[-1]


def uniform_log_prior(extent):
    ex, ey = extent
    return np.full((ex, ey), -np.log(ex * ey))


def normalize_log(a):
    """Normalize log-weights over the two trailing grid axes."""
    a = np.asarray(a, dtype=np.float64)
    z = logsumexp(a, axis=(-2, -1), keepdims=True)
    return a - z


def window_histograms(g):
    """Window-averaged feature distribution h[k, z] at every anchor."""
    return toroidal_window_sum(g.pi, g.window) / g.window.area


def _safe_log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def counts_log_likelihood(h, bags):
    """sum_z c_z log h[k, z] for every bag and anchor, shape (T, Ex, Ey).

    Terms with c_z = 0 contribute 0 even where h[k, z] = 0.
    """
    bags = np.atleast_2d(np.asarray(bags, dtype=np.float64))
    ex, ey, z = h.shape
    flat = h.reshape(-1, z)
    positive = flat > 0
    logh = np.where(positive, _safe_log(flat), 0.0)
    ll = bags @ logh.T
    if not positive.all():
        impossible = (bags > 0).astype(np.float64) @ (~positive).T.astype(np.float64)
        ll[impossible > 0] = -np.inf
    return ll.reshape(-1, ex, ey)


def bag_log_likelihood(g, bags):
    return counts_log_likelihood(window_histograms(g), bags)


def posterior_from_loglik(log_prior, ll):
    joint = log_prior + ll
    dead = np.all(np.isneginf(joint), axis=(-2, -1))
    if np.any(dead):
        bad = np.flatnonzero(np.atleast_1d(dead))
        raise DegenerateModelError(
            f"samples {bad.tolist()} have zero likelihood at every anchor")
    return normalize_log(joint)


def e_step(g, log_prior, bags):
    """Exact posterior over window anchors.

    A 1-D bag returns an (Ex, Ey) array, a (T, Z) batch returns (T, Ex, Ey).
    """
    bags = np.asarray(bags, dtype=np.float64)
    if bags.shape[-1] != g.vocab_size:
        raise InvalidInputError(
            f"bag length {bags.shape[-1]} != vocabulary size {g.vocab_size}")
    log_q = posterior_from_loglik(log_prior, bag_log_likelihood(g, bags))
    return log_q[0] if bags.ndim == 1 else log_q


def _finish_update(pi_old, scaled, eta):
    # scaled: the data-driven (unsmoothed) part of the update
    raw = eta + scaled
    norm = raw.sum(axis=-1, keepdims=True)
    empty = norm[..., 0] <= 0
    if np.any(empty):
        # no data and no pseudocounts reach this cell: keep it as it was
        raw[empty] = pi_old[empty]
        norm[empty] = pi_old[empty].sum(axis=-1, keepdims=True)
    return raw / norm


def _weighted_ratio(weighted_counts, h):
    # sum_t q(k) c_z / h[k, z], with 0/0 := 0
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(weighted_counts > 0, weighted_counts / h, 0.0)


def m_step(g, bags, log_q, cfg):
    """Smoothed counting-grid update; the per-window source split is solved in closed form."""
    bags = np.atleast_2d(np.asarray(bags, dtype=np.float64))
    log_q = np.asarray(log_q).reshape(-1, *g.extent)
    if bags.shape[0] == 0:
        raise InvalidInputError("empty corpus")
    if bags.shape[0] != log_q.shape[0]:
        raise InvalidInputError("posteriors not aligned with corpus")
    ex, ey, z = g.pi.shape
    q = np.exp(log_q).reshape(log_q.shape[0], -1)
    weighted = (q.T @ bags).reshape(ex, ey, z)
    h = window_histograms(g)
    spread = shifted_window_sum(_weighted_ratio(weighted, h), g.window)
    pi = _finish_update(g.pi, g.pi * spread, cfg.eta_vector(z))
    return replace(g, pi=pi)


def prior_update_counts(log_q):
    log_q = np.asarray(log_q)
    if log_q.ndim == 2:
        log_q = log_q[None]
    if log_q.shape[0] == 0:
        raise InvalidInputError("need at least one posterior")
    return normalize_log(logsumexp(log_q, axis=0))


def prior_update_smoothed(log_q, window):
    """Prior mass spread over the W-box mask m[k - i] (ones at the upper-left W cells)."""
    log_q = np.asarray(log_q)
    if log_q.ndim == 2:
        log_q = log_q[None]
    if log_q.shape[0] == 0:
        raise InvalidInputError("need at least one posterior")
    total = np.exp(log_q).sum(axis=0)
    spread = shifted_window_sum(total, window)
    with np.errstate(divide="ignore"):
        return normalize_log(np.log(spread))


def update_prior(log_q, window, mode, extent):
    if mode == "counts":
        return prior_update_counts(log_q)
    if mode == "smoothed":
        return prior_update_smoothed(log_q, window)
    return uniform_log_prior(extent)


def bound_from_loglik(log_prior, ll, log_q):
    """sum_t sum_k q [log P + ll - log q] with 0 log 0 := 0."""
    log_q = np.asarray(log_q)
    q = np.exp(log_q)
    live = q > 0
    terms = np.zeros_like(q)
    lp = np.broadcast_to(log_prior, q.shape)
    terms[live] = q[live] * (lp[live] + ll[live] - log_q[live])
    return float(terms.sum())


def bound(g, log_prior, bags, log_q):
    """Variational lower bound on the corpus log-likelihood (multinomial coefficients omitted)."""
    ll = bag_log_likelihood(g, bags)
    return bound_from_loglik(log_prior, ll, np.asarray(log_q).reshape(ll.shape))


def log_likelihood_from_loglik(log_prior, ll):
    """Exact per-sample log-likelihood log sum_k P(k) exp(ll[k])."""
    return logsumexp(log_prior + ll, axis=(-2, -1))


def free_energy(g, log_prior, bag):
    """Negative log marginal likelihood of one bag (or a batch)."""
    bag = np.asarray(bag, dtype=np.float64)
    fe = -log_likelihood_from_loglik(log_prior, bag_log_likelihood(g, bag))
    return float(fe[0]) if bag.ndim == 1 else fe


def dirichlet_penalty(g, eta):
    """sum_{i,z} eta_z log pi[i, z]."""
    if not np.any(eta):
        return 0.0
    logpi = _safe_log(g.pi)
    return float(np.sum(np.where(eta > 0, eta * logpi, 0.0)))


def init_grid(ex, ey, z, window, cfg, rng, kind="plain", tess=None):
    window.check_fits((ex, ey))
    pi = 1.0 / z + cfg.init_noise * rng.uniform(size=(ex, ey, z))
    pi /= pi.sum(axis=-1, keepdims=True)
    return CountingGrid(pi, window, kind=kind,
                        tess=tess or TessellationSpec(1, 1))


class PlainEstimator:
    """E/M pair for bags of features on a plain counting grid."""

    def loglik(self, g, data):
        return bag_log_likelihood(g, data)

    def update(self, g, data, log_q, cfg):
        return m_step(g, data, log_q, cfg)

    def penalty(self, g, eta):
        # The update adds eta to window-summed ratios that carry an extra
        # factor of the window area, so eta / area is the pseudocount per
        # unit of expected feature count.
        return dirichlet_penalty(g, eta / g.window.area)


def run_em(estimator, data, g, log_prior, cfg, restart=0):
    """One EM run from a given start. Returns (grid, log_prior, log_q, trace, converged)."""
    eta = cfg.eta_vector(g.vocab_size)
    trace = []
    converged = False
    for it in range(cfg.max_iters):
        ll = estimator.loglik(g, data)
        log_q = posterior_from_loglik(log_prior, ll)
        g = estimator.update(g, data, log_q, cfg)
        log_prior = update_prior(log_q, g.window, cfg.prior_update, g.extent)
        value = (bound_from_loglik(log_prior, estimator.loglik(g, data), log_q)
                 + estimator.penalty(g, eta))
        if not np.isfinite(value):
            raise NonFiniteBoundError(it, value)
        trace.append(value)
        log.debug("restart %d iter %d bound %.10g", restart, it, value)
        if it > 0 and abs(value - trace[-2]) / (1.0 + abs(trace[-2])) <= cfg.tol:
            converged = True
            break
    log_q = posterior_from_loglik(log_prior, estimator.loglik(g, data))
    return g, log_prior, log_q, trace, converged


def fit_with(estimator, data, extent, window, vocab_size, cfg, kind="plain",
             tess=None, init=None, log_prior=None):
    """Run restarts of EM with ``estimator`` and keep the best final bound.

    ``init`` fixes the starting grid (a single run, no restarts).
    """
    ex, ey = extent
    window.check_fits(extent)
    if log_prior is None:
        log_prior = uniform_log_prior(extent)
    if init is not None:
        starts = [init]
    else:
        seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
        starts = [init_grid(ex, ey, vocab_size, window, cfg,
                            np.random.default_rng(s), kind=kind, tess=tess)
                  for s in seeds]
    best = None
    finals = []
    for r, g0 in enumerate(starts):
        result = run_em(estimator, data, g0, log_prior, cfg, restart=r)
        finals.append(result[3][-1])
        if best is None or result[3][-1] > best[1][3][-1]:
            best = (r, result)
    r, (g, lp, log_q, trace, converged) = best
    report = FitReport(bound_trace=trace, converged=converged,
                       chosen_restart=r, iterations_used=len(trace),
                       restart_bounds=finals)
    return g, lp, log_q, report


def fit(bags, extent, window, cfg, init=None, log_prior=None):
    """Learn a plain counting grid from a (T, Z) array of bags."""
    bags = np.asarray(bags, dtype=np.float64)
    if bags.ndim != 2 or bags.shape[0] == 0:
        raise InvalidInputError("corpus must be a non-empty (T, Z) array")
    if np.any(bags < 0) or not np.all(np.isfinite(bags)):
        raise InvalidInputError("counts must be finite and nonnegative")
    return fit_with(PlainEstimator(), bags, extent, window, bags.shape[1], cfg,
                    init=init, log_prior=log_prior)
