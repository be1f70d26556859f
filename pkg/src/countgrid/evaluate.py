"""Classification, capacity sweeps, HMM filtering, clustering labels and reconstruction scores."""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .corpus import Corpus
from .grid import (CountingGrid, InvalidInputError, log_likelihood_from_loglik,
                   window_histograms)
from .variants import VariantKind, fit_variant, sample_log_likelihood
from .windowed import WindowSpec

log = logging.getLogger(__name__)

GRID_LADDER = tuple(range(2, 11)) + tuple(range(15, 41, 5))
GAMMA_GRID = (0.25, 0.5, 1.0)
TIE_TOL = 1e-12


@dataclass
class ClassifierModel:
    labels: list
    grids: list
    log_priors: list
    kind: VariantKind
    reports: list = field(default_factory=list)

    @property
    def vocab_size(self):
        return self.grids[0].vocab_size


@dataclass
class TransitionModel:
    matrix: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if not np.allclose(self.matrix.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition rows must sum to 1")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")


def capacity(ex, ey, wx, wy):
    if min(ex, ey, wx, wy) <= 0:
        raise ValueError("dimensions must be positive")
    return (ex * ey) / (wx * wy)


def train_classifier(corpora, extent, window, kind, cfg, threads=1):
    """Fit one model per class with a shared config (and seed).

    ``corpora`` maps label -> Corpus, in the class order used for tie-breaking.
    """
    if isinstance(kind, str):
        kind = VariantKind.parse(kind)
    if len(corpora) < 2:
        raise InvalidInputError("need at least two classes")
    for label, c in corpora.items():
        if len(c) == 0:
            raise InvalidInputError(f"class {label!r} has no samples")
    labels = list(corpora)

    def one(label):
        return fit_variant(kind, corpora[label], extent, window, cfg)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            fits = list(pool.map(one, labels))
    else:
        fits = [one(label) for label in labels]
    return ClassifierModel(labels, [f[0] for f in fits], [f[1] for f in fits],
                           kind, [f[3] for f in fits])


def class_free_energies(model, samples):
    """Free energy of each sample under each class model, shape (T, C)."""
    out = []
    for g, lp in zip(model.grids, model.log_priors):
        ll = sample_log_likelihood(g, model.kind, samples)
        out.append(-log_likelihood_from_loglik(lp, ll))
    return np.stack(out, axis=-1)


def _as_batch(model, sample):
    sample = np.asarray(sample)
    name = model.kind.name
    single_ndim = 1 if name in ("plain", "mixture_unigrams") else 2
    if name == "hybrid" and sample.dtype.kind == "f":
        single_ndim = 1
    return sample[None] if sample.ndim == single_ndim else sample, sample.ndim == single_ndim


def classify(model, sample):
    """Label with the lowest free energy; ties go to the earlier class.

    Returns (label, free energies) for one sample, or (labels, (T, C) array)
    for a batch.
    """
    batch, single = _as_batch(model, sample)
    if batch.dtype.kind == "f" and batch.shape[-1] != model.vocab_size:
        raise InvalidInputError(
            f"sample has {batch.shape[-1]} features, model expects {model.vocab_size}")
    fe = class_free_energies(model, batch)
    best = fe.min(axis=1, keepdims=True)
    # rounding noise between classes must not break a tie
    idx = np.argmax(fe <= best + TIE_TOL * (1.0 + np.abs(best)), axis=1)
    labels = [model.labels[i] for i in idx]
    if single:
        return labels[0], fe[0]
    return labels, fe


def accuracy(model, corpus):
    labels, _ = classify(model, corpus.data)
    return float(np.mean([a == b for a, b in zip(labels, corpus.labels)]))


# -- capacity sweep -------------------------------------------------------------------

@dataclass
class SweepRow:
    grid: int
    window: int
    kappa: float
    score: float
    fold_scores: list


def admissible_configs(t, grid_sizes=GRID_LADDER, window_sizes=None,
                       kappa_range=None):
    """Square (E, W) pairs with kappa in [lo, hi]; defaults to [1.5, T/2]."""
    lo, hi = kappa_range if kappa_range is not None else (1.5, t / 2)
    out = []
    for e in grid_sizes:
        ws = window_sizes if window_sizes is not None else range(2, e + 1, 2)
        for w in ws:
            if w > e:
                continue
            k = capacity(e, e, w, w)
            if lo <= k <= hi:
                out.append((e, w))
    return out


def _folds(t, folds, seed):
    perm = np.random.default_rng(seed).permutation(t)
    return [np.sort(perm[i::folds]) for i in range(folds)]


def sweep(corpus, kind, cfg, folds=2, grid_sizes=GRID_LADDER, window_sizes=None,
          kappa_range=None, threads=1):
    """Cross-validated mean held-out free energy per admissible (E, W); best first."""
    if folds < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    if isinstance(kind, str):
        kind = VariantKind.parse(kind)
    t = len(corpus)
    configs = admissible_configs(t, grid_sizes, window_sizes, kappa_range)
    if not configs:
        raise ValueError(f"no admissible configuration for T={t}")
    parts = _folds(t, folds, cfg.seed)

    def score(config):
        e, w = config
        scores = []
        for i, test in enumerate(parts):
            train = np.concatenate([p for j, p in enumerate(parts) if j != i])
            g, lp, _, _ = fit_variant(kind, corpus.subset(train), (e, e),
                                      WindowSpec(w, w), cfg)
            ll = sample_log_likelihood(g, kind, corpus.subset(test).data)
            scores.append(float(-np.mean(log_likelihood_from_loglik(lp, ll))))
        return SweepRow(e, w, capacity(e, e, w, w), float(np.mean(scores)), scores)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(score, configs))
    else:
        rows = [score(c) for c in configs]
    return sorted(rows, key=lambda r: (r.score, r.kappa))


# -- temporal filtering -------------------------------------------------------------------

def hmm_filter_loglik(loglik, tm):
    """Forward filtering from per-step class log-likelihoods (T, C), scaled by gamma.

    The initial class distribution is uniform and applies to the first step.
    Returns the (T, C) log posteriors P(l_t | c_1..t).
    """
    loglik = np.asarray(loglik, dtype=np.float64)
    t, c = loglik.shape
    with np.errstate(divide="ignore"):
        log_a = np.log(tm.matrix)
    out = np.empty((t, c))
    prev = None
    for i in range(t):
        if prev is None:
            pred = np.full(c, -np.log(c))
        else:
            pred = logsumexp(prev[:, None] + log_a, axis=0)
        cur = pred + tm.gamma * loglik[i] if tm.gamma else pred
        out[i] = cur - logsumexp(cur)
        prev = out[i]
    return out


def hmm_filter(model, tm, sequence):
    """Per-step class posteriors for a sequence of samples (log domain in, probabilities out)."""
    batch, _ = _as_batch(model, sequence)
    if len(batch) == 0:
        raise InvalidInputError("empty sequence")
    loglik = -class_free_energies(model, batch)
    return np.exp(hmm_filter_loglik(loglik, tm))


def _forward_backward(loglik, log_a):
    t, c = loglik.shape
    alpha = np.empty((t, c))
    alpha[0] = -np.log(c) + loglik[0]
    for i in range(1, t):
        alpha[i] = logsumexp(alpha[i - 1][:, None] + log_a, axis=0) + loglik[i]
    beta = np.zeros((t, c))
    for i in range(t - 2, -1, -1):
        beta[i] = logsumexp(log_a + loglik[i + 1] + beta[i + 1], axis=1)
    total = logsumexp(alpha[-1])
    return alpha, beta, total


def baum_welch_transitions(logliks, n_classes, tol=1e-6, max_iters=500):
    """EM for the transition matrix with fixed per-step log-likelihoods.

    ``logliks`` is a list of (T_j, C) arrays. Returns (matrix, likelihood trace).
    """
    a = np.full((n_classes, n_classes), 1.0 / n_classes)
    trace = []
    for _ in range(max_iters):
        log_a = np.log(a)
        xi = np.zeros((n_classes, n_classes))
        total = 0.0
        for ll in logliks:
            alpha, beta, z = _forward_backward(ll, log_a)
            total += z
            if len(ll) > 1:
                lx = (alpha[:-1, :, None] + log_a[None] + ll[1:, None, :]
                      + beta[1:, None, :] - z)
                xi += np.exp(lx).sum(axis=0)
        trace.append(float(total))
        rows = xi.sum(axis=1, keepdims=True)
        a = np.where(rows > 0, xi / np.where(rows > 0, rows, 1.0), a)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * (1 + abs(trace[-2])):
            break
    return a, trace


def estimate_transitions(sequences, labels=None, gamma=1.0, logliks=None):
    """Transition model from labelled sequences (add-one bigram counts) or by Baum-Welch.

    Supervised: ``sequences`` is a list of label sequences, ``labels`` the class order.
    Unsupervised: pass ``logliks`` (list of (T, C) per-step log-likelihoods).
    """
    if logliks is not None:
        n = logliks[0].shape[1]
        matrix, _ = baum_welch_transitions([gamma * np.asarray(l) for l in logliks], n)
        return TransitionModel(matrix, gamma)
    if not sequences:
        raise InvalidInputError("need at least one sequence")
    if labels is None:
        labels = list(dict.fromkeys(itertools.chain.from_iterable(sequences)))
    index = {lab: i for i, lab in enumerate(labels)}
    counts = np.ones((len(labels), len(labels)))
    for seq in sequences:
        for a, b in zip(seq[:-1], seq[1:]):
            counts[index[a], index[b]] += 1
    return TransitionModel(counts / counts.sum(axis=1, keepdims=True), gamma)


def select_gamma(model, tm, sequences, truths, grid=GAMMA_GRID):
    """Pick the gamma with the best filtering accuracy on validation sequences."""
    best = None
    for gamma in grid:
        trial = TransitionModel(tm.matrix, gamma)
        hits = []
        for seq, truth in zip(sequences, truths):
            post = hmm_filter(model, trial, seq)
            hits.extend(model.labels[i] == t for i, t in zip(post.argmax(axis=1), truth))
        acc = float(np.mean(hits))
        if best is None or acc > best[1]:
            best = (gamma, acc)
    return best[0]


# -- clustering --------------------------------------------------------------------

def map_positions(log_q):
    """Posterior argmax (x, y) per sample from a (T, Ex, Ey) stack."""
    log_q = np.asarray(log_q)
    flat = log_q.reshape(log_q.shape[0], -1).argmax(axis=1)
    return np.stack(np.unravel_index(flat, log_q.shape[1:]), axis=1)


def toroidal_distance(a, b, extent):
    d = np.abs(np.asarray(a) - np.asarray(b))
    d = np.minimum(d, np.asarray(extent) - d)
    return np.sqrt((d ** 2).sum(axis=-1))


def nearest_map_label(train_log_q, train_labels, test_log_q):
    """Label of the training sample mapped closest (toroidally) to each test sample.

    Ties go to the training sample listed first.
    """
    train_log_q = np.asarray(train_log_q)
    extent = train_log_q.shape[1:]
    single = np.asarray(test_log_q).ndim == 2
    test = np.asarray(test_log_q)[None] if single else np.asarray(test_log_q)
    tp = map_positions(train_log_q)
    out = []
    for pos in map_positions(test):
        d = toroidal_distance(tp, pos, extent)
        out.append(train_labels[int(np.argmin(d))])
    return out[0] if single else out


# -- reconstruction scoring ------------------------------------------------------------

def grid_symmetries(a):
    """The dihedral images of a (Ex, Ey, ...) array that keep its extent.

    Eight for square grids, four (no transposes) otherwise.
    """
    out = []
    square = a.shape[0] == a.shape[1]
    for t in (False, True):
        if t and not square:
            continue
        b = np.swapaxes(a, 0, 1) if t else a
        for fx in (False, True):
            for fy in (False, True):
                c = b[::-1] if fx else b
                c = c[:, ::-1] if fy else c
                out.append(np.ascontiguousarray(c))
    return out


def aligned_kl(truth_h, learned_h):
    """min over symmetries and toroidal shifts of mean_k KL(truth[k] || learned[k + d]).

    Returns (kl, (symmetry index, dx, dy)).
    """
    truth_h = np.asarray(truth_h)
    if truth_h.shape != np.asarray(learned_h).shape:
        raise InvalidInputError("histogram fields differ in shape")
    ex, ey, _ = truth_h.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        neg_entropy = np.sum(np.where(truth_h > 0, truth_h * np.log(truth_h), 0.0))
    ft = np.fft.fft2(truth_h, axes=(0, 1))
    best = (np.inf, None)
    for si, cand in enumerate(grid_symmetries(np.asarray(learned_h))):
        with np.errstate(divide="ignore"):
            logl = np.log(cand)
        if not np.all(np.isfinite(logl)):
            cross = _cross_direct(truth_h, logl)
        else:
            fl = np.fft.fft2(logl, axes=(0, 1))
            # cross[d] = sum_k sum_z truth[k] log learned[k + d]
            cross = np.fft.ifft2(np.sum(np.conj(ft) * fl, axis=-1)).real
        kl = (neg_entropy - cross) / (ex * ey)
        d = np.unravel_index(np.argmin(kl), kl.shape)
        if kl[d] < best[0]:
            best = (float(kl[d]), (si, int(d[0]), int(d[1])))
    return best


def _cross_direct(truth_h, logl):
    ex, ey, _ = truth_h.shape
    out = np.empty((ex, ey))
    for dx in range(ex):
        for dy in range(ey):
            shifted = np.roll(logl, (-dx, -dy), axis=(0, 1))
            with np.errstate(invalid="ignore"):
                out[dx, dy] = np.sum(np.where(truth_h > 0, truth_h * shifted, 0.0))
    return out


@dataclass
class ReconstructionScore:
    learned_loglik: float
    truth_loglik: float
    loglik_gap: float
    kl: float
    alignment: tuple


def reconstruction_score(learned, learned_prior, truth, truth_prior, heldout):
    """Held-out per-token log-likelihood under both models and the best-aligned window KL.

    Held-out samples are pooled into plain bags and scored against each
    model's window histograms, whatever variant produced the learned grid.
    """
    if learned.vocab_size != truth.vocab_size:
        raise InvalidInputError("vocabulary sizes differ")
    if isinstance(heldout, Corpus):
        bags = heldout.pooled().data
    else:
        bags = np.atleast_2d(np.asarray(heldout, dtype=np.float64))
    if bags.shape[-1] != truth.vocab_size:
        raise InvalidInputError("held-out bags do not match the vocabulary")
    tokens = bags.sum()

    def per_token(g, lp):
        ll = sample_log_likelihood(g, "plain", bags)
        return float(np.sum(log_likelihood_from_loglik(lp, ll)) / tokens)

    a, b = per_token(learned, learned_prior), per_token(truth, truth_prior)
    kl, where = aligned_kl(window_histograms(truth), window_histograms(learned))
    return ReconstructionScore(a, b, b - a, kl, where)


def layout_truth_grid(layout, window, z, eta=1e-2):
    """One-hot layout (smoothed by eta, renormalized) as a counting grid."""
    layout = np.asarray(layout, dtype=np.int64)
    pi = np.eye(z)[layout] + eta
    pi /= pi.sum(axis=-1, keepdims=True)
    return CountingGrid(pi, window)
