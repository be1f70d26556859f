"""Command-line interface: ``countgrid <command> [flags]``.

Reports go to stdout as tab-separated tables, logs to stderr. Every command
writes its outputs plus a ``manifest.json`` into ``--out``. Exit status is 0
on success, 2 for configuration errors and 3 for data errors.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .corpus import (Corpus, CorpusFormatError, default_palette, generate_grid_corpus,
                     generate_layout_corpus, load_corpus, make_layout, random_grid,
                     render_grid, save_corpus, write_ppm)
from .evaluate import (GRID_LADDER, accuracy, class_free_energies, classify,
                       estimate_transitions, hmm_filter, layout_truth_grid,
                       nearest_map_label, reconstruction_score, sweep, train_classifier)
from .grid import (CountingGrid, DegenerateModelError, InvalidInputError,
                   NonFiniteBoundError, TrainConfig, posterior_from_loglik, uniform_log_prior)
from .serialize import ModelFormatError, load_grid, save_grid
from .variants import VariantKind, convert_corpus, fit_variant, sample_log_likelihood
from .windowed import InvalidTessellationError, InvalidWindowError, TessellationSpec, WindowSpec

log = logging.getLogger("countgrid")

EXIT_CONFIG = 2
EXIT_DATA = 3


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def geometry(text):
    """Parse ``WxH`` into a pair of positive ints."""
    try:
        a, b = text.lower().split("x")
        a, b = int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if a < 1 or b < 1:
        raise argparse.ArgumentTypeError(f"dimensions must be positive, got {text!r}")
    return a, b


def int_list(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from None


def variant(text):
    try:
        return VariantKind.parse(text)
    except (ValueError, InvalidTessellationError) as err:
        raise argparse.ArgumentTypeError(str(err)) from None


# -- shared plumbing -------------------------------------------------------------------

def train_config(args):
    try:
        return TrainConfig(eta=args.eta, tol=args.tol, max_iters=args.max_iters,
                           restarts=args.restarts, seed=args.seed, prior_update=args.prior)
    except ValueError as err:
        raise ConfigError(str(err)) from None


def read_corpus(path):
    try:
        return load_corpus(path)
    except FileNotFoundError:
        raise DataError(f"corpus not found: {path}") from None
    except CorpusFormatError as err:
        raise DataError(f"{path}: {err}") from None


def read_model(path):
    try:
        return load_grid(path)
    except FileNotFoundError:
        raise DataError(f"model not found: {path}") from None
    except ModelFormatError as err:
        raise DataError(f"{path}: {err}") from None


def window_for(args):
    return WindowSpec(*args.window) if args.window else None


def emit(rows, header):
    out = sys.stdout
    out.write("\t".join(header) + "\n")
    for row in rows:
        out.write("\t".join(fmt(v) for v in row) + "\n")
    out.flush()


def fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class Run:
    """Collects outputs and metrics for the manifest of one command."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.outputs = {}
        self.metrics = {}
        self.start = time.perf_counter()
        os.makedirs(args.out, exist_ok=True)

    def path(self, name):
        p = os.path.join(self.args.out, name)
        self.outputs[name] = p
        return p

    def write_manifest(self):
        config = {k: v for k, v in vars(self.args).items() if k not in ("func", "out")}
        manifest = {
            "command": self.args.command,
            "version": __version__,
            "argv": self.argv,
            "config": json.loads(json.dumps(config, default=str)),
            "seed": getattr(self.args, "seed", None),
            "outputs": self.outputs,
            "wall_clock_seconds": time.perf_counter() - self.start,
            "metrics": self.metrics,
        }
        with open(os.path.join(self.args.out, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")


# -- commands --------------------------------------------------------------------------

def cmd_generate(args, run):
    """Write a synthetic corpus: bags sampled from a random grid, or a layout map."""
    if args.samples < 0:
        raise ConfigError("--samples must be nonnegative")
    if args.source == "grid":
        window = WindowSpec(*args.window)
        window.check_fits(args.grid)
        g = random_grid(args.grid, args.z, window, args.seed)
        lp = uniform_log_prior(args.grid)
        corpus, anchors = generate_grid_corpus(g, lp, args.samples, args.tokens, args.seed + 1)
        save_grid(g, lp, run.path("truth.cgrd"))
        np.savetxt(run.path("anchors.tsv"), anchors, fmt="%d", delimiter="\t")
    else:
        layout = make_layout(args.grid, args.z, args.seed)
        corpus = Corpus("maps", args.z, layout[None], ids=["layout"])
    save_corpus(corpus, run.path("corpus.cgc"))
    run.metrics["samples"] = len(corpus)
    emit([(k, v) for k, v in run.outputs.items()], ("output", "path"))


def cmd_train(args, run):
    corpus = read_corpus(args.corpus)
    cfg = train_config(args)
    g, lp, _, report = fit_variant(args.variant, corpus, args.grid, window_for(args), cfg)
    save_grid(g, lp, run.path("model.cgrd"))
    run.metrics.update(final_bound=report.final_bound, converged=report.converged,
                       iterations=report.iterations_used,
                       chosen_restart=report.chosen_restart,
                       restart_bounds=report.restart_bounds)
    emit(enumerate(report.bound_trace, start=1), ("iteration", "bound"))


def cmd_classify(args, run):
    train = read_corpus(args.train)
    test = read_corpus(args.test)
    if train.labels is None:
        raise DataError("training corpus needs labels")
    cfg = train_config(args)
    model = train_classifier(
        {lab: convert_corpus(args.variant, c) for lab, c in train.by_label().items()},
        args.grid, window_for(args), args.variant, cfg, threads=args.threads)
    for lab, g, lp in zip(model.labels, model.grids, model.log_priors):
        save_grid(g, lp, run.path(f"class-{lab}.cgrd"))
    test = convert_corpus(args.variant, test)
    predicted, fe = classify(model, test.data)
    rows = []
    for i, sid in enumerate(test.ids):
        truth = "" if test.labels is None else test.labels[i]
        rows.append((sid, truth, predicted[i], *fe[i]))
    emit(rows, ("id", "label", "predicted", *(f"free_energy:{l}" for l in model.labels)))
    if test.labels is not None:
        acc = accuracy(model, test)
        run.metrics["accuracy"] = acc
        log.info("accuracy %.6f", acc)


def cmd_sweep(args, run):
    corpus = convert_corpus(args.variant, read_corpus(args.corpus))
    cfg = train_config(args)
    try:
        rows = sweep(corpus, args.variant, cfg, folds=args.folds,
                     grid_sizes=args.grids or GRID_LADDER,
                     window_sizes=args.windows, threads=args.threads)
    except ValueError as err:
        if isinstance(err, InvalidInputError):
            raise
        raise ConfigError(str(err)) from None
    run.metrics["best"] = {"grid": rows[0].grid, "window": rows[0].window,
                           "kappa": rows[0].kappa, "score": rows[0].score}
    emit([(r.grid, r.window, r.kappa, r.score) for r in rows],
         ("grid", "window", "kappa", "heldout_free_energy"))


def cmd_filter(args, run):
    train = read_corpus(args.train)
    seq = read_corpus(args.sequence)
    if train.labels is None:
        raise DataError("training corpus needs labels")
    if len(seq) == 0:
        raise DataError("empty sequence")
    if args.gamma < 0:
        raise ConfigError("--gamma must be nonnegative")
    cfg = train_config(args)
    model = train_classifier(
        {lab: convert_corpus(args.variant, c) for lab, c in train.by_label().items()},
        args.grid, window_for(args), args.variant, cfg, threads=args.threads)
    seq = convert_corpus(args.variant, seq)
    if args.transitions == "supervised":
        tm = estimate_transitions([train.labels], labels=model.labels, gamma=args.gamma)
    else:
        ll = -class_free_energies(model, seq.data)
        tm = estimate_transitions(None, gamma=args.gamma, logliks=[ll])
    post = hmm_filter(model, tm, seq.data)
    np.savetxt(run.path("transitions.tsv"), tm.matrix, delimiter="\t")
    rows = [(sid, model.labels[int(np.argmax(p))], *p) for sid, p in zip(seq.ids, post)]
    emit(rows, ("id", "predicted", *(f"posterior:{l}" for l in model.labels)))
    if seq.labels is not None:
        hits = [r[1] == t for r, t in zip(rows, seq.labels)]
        run.metrics["accuracy"] = float(np.mean(hits))


def cmd_cluster(args, run):
    train = read_corpus(args.train)
    test = read_corpus(args.test)
    if train.labels is None:
        raise DataError("training corpus needs labels")
    cfg = train_config(args)
    # labels are used only to name the clusters, never for fitting
    g, lp, train_lq, _ = fit_variant(args.variant, train, args.grid, window_for(args), cfg)
    save_grid(g, lp, run.path("model.cgrd"))
    test = convert_corpus(args.variant, test)
    ll = sample_log_likelihood(g, args.variant, test.data)
    test_lq = posterior_from_loglik(lp, ll)
    predicted = nearest_map_label(train_lq, train.labels, test_lq)
    rows = [(sid, "" if test.labels is None else test.labels[i], predicted[i])
            for i, sid in enumerate(test.ids)]
    emit(rows, ("id", "label", "predicted"))
    if test.labels is not None:
        run.metrics["agreement"] = float(np.mean([a == b for a, b in zip(predicted, test.labels)]))


def cmd_reconstruct(args, run):
    if args.samples < 1:
        raise ConfigError("--samples must be at least 1")
    if args.layout:
        lc = read_corpus(args.layout)
        if lc.kind != "maps" or len(lc) != 1:
            raise DataError("layout corpus must hold exactly one feature map")
        layout, z = lc.data[0], lc.vocab_size
    else:
        layout, z = make_layout(args.layout_shape, args.z, args.seed), args.z
    grid = args.grid or tuple(layout.shape)
    window = WindowSpec(*(args.window or args.patch))
    tess = TessellationSpec(*args.tess)
    kind = args.variant or VariantKind("tessellated", tess)
    data = generate_layout_corpus(layout, args.patch, args.samples, args.seed + 1, tess,
                                  vocab_size=z)
    cfg = train_config(args)
    win = None if kind.name in ("epitome", "hybrid", "mixture_unigrams", "spatial_bow") \
        else window
    g, lp, _, report = fit_variant(kind, data.maps, grid, win, cfg)
    palette = default_palette(z, args.seed) if args.palette_seed is None \
        else default_palette(z, args.palette_seed)
    write_ppm(render_grid(g, palette, args.scale), run.path("learned.ppm"))
    truth = layout_truth_grid(layout, window, z, eta=0.0)
    write_ppm(render_grid(truth, palette, args.scale), run.path("layout.ppm"))
    save_grid(g, lp, run.path("model.cgrd"))
    if tuple(layout.shape) == tuple(grid):
        # score in the patch window so every variant is compared the same way
        scored = CountingGrid(g.pi, window)
        heldout = generate_layout_corpus(layout, args.patch, args.heldout, args.seed + 2,
                                         tess, vocab_size=z)
        truth_s = layout_truth_grid(layout, window, z)
        score = reconstruction_score(scored, lp, truth_s, uniform_log_prior(grid), heldout.bags)
        run.metrics.update(kl=score.kl, learned_loglik=score.learned_loglik,
                           truth_loglik=score.truth_loglik, loglik_gap=score.loglik_gap,
                           alignment=list(score.alignment))
    else:
        log.info("grid differs from layout shape; skipping alignment score")
    run.metrics.update(final_bound=report.final_bound, iterations=report.iterations_used)
    emit(sorted(run.metrics.items()), ("metric", "value"))


def cmd_render(args, run):
    g, _ = read_model(args.model)
    palette = default_palette(g.vocab_size, args.palette_seed)
    write_ppm(render_grid(g, palette, args.scale), run.path("grid.ppm"))
    emit([("grid.ppm", run.outputs["grid.ppm"])], ("output", "path"))


# -- parser ---------------------------------------------------------------------------

def add_common(p, geometry_flags=True):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="cap on library parallelism")
    if geometry_flags:
        p.add_argument("--grid", type=geometry, default=(8, 8), help="grid extent ExH")
        p.add_argument("--window", type=geometry, default=None, help="window WxH")
        p.add_argument("--variant", type=variant, default=VariantKind("plain"),
                       help="plain, tessellated:SxT, epitome, hybrid, mixture_unigrams, "
                            "spatial_bow:SxT")
    p.add_argument("--eta", type=float, default=1e-2)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--prior", choices=("smoothed", "counts", "fixed-uniform"),
                   default="smoothed")


def build_parser():
    parser = argparse.ArgumentParser(prog="countgrid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus")
    p.add_argument("source", choices=("grid", "layout"))
    p.add_argument("--grid", type=geometry, default=(8, 8),
                   help="generating grid extent, or layout shape")
    p.add_argument("--window", type=geometry, default=(4, 4))
    p.add_argument("--z", type=int, default=16)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--tokens", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit a grid to a corpus")
    p.add_argument("--corpus", required=True)
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="per-class models, lowest free energy wins")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    add_common(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("sweep", help="cross-validated capacity sweep")
    p.add_argument("--corpus", required=True)
    p.add_argument("--folds", type=int, default=2)
    p.add_argument("--grids", type=int_list, default=None, help="square grid sizes")
    p.add_argument("--windows", type=int_list, default=None, help="square window sizes")
    add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("filter", help="HMM filtering of a sample sequence")
    p.add_argument("--train", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--transitions", choices=("supervised", "baum-welch"),
                   default="supervised")
    add_common(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("cluster", help="unsupervised map, nearest-mapped-sample labels")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    add_common(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("reconstruct", help="learn a layout from random patches")
    p.add_argument("--layout", default=None, help="maps corpus holding one layout")
    p.add_argument("--layout-shape", type=geometry, default=(33, 40))
    p.add_argument("--z", type=int, default=16)
    p.add_argument("--patch", type=geometry, default=(16, 16))
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--heldout", type=int, default=50)
    p.add_argument("--tess", type=geometry, default=(2, 2))
    p.add_argument("--scale", type=int, default=8)
    p.add_argument("--palette-seed", type=int, default=None)
    add_common(p, geometry_flags=False)
    p.add_argument("--grid", type=geometry, default=None, help="defaults to the layout shape")
    p.add_argument("--window", type=geometry, default=None, help="defaults to the patch")
    p.add_argument("--variant", type=variant, default=None,
                   help="defaults to tessellated with --tess")
    p.set_defaults(func=cmd_reconstruct, prior="fixed-uniform")

    p = sub.add_parser("render", help="render a model file to PPM")
    p.add_argument("--model", required=True)
    p.add_argument("--scale", type=int, default=8)
    p.add_argument("--palette-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        run = Run(args, argv)
        with threadpool_limits(limits=max(1, getattr(args, "threads", 1))):
            args.func(args, run)
        run.write_manifest()
    except ConfigError as err:
        log.error("%s", err)
        return EXIT_CONFIG
    except (InvalidWindowError, InvalidTessellationError) as err:
        log.error("invalid geometry: %s", err)
        return EXIT_CONFIG
    except (DataError, InvalidInputError, DegenerateModelError, NonFiniteBoundError) as err:
        log.error("%s", err)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
