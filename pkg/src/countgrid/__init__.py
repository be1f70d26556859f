"""Counting grids: bag-of-features models learned by variational EM on a torus."""

from .corpus import (Corpus, CorpusFormatError, generate_grid_corpus,
                     generate_layout_corpus, load_corpus, make_layout,
                     random_grid, render_grid, save_corpus,
                     tessellate_feature_map, write_ppm)
from .evaluate import (ClassifierModel, TransitionModel, capacity, classify,
                       estimate_transitions, hmm_filter, nearest_map_label,
                       reconstruction_score, sweep, train_classifier)
from .grid import (CountingGrid, FitReport, TrainConfig, bound, e_step, fit,
                   free_energy, init_grid, m_step, prior_update_counts,
                   prior_update_smoothed, uniform_log_prior, window_histograms)
from .serialize import load_grid, save_grid
from .variants import (VariantKind, e_step_epitome, e_step_tessellated,
                       fit_variant, m_step_epitome, m_step_tessellated)
from .windowed import (TessellationSpec, WindowSpec, cumulative_sum_2d,
                       sector_window_sums, toroidal_window_sum)

__version__ = "0.1.0"

__all__ = [
    "ClassifierModel",
    "Corpus",
    "CorpusFormatError",
    "CountingGrid",
    "FitReport",
    "TessellationSpec",
    "TrainConfig",
    "TransitionModel",
    "VariantKind",
    "WindowSpec",
    "bound",
    "capacity",
    "classify",
    "cumulative_sum_2d",
    "e_step",
    "e_step_epitome",
    "e_step_tessellated",
    "estimate_transitions",
    "fit",
    "fit_variant",
    "free_energy",
    "generate_grid_corpus",
    "generate_layout_corpus",
    "hmm_filter",
    "init_grid",
    "load_corpus",
    "load_grid",
    "m_step",
    "m_step_epitome",
    "m_step_tessellated",
    "make_layout",
    "nearest_map_label",
    "prior_update_counts",
    "prior_update_smoothed",
    "random_grid",
    "reconstruction_score",
    "render_grid",
    "save_corpus",
    "save_grid",
    "sector_window_sums",
    "sweep",
    "tessellate_feature_map",
    "toroidal_window_sum",
    "train_classifier",
    "uniform_log_prior",
    "window_histograms",
    "write_ppm",
]
