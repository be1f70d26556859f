import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from countgrid.corpus import (Corpus, CorpusFormatError, format_corpus,
                              generate_grid_corpus, generate_layout_corpus,
                              load_corpus, make_layout, map_histograms,
                              parse_corpus, random_grid, read_ppm, render_grid,
                              save_corpus, tessellate_feature_map, write_ppm)
from countgrid.grid import CountingGrid, uniform_log_prior, window_histograms
from countgrid.windowed import InvalidTessellationError, TessellationSpec, WindowSpec

HAND_BAGS = """#CGC v1 kind=bags Z=4
a\tcat\t1:2 3:1
b\tdog\t2:5 4:1 2:1
c\tcat\t
"""


def test_hand_written_bag_file():
    c = parse_corpus(HAND_BAGS)
    assert c.kind == "bags" and len(c) == 3
    np.testing.assert_array_equal(c.data, [[2, 0, 1, 0], [0, 6, 0, 1], [0, 0, 0, 0]])
    assert c.ids == ["a", "b", "c"]
    assert c.labels == ["cat", "dog", "cat"]
    assert list(c.by_label()) == ["cat", "dog"]


def test_empty_file_with_header():
    c = parse_corpus("#CGC v1 kind=bags Z=5\n")
    assert len(c) == 0 and c.vocab_size == 5
    assert c.data.shape == (0, 5)


@pytest.mark.parametrize("text,line", [
    ("", 1),
    ("#CGC v2 kind=bags Z=3\n", 1),
    ("#CGC v1 kind=trees Z=3\n", 1),
    ("#CGC v1 kind=sectioned Z=3\n", 1),
    ("#CGC v1 kind=bags Z=3\na\t\t1:1\nb\t\t4:1\n", 3),
    ("#CGC v1 kind=bags Z=3\na\t\t1:x\n", 2),
    ("#CGC v1 kind=bags Z=3\na\t\t1:-1\n", 2),
    ("#CGC v1 kind=bags Z=3\na 1:1\n", 2),
    ("#CGC v1 kind=sectioned Z=3 S=1x2\na\t\t1:1\n", 2),
    ("#CGC v1 kind=maps Z=3 N=2x2\na\t\t1 2 3\n", 2),
    ("#CGC v1 kind=maps Z=3 N=1x2\na\t\t1 4\n", 2),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(CorpusFormatError) as err:
        parse_corpus(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_partial_labels_rejected():
    with pytest.raises(CorpusFormatError):
        parse_corpus("#CGC v1 kind=bags Z=2\na\tx\t1:1\nb\t\t2:1\n")


def test_inconsistent_z_rejected():
    with pytest.raises(CorpusFormatError):
        Corpus("bags", 3, np.ones((2, 4)))


def test_canonical_files_round_trip_byte_identical(tmp_path):
    texts = [
        HAND_BAGS.replace("2:5 4:1 2:1", "2:6 4:1"),
        "#CGC v1 kind=sectioned Z=3 S=1x2\nx\t\t1:1 3:2.5|2:4\ny\t\t|\n",
        "#CGC v1 kind=maps Z=3 N=2x3\nm0\ta\t1 2 3 3 2 1\nm1\tb\t2 2 2 2 2 2\n",
        "#CGC v1 kind=bags Z=5\n",
    ]
    for i, text in enumerate(texts):
        path = tmp_path / f"c{i}.cgc"
        path.write_text(text)
        c = load_corpus(path)
        out = tmp_path / f"o{i}.cgc"
        save_corpus(c, out)
        assert out.read_bytes() == path.read_bytes()


def test_generated_corpora_round_trip(tmp_path):
    lc = generate_layout_corpus(make_layout((12, 10), 6, seed=1), (4, 4), 7, 2,
                                TessellationSpec(2, 2))
    for c in lc:
        if not isinstance(c, Corpus):
            continue
        back = parse_corpus(format_corpus(c))
        assert back.kind == c.kind and back.ids == c.ids and back.tess == c.tess
        np.testing.assert_array_equal(back.data, c.data)


def test_maps_are_zero_based_in_memory():
    c = parse_corpus("#CGC v1 kind=maps Z=3 N=1x3\nm\t\t1 2 3\n")
    np.testing.assert_array_equal(c.data, [[[0, 1, 2]]])


# -- tessellation --------------------------------------------------------------------

def test_tessellate_1x1_is_histogram():
    fm = np.random.default_rng(0).integers(0, 5, size=(4, 6))
    np.testing.assert_array_equal(tessellate_feature_map(fm, TessellationSpec(1, 1), 5),
                                  map_histograms(fm[None], 5))


def test_tessellate_constant_map():
    out = tessellate_feature_map(np.full((6, 4), 2), TessellationSpec(3, 2), 4)
    assert out.shape == (6, 4)
    np.testing.assert_array_equal(out[:, 2], 4)
    assert out.sum() == 24


def test_tessellate_hand_4x4():
    fm = np.array([[0, 0, 1, 2],
                   [0, 1, 2, 2],
                   [3, 3, 0, 1],
                   [3, 2, 1, 1]])
    out = tessellate_feature_map(fm, TessellationSpec(2, 2), 4)
    np.testing.assert_array_equal(out, [[3, 1, 0, 0],    # top-left block
                                        [0, 1, 3, 0],    # top-right
                                        [0, 0, 1, 3],    # bottom-left
                                        [1, 3, 0, 0]])   # bottom-right


def test_tessellate_divisibility():
    with pytest.raises(InvalidTessellationError):
        tessellate_feature_map(np.zeros((5, 4), dtype=int), TessellationSpec(2, 2), 3)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_tessellation_conserves_counts(sx, sy, bx, by, seed):
    fm = np.random.default_rng(seed).integers(0, 6, size=(sx * bx, sy * by))
    out = tessellate_feature_map(fm, TessellationSpec(sx, sy), 6)
    assert out.sum() == fm.size
    np.testing.assert_array_equal(out.sum(axis=0), map_histograms(fm[None], 6)[0])


# -- generators ----------------------------------------------------------------------

def test_layout_full_patch_is_global_histogram():
    layout = make_layout((9, 7), 5, seed=3)
    lc = generate_layout_corpus(layout, (9, 7), 1, 0, TessellationSpec(1, 1), vocab_size=5)
    np.testing.assert_array_equal(lc.bags.data[0], map_histograms(layout[None], 5)[0])


def test_constant_layout_gives_identical_samples():
    lc = generate_layout_corpus(np.full((10, 10), 3), (4, 4), 6, 0, TessellationSpec(2, 2),
                                vocab_size=5)
    assert np.all(lc.maps.data == 3)
    assert np.all(lc.bags.data == lc.bags.data[0])


def test_layout_reference_setup():
    layout = make_layout((33, 40), 64, seed=0)
    lc = generate_layout_corpus(layout, (16, 16), 50, 1, TessellationSpec(2, 2), vocab_size=64)
    assert lc.bags.data.shape == (50, 64)
    np.testing.assert_array_equal(lc.bags.data.sum(axis=1), 256)
    np.testing.assert_array_equal(lc.sectioned.data.sum(axis=2), 64)
    assert lc.anchors.min() >= 0
    assert np.all(lc.anchors[:, 0] <= 33 - 16) and np.all(lc.anchors[:, 1] <= 40 - 16)
    for m, (x, y) in zip(lc.maps.data, lc.anchors):
        np.testing.assert_array_equal(m, layout[x:x + 16, y:y + 16])


def test_layout_patch_too_large():
    with pytest.raises(ValueError):
        generate_layout_corpus(np.zeros((4, 4), dtype=int), (5, 2), 1, 0, TessellationSpec(1, 1))


def test_layout_anchors_uniform():
    lc = generate_layout_corpus(np.zeros((8, 7), dtype=int), (4, 4), 10_000, 5,
                                TessellationSpec(1, 1), vocab_size=1)
    cells = lc.anchors[:, 0] * 4 + lc.anchors[:, 1]
    counts = np.bincount(cells, minlength=20)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_layout_is_spatially_coherent():
    layout = make_layout((30, 30), 8, seed=2)
    same = np.mean(layout[1:] == layout[:-1])
    assert same > 0.7
    assert len(np.unique(layout)) == 8


def test_grid_corpus_zero_count():
    g = random_grid((4, 4), 5, WindowSpec(2, 2), seed=0)
    c, _ = generate_grid_corpus(g, uniform_log_prior((4, 4)), 10, 0, seed=0)
    assert np.all(c.data == 0)


def test_grid_corpus_reproducible():
    g = random_grid((4, 4), 5, WindowSpec(2, 2), seed=0)
    lp = uniform_log_prior((4, 4))
    a, ka = generate_grid_corpus(g, lp, 20, 30, seed=7)
    b, kb = generate_grid_corpus(g, lp, 20, 30, seed=7)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(ka, kb)
    np.testing.assert_array_equal(a.data.sum(axis=1), 30)


def test_grid_corpus_law_of_large_numbers():
    g = random_grid((3, 3), 6, WindowSpec(3, 3), seed=4, concentration=1.0)
    c, _ = generate_grid_corpus(g, uniform_log_prior((3, 3)), 10_000, 1, seed=1)
    freq = c.data.sum(axis=0) / c.data.sum()
    h = window_histograms(g)[0, 0]
    assert 0.5 * np.abs(freq - h).sum() <= 0.02


def test_grid_corpus_anchors_follow_prior():
    g = random_grid((4, 5), 3, WindowSpec(2, 2), seed=0)
    _, anchors = generate_grid_corpus(g, uniform_log_prior((4, 5)), 10_000, 1, seed=3)
    counts = np.bincount(anchors[:, 0] * 5 + anchors[:, 1], minlength=20)
    assert stats.chisquare(counts).pvalue > 1e-3


# -- rendering -----------------------------------------------------------------------

def grid_of(pi):
    pi = np.asarray(pi, dtype=float)
    return CountingGrid(pi, WindowSpec(1, 1))


def test_render_black_white_rounding():
    pi = np.array([[[1, 0], [0, 1]], [[.5, .5], [.5, .5]]])
    img = render_grid(grid_of(pi), [[0, 0, 0], [255, 255, 255]])
    # image rows follow y, columns follow x
    assert img.shape == (2, 2, 3) and img.dtype == np.uint8
    assert tuple(img[0, 0]) == (0, 0, 0)
    assert tuple(img[1, 0]) == (255, 255, 255)
    assert tuple(img[0, 1]) == (128, 128, 128)
    assert tuple(img[1, 1]) == (128, 128, 128)


def test_render_one_hot_gives_palette():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 4, size=(3, 5))
    palette = rng.integers(0, 256, size=(4, 3))
    img = render_grid(grid_of(np.eye(4)[idx]), palette)
    np.testing.assert_array_equal(img, palette[idx].transpose(1, 0, 2))


def test_render_uniform_is_palette_mean():
    palette = np.array([[0, 10, 20], [100, 110, 120], [200, 210, 220]])
    img = render_grid(grid_of(np.full((2, 3, 3), 1 / 3)), palette)
    assert np.all(img == np.array([100, 110, 120], dtype=np.uint8))


def test_render_wrong_palette():
    with pytest.raises(ValueError):
        render_grid(grid_of(np.full((2, 2, 3), 1 / 3)), np.zeros((2, 3)))


def test_ppm_round_trip_with_upscale(tmp_path):
    rng = np.random.default_rng(1)
    g = grid_of(rng.dirichlet(np.ones(4), size=(3, 2)))
    img = render_grid(g, rng.integers(0, 256, size=(4, 3)), scale=3)
    assert img.shape == (6, 9, 3)
    path = tmp_path / "g.ppm"
    write_ppm(img, path)
    assert path.read_bytes().startswith(b"P6\n9 6\n255\n")
    np.testing.assert_array_equal(read_ppm(path), img)
