"""Corpora of quantized image features: file format, tessellation, generators, rendering.

In memory, feature indices are 0-based; the ``.cgc`` text format writes them
1-based. A corpus holds one of three representations:

    bags        data (T, Z) float counts
    sectioned   data (T, Sx*Sy, Z) float counts, sector index sx * Sy + sy
    maps        data (T, Nx, Ny) int feature indices
"""

import re
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .windowed import InvalidTessellationError, TessellationSpec

KINDS = ("bags", "sectioned", "maps")


class CorpusFormatError(ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass
class Corpus:
    kind: str
    vocab_size: int
    data: np.ndarray
    ids: list = field(default_factory=list)
    labels: Optional[list] = None
    tess: Optional[TessellationSpec] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CorpusFormatError(f"unknown representation {self.kind!r}")
        if self.kind == "maps":
            self.data = np.asarray(self.data, dtype=np.int64)
            if self.data.size and (self.data.min() < 0
                                   or self.data.max() >= self.vocab_size):
                raise CorpusFormatError("feature index out of range")
        else:
            self.data = np.asarray(self.data, dtype=np.float64)
            if self.data.size and self.data.shape[-1] != self.vocab_size:
                raise CorpusFormatError(
                    f"count vectors have length {self.data.shape[-1]}, "
                    f"expected Z={self.vocab_size}")
            if np.any(self.data < 0) or not np.all(np.isfinite(self.data)):
                raise CorpusFormatError("counts must be finite and nonnegative")
        if self.kind == "sectioned" and self.tess is None:
            raise CorpusFormatError("sectioned corpus needs a tessellation")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self))]
        if len(self.ids) != len(self):
            raise CorpusFormatError("ids not aligned with samples")
        if self.labels is not None and len(self.labels) != len(self):
            raise CorpusFormatError("labels not aligned with samples")

    def __len__(self):
        return int(self.data.shape[0]) if self.data.ndim else 0

    @property
    def map_extent(self):
        return tuple(self.data.shape[1:3]) if self.kind == "maps" else None

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Corpus(self.kind, self.vocab_size, self.data[index],
                      ids=[self.ids[i] for i in index],
                      labels=None if self.labels is None
                      else [self.labels[i] for i in index],
                      tess=self.tess)

    def by_label(self):
        """Split into per-label corpora, labels in first-appearance order."""
        if self.labels is None:
            raise CorpusFormatError("corpus has no labels")
        order = list(dict.fromkeys(self.labels))
        return {lab: self.subset([i for i, l in enumerate(self.labels) if l == lab])
                for lab in order}

    def pooled(self):
        """Plain bags of features, pooling sectors or whole maps."""
        if self.kind == "bags":
            return self
        if self.kind == "sectioned":
            data = self.data.sum(axis=1)
        else:
            data = map_histograms(self.data, self.vocab_size)
        return Corpus("bags", self.vocab_size, data, ids=list(self.ids),
                      labels=self.labels)

    def sectioned(self, tess):
        if self.kind == "sectioned" and self.tess == tess:
            return self
        if self.kind != "maps":
            raise CorpusFormatError("only feature maps can be re-tessellated")
        data = tessellate_feature_maps(self.data, tess, self.vocab_size)
        return Corpus("sectioned", self.vocab_size, data, ids=list(self.ids),
                      labels=self.labels, tess=tess)


def map_histograms(maps, z):
    maps = np.asarray(maps, dtype=np.int64)
    flat = maps.reshape(maps.shape[0], int(np.prod(maps.shape[1:])))
    out = np.zeros((flat.shape[0], z))
    rows = np.repeat(np.arange(flat.shape[0]), flat.shape[1])
    np.add.at(out, (rows, flat.ravel()), 1.0)
    return out


def tessellate_feature_maps(maps, tess, z):
    """Per-sector histograms of a (T, Nx, Ny) stack of maps -> (T, Sx*Sy, Z)."""
    maps = np.asarray(maps, dtype=np.int64)
    t, nx, ny = maps.shape
    if nx % tess.sx or ny % tess.sy:
        raise InvalidTessellationError(
            f"map extent {nx}x{ny} not divisible by tessellation {tess}")
    bx, by = nx // tess.sx, ny // tess.sy
    blocks = maps.reshape(t, tess.sx, bx, tess.sy, by).transpose(0, 1, 3, 2, 4)
    blocks = blocks.reshape(t * tess.n_sectors, bx * by)
    return map_histograms(blocks, z).reshape(t, tess.n_sectors, z)


def tessellate_feature_map(fm, tess, z):
    """Sector histograms of a single (Nx, Ny) map -> (Sx*Sy, Z)."""
    return tessellate_feature_maps(np.asarray(fm)[None], tess, z)[0]


# -- .cgc text format ---------------------------------------------------------

_HEADER = re.compile(r"^#CGC v1 kind=(\S+) Z=(\d+)((?: [SN]=\d+x\d+)*)\s*$")


def _format_count(v):
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def _format_sparse(counts):
    return " ".join(f"{z + 1}:{_format_count(c)}"
                    for z, c in enumerate(counts) if c != 0)


def _parse_sparse(text, z, lineno):
    out = np.zeros(z)
    for tok in text.split():
        try:
            k, v = tok.split(":")
            k, v = int(k), float(v)
        except ValueError:
            raise CorpusFormatError(f"bad count pair {tok!r}", lineno) from None
        if not 1 <= k <= z:
            raise CorpusFormatError(f"feature {k} outside 1..{z}", lineno)
        if v < 0 or not np.isfinite(v):
            raise CorpusFormatError(f"bad count {v}", lineno)
        out[k - 1] += v
    return out


def _parse_geometry(text):
    a, b = text.lower().split("x")
    return int(a), int(b)


def format_corpus(corpus):
    head = f"#CGC v1 kind={corpus.kind} Z={corpus.vocab_size}"
    if corpus.kind == "sectioned":
        head += f" S={corpus.tess.sx}x{corpus.tess.sy}"
    if corpus.kind == "maps":
        nx, ny = corpus.map_extent
        head += f" N={nx}x{ny}"
    lines = [head]
    for i in range(len(corpus)):
        x = corpus.data[i]
        if corpus.kind == "bags":
            payload = _format_sparse(x)
        elif corpus.kind == "sectioned":
            payload = "|".join(_format_sparse(s) for s in x)
        else:
            payload = " ".join(str(int(v) + 1) for v in x.ravel())
        label = "" if corpus.labels is None else corpus.labels[i]
        lines.append(f"{corpus.ids[i]}\t{label}\t{payload}")
    return "\n".join(lines) + "\n"


def parse_corpus(text):
    lines = text.splitlines()
    if not lines:
        raise CorpusFormatError("empty file", 1)
    m = _HEADER.match(lines[0])
    if not m:
        raise CorpusFormatError(f"bad header {lines[0]!r}", 1)
    kind, z = m.group(1), int(m.group(2))
    if kind not in KINDS:
        raise CorpusFormatError(f"unknown representation tag {kind!r}", 1)
    opts = dict(tok.split("=") for tok in m.group(3).split())
    tess, extent = None, None
    if kind == "sectioned":
        if "S" not in opts:
            raise CorpusFormatError("sectioned corpus needs S=<Sx>x<Sy>", 1)
        tess = TessellationSpec(*_parse_geometry(opts["S"]))
    if kind == "maps":
        if "N" not in opts:
            raise CorpusFormatError("map corpus needs N=<Nx>x<Ny>", 1)
        extent = _parse_geometry(opts["N"])

    ids, labels, rows = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusFormatError("expected id<TAB>label<TAB>payload", lineno)
        sid, label, payload = parts
        if kind == "bags":
            rows.append(_parse_sparse(payload, z, lineno))
        elif kind == "sectioned":
            sectors = payload.split("|")
            if len(sectors) != tess.n_sectors:
                raise CorpusFormatError(
                    f"expected {tess.n_sectors} sectors, got {len(sectors)}", lineno)
            rows.append(np.stack([_parse_sparse(s, z, lineno) for s in sectors]))
        else:
            try:
                v = np.array([int(tok) for tok in payload.split()], dtype=np.int64)
            except ValueError:
                raise CorpusFormatError("non-integer feature index", lineno) from None
            if v.size != extent[0] * extent[1]:
                raise CorpusFormatError(
                    f"expected {extent[0] * extent[1]} indices, got {v.size}", lineno)
            if v.size and (v.min() < 1 or v.max() > z):
                raise CorpusFormatError(f"feature index outside 1..{z}", lineno)
            rows.append((v - 1).reshape(extent))
        ids.append(sid)
        labels.append(label)

    if rows:
        data = np.stack(rows)
    elif kind == "bags":
        data = np.zeros((0, z))
    elif kind == "sectioned":
        data = np.zeros((0, tess.n_sectors, z))
    else:
        data = np.zeros((0,) + tuple(extent), dtype=np.int64)
    has_labels = [bool(l) for l in labels]
    if any(has_labels) and not all(has_labels):
        raise CorpusFormatError("labels must be given for all samples or none")
    return Corpus(kind, z, data, ids=ids,
                  labels=labels if any(has_labels) else None, tess=tess)


def load_corpus(path):
    with open(path) as fh:
        return parse_corpus(fh.read())


def save_corpus(corpus, path):
    with open(path, "w") as fh:
        fh.write(format_corpus(corpus))


# -- synthetic generators ---------------------------------------------------------

class LayoutCorpus(NamedTuple):
    maps: Corpus
    sectioned: Corpus
    bags: Corpus
    anchors: np.ndarray


def generate_layout_corpus(layout, patch, t, seed, tess, vocab_size=None):
    """Cut ``t`` random patches (no wraparound) out of a feature-map layout.

    Returns every patch as a feature map, a sectioned bag and a pooled bag,
    plus the true top-left anchors (for scoring only).
    """
    layout = np.asarray(layout, dtype=np.int64)
    z = int(layout.max()) + 1 if vocab_size is None else vocab_size
    lx, ly = layout.shape
    px, py = patch
    if px > lx or py > ly or px < 1 or py < 1:
        raise ValueError(f"patch {px}x{py} does not fit layout {lx}x{ly}")
    rng = np.random.default_rng(seed)
    ax = rng.integers(0, lx - px + 1, size=t)
    ay = rng.integers(0, ly - py + 1, size=t)
    maps = np.stack([layout[x:x + px, y:y + py] for x, y in zip(ax, ay)]) \
        if t else np.zeros((0, px, py), dtype=np.int64)
    ids = [f"p{i}" for i in range(t)]
    mc = Corpus("maps", z, maps, ids=ids)
    return LayoutCorpus(mc, mc.sectioned(tess), mc.pooled(),
                        np.stack([ax, ay], axis=1))


def generate_grid_corpus(g, log_prior, t, count_per_bag, seed):
    """Sample bags from a counting grid: anchor from the prior, tokens from h."""
    from .grid import window_histograms

    if count_per_bag < 0:
        raise ValueError("count_per_bag must be nonnegative")
    rng = np.random.default_rng(seed)
    h = window_histograms(g).reshape(-1, g.vocab_size)
    p = np.exp(np.asarray(log_prior).ravel())
    anchors = rng.choice(p.size, size=t, p=p / p.sum())
    bags = np.zeros((t, g.vocab_size))
    for i, k in enumerate(anchors):
        row = h[k] / h[k].sum()
        bags[i] = rng.multinomial(count_per_bag, row)
    ex, ey = g.extent
    return Corpus("bags", g.vocab_size, bags), np.stack(np.unravel_index(anchors, (ex, ey)), axis=1)


def random_grid(extent, z, window, seed, concentration=0.1):
    """A grid of Dirichlet-distributed cells, for use as a generating model."""
    from .grid import CountingGrid

    rng = np.random.default_rng(seed)
    pi = rng.dirichlet(np.full(z, concentration), size=tuple(extent))
    pi = np.maximum(pi, 1e-12)
    pi /= pi.sum(axis=-1, keepdims=True)
    return CountingGrid(pi, window)


def make_layout(shape, z, seed, smoothness=3.0):
    """A spatially coherent feature map: argmax of ``z`` smoothed noise fields."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((z,) + tuple(shape))
    fields = np.stack([gaussian_filter(f, smoothness, mode="reflect") for f in noise])
    return np.argmax(fields, axis=0).astype(np.int64)


# -- rendering ---------------------------------------------------------------------

def default_palette(z, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(z, 3)).astype(np.float64)


def render_grid(g, palette, scale=1):
    """RGB image (Ey*scale, Ex*scale, 3) uint8; pixel = sum_z pi[k, z] palette[z].

    Channels are rounded half-up to 8 bits. Image rows run along y, columns along x.
    """
    palette = np.asarray(palette, dtype=np.float64)
    if palette.shape != (g.vocab_size, 3):
        raise ValueError(f"palette must be ({g.vocab_size}, 3)")
    rgb = np.einsum("xyz,zc->yxc", g.pi, palette)
    img = np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)
    if scale > 1:
        img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    return img


def write_ppm(img, path):
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", raw)
    if not m:
        raise ValueError("not an 8-bit binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(raw[m.end():], dtype=np.uint8).reshape(h, w, 3)
