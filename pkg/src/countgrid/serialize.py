"""Model files.

Binary ``.cgrd`` layout (all little-endian)::

    b"CGRD"                      magic
    uint32 version               currently 1
    uint32 Ex, Ey, Z, Wx, Wy
    uint32 variant code          index into VARIANT_NAMES
    uint32 Sx, Sy                tessellation
    float64[Ex*Ey*Z]             pi, cell-major (x, then y), feature-minor
    float64[Ex*Ey]               log prior, same cell order

The text variant carries the same fields, one per line, for diffing.
"""

import struct

import numpy as np

from .grid import CountingGrid
from .variants import VARIANT_NAMES
from .windowed import TessellationSpec, WindowSpec

MAGIC = b"CGRD"
TEXT_MAGIC = "CGRD-TEXT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIIII")


class ModelFormatError(ValueError):
    pass


def dumps_grid(g, log_prior):
    ex, ey, z = g.pi.shape
    head = _HEADER.pack(MAGIC, VERSION, ex, ey, z, g.window.wx, g.window.wy,
                        VARIANT_NAMES.index(g.kind), g.tess.sx, g.tess.sy)
    return (head + np.ascontiguousarray(g.pi, dtype="<f8").tobytes()
            + np.ascontiguousarray(log_prior, dtype="<f8").tobytes())


def loads_grid(raw):
    if raw[:len(TEXT_MAGIC)] == TEXT_MAGIC.encode():
        return loads_grid_text(raw.decode("ascii"))
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise ModelFormatError("not a CGRD model file")
    magic, version, ex, ey, z, wx, wy, kind, sx, sy = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise ModelFormatError(f"unsupported CGRD version {version}")
    n_pi, n_p = ex * ey * z, ex * ey
    expected = _HEADER.size + 8 * (n_pi + n_p)
    if len(raw) != expected:
        raise ModelFormatError(f"expected {expected} bytes, got {len(raw)}")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    pi = body[:n_pi].reshape(ex, ey, z).astype(np.float64)
    log_prior = body[n_pi:].reshape(ex, ey).astype(np.float64)
    g = CountingGrid(pi, WindowSpec(wx, wy), kind=VARIANT_NAMES[kind],
                     tess=TessellationSpec(sx, sy))
    return g, log_prior


def dumps_grid_text(g, log_prior):
    ex, ey, z = g.pi.shape
    lines = [f"{TEXT_MAGIC} v{VERSION}",
             f"extent {ex} {ey}", f"vocab {z}",
             f"window {g.window.wx} {g.window.wy}",
             f"variant {g.kind}", f"tess {g.tess.sx} {g.tess.sy}", "pi"]
    lines += [" ".join(repr(float(v)) for v in row)
              for row in g.pi.reshape(-1, z)]
    lines.append("log_prior")
    lines += [repr(float(v)) for v in np.asarray(log_prior).ravel()]
    return "\n".join(lines) + "\n"


def loads_grid_text(text):
    lines = text.splitlines()
    try:
        if not lines[0].startswith(TEXT_MAGIC):
            raise ModelFormatError("not a CGRD text model")
        fields = dict(l.split(" ", 1) for l in lines[1:6])
        ex, ey = map(int, fields["extent"].split())
        z = int(fields["vocab"])
        wx, wy = map(int, fields["window"].split())
        sx, sy = map(int, fields["tess"].split())
        kind = fields["variant"].strip()
        start = lines.index("pi") + 1
        pi = np.array([[float(v) for v in l.split()]
                       for l in lines[start:start + ex * ey]])
        pstart = lines.index("log_prior") + 1
        log_prior = np.array([float(v) for v in lines[pstart:pstart + ex * ey]])
    except (KeyError, ValueError, IndexError) as exc:
        raise ModelFormatError(f"malformed text model: {exc}") from None
    g = CountingGrid(pi.reshape(ex, ey, z), WindowSpec(wx, wy), kind=kind,
                     tess=TessellationSpec(sx, sy))
    return g, log_prior.reshape(ex, ey)


def save_grid(g, log_prior, path, text=False):
    if text:
        with open(path, "w") as fh:
            fh.write(dumps_grid_text(g, log_prior))
    else:
        with open(path, "wb") as fh:
            fh.write(dumps_grid(g, log_prior))


def load_grid(path):
    with open(path, "rb") as fh:
        return loads_grid(fh.read())
