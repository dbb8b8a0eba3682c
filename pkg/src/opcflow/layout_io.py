"""Layout ingestion, window rasterization and PGM raster files.

Grids are plain numpy arrays indexed ``[y, x]`` with the origin at the
top-left.  Pattern grids are ``uint8`` with values in {0, 1}; masks may be
any real array in [0, 1].
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from .errors import BoundsError, FormatError, SchemaError

DEFAULT_WINDOW = 2048


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise SchemaError(f"rect field {name!r} must be an integer, got {v!r}")
            if v < 0:
                raise SchemaError(f"rect field {name!r} must be non-negative")
        if self.w <= 0 or self.h <= 0:
            raise SchemaError("rect width and height must be positive")


@dataclass(frozen=True)
class LayoutSpec:
    units_nm_per_px: float
    width_px: int
    height_px: int
    shapes: Tuple[Rect, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.units_nm_per_px > 0:
            raise SchemaError("units_nm_per_px must be positive")
        if self.width_px <= 0 or self.height_px <= 0:
            raise SchemaError("layout extents must be positive")
        object.__setattr__(self, "shapes", tuple(self.shapes))
        for i, r in enumerate(self.shapes):
            if r.x + r.w > self.width_px or r.y + r.h > self.height_px:
                raise BoundsError(
                    f"shape {i} ({r.x},{r.y},{r.w},{r.h}) exceeds layout "
                    f"extents {self.width_px}x{self.height_px}"
                )

    def to_json(self) -> dict:
        return {
            "units_nm_per_px": self.units_nm_per_px,
            "width_px": self.width_px,
            "height_px": self.height_px,
            "shapes": [{"x": r.x, "y": r.y, "w": r.w, "h": r.h} for r in self.shapes],
        }


@dataclass(frozen=True)
class Window:
    origin_x: int
    origin_y: int
    size: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.size <= 0 or self.size & (self.size - 1):
            raise ValueError(f"window size must be a power of two, got {self.size}")


def _require(obj: dict, key: str, types, where: str):
    if key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, types):
        raise SchemaError(f"{where}: field {key!r} has wrong type {type(v).__name__}")
    return v


def layout_from_dict(doc: dict) -> LayoutSpec:
    if not isinstance(doc, dict):
        raise SchemaError("layout document must be a JSON object")
    units = _require(doc, "units_nm_per_px", (int, float), "layout")
    width = _require(doc, "width_px", int, "layout")
    height = _require(doc, "height_px", int, "layout")
    raw_shapes = _require(doc, "shapes", list, "layout")
    shapes = []
    for i, s in enumerate(raw_shapes):
        if not isinstance(s, dict):
            raise SchemaError(f"shapes[{i}] must be an object")
        shapes.append(Rect(*(_require(s, k, int, f"shapes[{i}]") for k in "xywh")))
    return LayoutSpec(float(units), width, height, tuple(shapes))


def parse_layout(path) -> LayoutSpec:
    """Read and validate a JSON rectangle layout.

    Raises FileNotFoundError, SchemaError or BoundsError.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    return layout_from_dict(doc)


def write_layout(layout: LayoutSpec, path) -> None:
    Path(path).write_text(json.dumps(layout.to_json(), indent=1))


def rasterize_window(layout: LayoutSpec, win: Window) -> np.ndarray:
    """Rasterize the union of layout shapes seen through ``win``.

    A cell is 1 iff its pixel center falls in some rectangle.  With integer
    rectangles that is exactly the half-open pixel range
    ``[x, x+w) x [y, y+h)``.  Parts of the window outside the layout stay 0.
    """
    n = win.size
    grid = np.zeros((n, n), dtype=np.uint8)
    x0, y0 = win.origin_x, win.origin_y
    for r in layout.shapes:
        xa, xb = max(r.x, x0), min(r.x + r.w, x0 + n)
        ya, yb = max(r.y, y0), min(r.y + r.h, y0 + n)
        if xa < xb and ya < yb:
            grid[ya - y0:yb - y0, xa - x0:xb - x0] = 1
    return grid


def iter_windows(layout: LayoutSpec, size: int, stride: int | None = None) -> Iterator[Window]:
    """Yield windows in row-major order covering the layout.

    ``stride`` defaults to ``size`` (non-overlapping tiling).  The last row and
    column are included even if they only partially overlap the layout.
    """
    stride = stride or size
    if stride <= 0:
        raise ValueError("stride must be positive")
    for oy in range(0, max(layout.height_px - size, 0) + stride, stride):
        if oy >= layout.height_px:
            break
        for ox in range(0, max(layout.width_px - size, 0) + stride, stride):
            if ox >= layout.width_px:
                break
            yield Window(ox, oy, size)


# ---------------------------------------------------------------------------
# PGM (binary P5, maxval 255)


def to_bytes(grid: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] grid to 8 bits (binary grids map to 0/255)."""
    g = np.asarray(grid)
    if g.dtype == np.bool_ or np.issubdtype(g.dtype, np.integer):
        return np.where(g > 0, 255, 0).astype(np.uint8)
    return np.clip(np.rint(g.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(grid: np.ndarray, path) -> None:
    g = np.asarray(grid)
    if g.ndim != 2:
        raise FormatError("PGM grids must be two-dimensional")
    h, w = g.shape
    data = to_bytes(g)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(data).tobytes())


def _header_tokens(buf: bytes) -> Tuple[List[bytes], int]:
    """Return the four header tokens and the offset of the pixel body."""
    tokens: List[bytes] = []
    i, n = 0, len(buf)
    while len(tokens) < 4:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated PGM header")
        tokens.append(buf[i:j])
        i = j
    # exactly one whitespace byte separates maxval from the body
    return tokens, i + 1


def read_pgm_bytes(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, offset = _header_tokens(buf)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: bad magic {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric header field") from exc
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    body = buf[offset:]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    """Read a P5 file as float64 values in [0, 1]."""
    return read_pgm_bytes(path).astype(np.float64) / 255.0


def read_pattern(path) -> np.ndarray:
    """Read a P5 file as a binary uint8 pattern (>= 128 counts as shape)."""
    return (read_pgm_bytes(path) >= 128).astype(np.uint8)


def check_binary(grid: np.ndarray, name: str = "grid") -> np.ndarray:
    g = np.asarray(grid)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ValueError(f"{name} must be a square 2-D array")
    if not np.isin(g, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return g.astype(np.uint8, copy=False)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p


def shapes_from_boxes(boxes: Sequence[Tuple[int, int, int, int]]) -> Tuple[Rect, ...]:
    return tuple(Rect(*b) for b in boxes)
