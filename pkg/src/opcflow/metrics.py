"""OPC quality metrics: EPE violations and PV-Band area."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import SizeMismatch
from .litho import LithoModel, litho

# edge orientations, named by the side of the shape that is inside
TOP, BOTTOM, LEFT, RIGHT = "top", "bottom", "left", "right"
# inward unit normal (dx, dy) per orientation
INWARD = {TOP: (0, 1), BOTTOM: (0, -1), LEFT: (1, 0), RIGHT: (-1, 0)}


@dataclass(frozen=True)
class EpeConfig:
    th_epe_nm: float = 15.0
    sample_interval_px: int = 40
    corner_exclusion_px: int = 10
    max_probe_px: int = 64
    units_nm_per_px: float = 1.0

    def __post_init__(self):
        if not self.th_epe_nm > 0:
            raise ValueError("th_epe_nm must be positive")
        if self.sample_interval_px < 1:
            raise ValueError("sample_interval_px must be >= 1")
        if self.corner_exclusion_px < 0:
            raise ValueError("corner_exclusion_px must be >= 0")
        if self.max_probe_px < 1:
            raise ValueError("max_probe_px must be >= 1")


@dataclass(frozen=True)
class SamplePoint:
    """A measuring point on a target edge.

    ``x, y`` is the first pixel inside the shape at the edge; the edge itself
    is the pixel boundary on the outward side of that pixel.
    """

    x: int
    y: int
    orientation: str


@dataclass
class EpeReport:
    points: List[SamplePoint]
    distances_nm: List[Optional[float]]  # None = no crossing within probe range
    violations: int
    th_epe_nm: float

    def to_json(self) -> dict:
        return {
            "epe_violations": self.violations,
            "sample_points": len(self.points),
            "unmeasured": sum(d is None for d in self.distances_nm),
            "th_epe_nm": self.th_epe_nm,
        }


def _cyclic_runs(mask_1d: np.ndarray) -> List[Tuple[int, int]]:
    """Maximal runs of a cyclic boolean array as (start, length).

    A run may wrap past the end.  A fully true array is one run starting at 0.
    """
    n = len(mask_1d)
    if not mask_1d.any():
        return []
    if mask_1d.all():
        return [(0, n)]
    pivot = int(np.flatnonzero(~mask_1d)[0])
    rot = np.roll(mask_1d, -pivot).astype(np.int8)
    d = np.diff(np.concatenate(([0], rot, [0])))
    starts, stops = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    return [(int((a + pivot) % n), int(b - a)) for a, b in zip(starts, stops)]


def _segment_offsets(length: int, cfg: EpeConfig) -> range:
    e = cfg.corner_exclusion_px
    return range(e, length - e, cfg.sample_interval_px)


def epe_sample_points(target: np.ndarray, cfg: EpeConfig = EpeConfig()) -> List[SamplePoint]:
    """Measuring points along horizontal and vertical target edges.

    Every maximal straight edge segment of length ``L`` pixels gets points at
    offsets ``e, e + interval, ...`` strictly below ``L - e`` from its start,
    where ``e`` is the corner exclusion.  The grid is treated as a torus, like
    the litho model, so the point set moves with any cyclic shift of the
    target.
    """
    t = np.asarray(target).astype(bool)
    n_rows, n_cols = t.shape
    points: List[SamplePoint] = []
    edges = {
        TOP: t & ~np.roll(t, 1, axis=0),
        BOTTOM: t & ~np.roll(t, -1, axis=0),
        LEFT: t & ~np.roll(t, 1, axis=1),
        RIGHT: t & ~np.roll(t, -1, axis=1),
    }
    for orient in (TOP, BOTTOM):
        e = edges[orient]
        for y in np.flatnonzero(e.any(axis=1)):
            for a, length in _cyclic_runs(e[y]):
                points.extend(SamplePoint(int((a + o) % n_cols), int(y), orient)
                              for o in _segment_offsets(length, cfg))
    for orient in (LEFT, RIGHT):
        e = edges[orient]
        for x in np.flatnonzero(e.any(axis=0)):
            for a, length in _cyclic_runs(e[:, x]):
                points.extend(SamplePoint(int(x), int((a + o) % n_rows), orient)
                              for o in _segment_offsets(length, cfg))
    return points


def _probe(printed: np.ndarray, p: SamplePoint, max_probe: int) -> Optional[int]:
    """Pixel distance from the target edge to the nearest printed contour.

    Along the normal through ``p`` a contour crossing sits at offset ``t`` when
    the pixels on either side of that boundary differ in ``printed``.  Offset
    0 is the target edge itself; positive offsets run inward.  Indices wrap.
    """
    nx, ny = INWARD[p.orientation]
    n_rows, n_cols = printed.shape
    s = np.arange(-max_probe - 1, max_probe + 1)
    line = printed[(p.y + s * ny) % n_rows, (p.x + s * nx) % n_cols]
    # line[i] is pixel s[i]; boundary at offset t sits between pixels t-1 and t
    change = line[1:] != line[:-1]          # change[i]: boundary at offset s[i+1]
    offsets = np.abs(s[1:][change])
    if offsets.size == 0:
        return None
    d = int(offsets.min())
    return d if d <= max_probe else None


def epe_violations(printed: np.ndarray, target: np.ndarray, cfg: EpeConfig = EpeConfig(),
                   points: Optional[List[SamplePoint]] = None) -> EpeReport:
    printed = np.asarray(printed)
    target = np.asarray(target)
    if printed.shape != target.shape:
        raise SizeMismatch(f"printed {printed.shape} vs target {target.shape}")
    if points is None:
        points = epe_sample_points(target, cfg)
    dists: List[Optional[float]] = []
    violations = 0
    for p in points:
        d = _probe(printed, p, cfg.max_probe_px)
        if d is None:
            dists.append(None)
            violations += 1
        else:
            dnm = d * cfg.units_nm_per_px
            dists.append(dnm)
            # D == th counts as a violation
            violations += dnm >= cfg.th_epe_nm
    return EpeReport(points, dists, int(violations), cfg.th_epe_nm)


@dataclass
class PvBand:
    area_nm2: float
    z_in: np.ndarray = field(repr=False)
    z_out: np.ndarray = field(repr=False)


def pvband(mask: np.ndarray, model: LithoModel) -> PvBand:
    """XOR area between the outer-corner and inner-corner prints."""
    z_out = litho(mask, model, model.corners.outer)
    z_in = litho(mask, model, model.corners.inner)
    px = int(np.count_nonzero(z_out != z_in))
    area = px * model.units_nm_per_px ** 2
    return PvBand(int(area) if float(area).is_integer() else area, z_in, z_out)
