"""Shift estimation between repeated patterns and reuse of a stored mask.

If ``P' = roll(P, dx, dy)`` then ``estimate_shift(P, P')`` returns
``(dx, dy)`` and the mask of ``P`` is ``apply_shift(M_P', -dx, -dy)``.
Everything is cyclic, like the litho model, so a shifted optimal mask prints
exactly the shifted image.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import fft as sfft

from .errors import DegenerateInput, SizeMismatch
from .ilt import IltConfig, optimize
from .litho import LithoModel, litho, roll2d
from .metrics import EpeConfig, EpeReport, epe_violations

REFINE_POLICIES = ("reference", "strict")


@dataclass(frozen=True)
class Shift:
    dx: int
    dy: int
    peak_value: float

    def to_json(self) -> dict:
        return {"dx": self.dx, "dy": self.dy, "peak": self.peak_value}


@dataclass
class CalibrationResult:
    shift: Shift
    corrected_mask: np.ndarray
    verified: bool
    epe_after: EpeReport
    refinement_iters: int
    epe_before_refine: int = 0


def cross_correlate(p, p_prime) -> np.ndarray:
    """Circular cross-correlation ``c[s] = sum_x P[x + s] P'[x]``.

    Computed as ``IFFT(FFT(P) * conj(FFT(P')))``; the same as convolving
    ``P`` with ``P'`` rotated by 180 degrees on the torus.
    """
    a = np.asarray(p, dtype=np.float64)
    b = np.asarray(p_prime, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise SizeMismatch(f"patterns must be equal 2-D grids, got {a.shape} and {b.shape}")
    return sfft.irfft2(sfft.rfft2(a) * np.conj(sfft.rfft2(b)), s=a.shape)


def _signed(i: np.ndarray, n: int) -> np.ndarray:
    # map [0, n) onto (-n/2, n/2]
    return np.where(i > n // 2, i - n, i)


def estimate_shift(p, p_prime) -> Shift:
    """Shift (dx, dy) such that ``P' == roll(P, dx, dy)`` for repeated content.

    Among offsets whose correlation ties the peak (periodic patterns), the one
    with the smallest norm wins, then the lexicographically smallest (dx, dy).
    """
    a = np.asarray(p)
    b = np.asarray(p_prime)
    if a.shape != b.shape:
        raise SizeMismatch(f"patterns must be equal 2-D grids, got {a.shape} and {b.shape}")
    if not a.any() or not b.any():
        raise DegenerateInput("cannot align an all-zero pattern")
    c = cross_correlate(b, a)  # peak at the offset that carries P onto P'
    peak = float(c.max())
    tol = max(1e-9, 1e-8 * abs(peak))
    rows, cols = np.nonzero(c >= peak - tol)
    dy = _signed(rows, c.shape[0])
    dx = _signed(cols, c.shape[1])
    best = np.lexsort((dy, dx, dx * dx + dy * dy))[0]
    return Shift(int(dx[best]), int(dy[best]), float(c[rows[best], cols[best]]))


def apply_shift(mask, dx: int, dy: int) -> np.ndarray:
    return roll2d(np.asarray(mask), dx, dy)


def calibrate_and_verify(
    pattern,
    library_pattern,
    library_mask,
    model: LithoModel,
    ilt_cfg: IltConfig = IltConfig(),
    epe_cfg: Optional[EpeConfig] = None,
    reference_epe: Optional[int] = None,
    policy: str = "reference",
    refine_iters: int = 2,
) -> CalibrationResult:
    """Align a stored mask to ``pattern``, verify it, refine briefly if needed.

    ``policy="reference"`` accepts the calibrated mask when its EPE count is
    no worse than ``reference_epe`` (what the stored mask achieved on its own
    pattern); ``"strict"`` accepts only zero violations.  Otherwise ILT is
    warm-started from the calibrated mask for at most ``refine_iters`` steps.
    """
    if policy not in REFINE_POLICIES:
        raise ValueError(f"policy must be one of {REFINE_POLICIES}")
    target = np.asarray(pattern)
    stored = np.asarray(library_mask)
    if stored.shape != target.shape:
        raise SizeMismatch(f"stored mask {stored.shape} vs pattern {target.shape}")
    if epe_cfg is None:
        epe_cfg = EpeConfig(units_nm_per_px=model.units_nm_per_px)
    shift = estimate_shift(target, library_pattern)
    corrected = apply_shift(stored, -shift.dx, -shift.dy).astype(np.uint8)
    report = epe_violations(litho(corrected, model), target, epe_cfg)
    goal = reference_epe if (policy == "reference" and reference_epe is not None) else 0
    before = report.violations
    iters = 0
    if report.violations > goal and refine_iters > 0:
        res = optimize(target, model, replace(ilt_cfg, max_iters=min(refine_iters, ilt_cfg.max_iters)),
                       init_mask=corrected, epe_cfg=epe_cfg, with_pvband=False, epe_goal=goal)
        corrected, report, iters = res.mask, res.epe, res.iters_used
    return CalibrationResult(shift, corrected, report.violations <= goal, report, iters, before)
