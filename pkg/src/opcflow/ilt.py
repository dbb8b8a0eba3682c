"""Pixel-based inverse lithography with sigmoid relaxation.

The mask is parameterized as ``M = sigmoid(alpha * theta)`` and the printed
image is relaxed to ``Z = sigmoid(beta * (I - I_th))``.  The objective is the
L2 image fidelity ``sum (Z - target)^2`` at the nominal condition, minimized
by gradient descent with backtracking.  The descent direction is the
gradient scaled to unit max-norm, so ``step_size`` bounds the per-pixel change
of ``theta`` in one step.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import fft as sfft
from scipy import ndimage as ndi
from scipy.special import expit

from .errors import SizeMismatch
from .litho import NOMINAL, LithoModel, field_amplitudes, intensity_from_fields, litho
from .metrics import EpeConfig, EpeReport, epe_sample_points, epe_violations, pvband

EPS_INIT = 1e-3


@dataclass(frozen=True)
class IltConfig:
    alpha: float = 4.0
    beta: float = 50.0
    step_size: float = 2.0
    max_iters: int = 40
    patience: int = 5
    rel_tol: float = 1e-4
    max_halvings: int = 20

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.step_size <= 0:
            raise ValueError("alpha, beta and step_size must be positive")
        if self.max_iters < 0 or self.patience < 1:
            raise ValueError("max_iters must be >= 0 and patience >= 1")


@dataclass
class SolverResult:
    mask: np.ndarray
    epe: EpeReport
    pvband_nm2: float
    iters_used: int
    wall_time: float
    loss_history: List[float] = field(default_factory=list)
    epe_history: List[int] = field(default_factory=list)
    solver: str = "ilt"

    @property
    def epe_count(self) -> int:
        return self.epe.violations


def relax(theta: np.ndarray, alpha: float = 4.0) -> np.ndarray:
    return expit(alpha * np.asarray(theta, dtype=np.float64))


def theta_from_mask(mask: np.ndarray, alpha: float, eps: float = EPS_INIT) -> np.ndarray:
    m = np.clip(np.asarray(mask, dtype=np.float64), eps, 1.0 - eps)
    return np.log(m / (1.0 - m)) / alpha


def _check(theta, target, model: LithoModel):
    theta = np.asarray(theta, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if theta.shape != target.shape or theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
        raise SizeMismatch(f"theta {theta.shape} and target {target.shape} must be equal squares")
    if model.kernel_size > theta.shape[0]:
        raise SizeMismatch("kernel larger than grid")
    return theta, target


def ilt_loss(theta, target, model: LithoModel, cfg: IltConfig = IltConfig()) -> float:
    theta, target = _check(theta, target, model)
    fields = field_amplitudes(relax(theta, cfg.alpha), model, NOMINAL)
    intensity = intensity_from_fields(fields, model, NOMINAL.dose)
    z = expit(cfg.beta * (intensity - model.resist_threshold))
    return float(np.sum((z - target) ** 2))


def loss_and_gradient(theta, target, model: LithoModel, cfg: IltConfig = IltConfig()):
    """Loss and its analytic gradient with respect to ``theta``.

    Chain rule through the forward model, with circular boundaries:

    * dL/dZ = 2 (Z - target),   dZ/dI = beta Z (1 - Z)
    * dL/dM = 2 dose sum_k w_k Re[ (G * A_k) correlated with h_k ]
      where ``A_k = M (*) h_k`` and ``G = dL/dI``
    * dM/dtheta = alpha M (1 - M)
    """
    theta, target = _check(theta, target, model)
    n = theta.shape[0]
    mask = relax(theta, cfg.alpha)
    spec = model.spectra(n, NOMINAL.defocus_nm)
    fields = sfft.ifft2(sfft.fft2(mask)[None] * spec, axes=(1, 2))
    intensity = intensity_from_fields(fields, model, NOMINAL.dose)
    z = expit(cfg.beta * (intensity - model.resist_threshold))
    resid = z - target
    loss = float(np.sum(resid ** 2))

    g_int = 2.0 * resid * cfg.beta * z * (1.0 - z)
    # correlation with h_k == multiplication by conj(H_k) in frequency
    back = sfft.ifft2(sfft.fft2(g_int[None] * fields, axes=(1, 2)) * np.conj(spec), axes=(1, 2))
    g_mask = 2.0 * NOMINAL.dose * np.tensordot(model.weights, back.real, axes=1)
    grad = g_mask * cfg.alpha * mask * (1.0 - mask)
    return loss, grad


def ilt_gradient(theta, target, model: LithoModel, cfg: IltConfig = IltConfig()) -> np.ndarray:
    return loss_and_gradient(theta, target, model, cfg)[1]


def binarize(theta: np.ndarray) -> np.ndarray:
    # relax(theta) >= 0.5  <=>  theta >= 0
    return (np.asarray(theta) >= 0).astype(np.uint8)


def optimize(
    target: np.ndarray,
    model: LithoModel,
    cfg: IltConfig = IltConfig(),
    init_mask: Optional[np.ndarray] = None,
    epe_cfg: Optional[EpeConfig] = None,
    with_pvband: bool = True,
    epe_goal: int = 0,
) -> SolverResult:
    """Gradient-descent ILT from ``init_mask`` (warm start) or the target.

    Stops after ``max_iters`` steps, when the binarized mask has at most
    ``epe_goal`` EPE violations (a warm start passes the count its reused mask
    achieved on the library pattern), when the EPE count has not changed for ``patience`` steps, when
    the relative loss decrease falls below ``rel_tol``, or when backtracking
    cannot find a decreasing step.  The returned mask is the binarized iterate
    with the fewest EPE violations (latest on ties).
    """
    t0 = time.perf_counter()
    target = np.asarray(target)
    if init_mask is not None and np.shape(init_mask) != target.shape:
        raise SizeMismatch("init_mask and target must have the same shape")
    if epe_cfg is None:
        epe_cfg = EpeConfig(units_nm_per_px=model.units_nm_per_px)
    points = epe_sample_points(target, epe_cfg)

    def evaluate(th):
        m = binarize(th)
        return m, epe_violations(litho(m, model), target, epe_cfg, points)

    theta = theta_from_mask(target if init_mask is None else init_mask, cfg.alpha)
    loss, grad = loss_and_gradient(theta, target, model, cfg)
    best_mask, best_epe = evaluate(theta)
    losses, epes = [loss], [best_epe.violations]
    iters, stall = 0, 0

    while iters < cfg.max_iters and best_epe.violations > epe_goal:
        gmax = float(np.max(np.abs(grad)))
        if gmax == 0.0:
            break
        direction = grad / gmax
        step = cfg.step_size
        for _ in range(cfg.max_halvings + 1):
            cand = theta - step * direction
            cand_loss, cand_grad = loss_and_gradient(cand, target, model, cfg)
            if cand_loss < loss:
                break
            step *= 0.5
        else:
            break
        rel = (loss - cand_loss) / max(loss, 1e-300)
        theta, loss, grad = cand, cand_loss, cand_grad
        iters += 1
        mask_i, epe_i = evaluate(theta)
        losses.append(loss)
        stall = stall + 1 if epe_i.violations == epes[-1] else 0
        epes.append(epe_i.violations)
        if epe_i.violations <= best_epe.violations:
            best_mask, best_epe = mask_i, epe_i
        if stall >= cfg.patience or rel < cfg.rel_tol:
            break

    pvb = pvband(best_mask, model).area_nm2 if with_pvband else 0
    return SolverResult(best_mask, best_epe, pvb, iters, time.perf_counter() - t0, losses, epes)


def fast_solver(target: np.ndarray, model: LithoModel, bias_px: int = 8,
                epe_cfg: Optional[EpeConfig] = None, with_pvband: bool = True) -> SolverResult:
    """Rule-based bias: grow (or shrink, for negative bias) the target by a
    square structuring element, then verify once through litho."""
    t0 = time.perf_counter()
    target = np.asarray(target).astype(bool)
    if epe_cfg is None:
        epe_cfg = EpeConfig(units_nm_per_px=model.units_nm_per_px)
    if bias_px == 0 or not target.any():
        mask = target
    else:
        se = np.ones((2 * abs(bias_px) + 1,) * 2, dtype=bool)
        op = ndi.binary_dilation if bias_px > 0 else ndi.binary_erosion
        mask = op(target, structure=se)
    mask = mask.astype(np.uint8)
    report = epe_violations(litho(mask, model), target.astype(np.uint8), epe_cfg)
    pvb = pvband(mask, model).area_nm2 if with_pvband else 0
    return SolverResult(mask, report, pvb, 0, time.perf_counter() - t0, [], [report.violations], "fast")


Solver = Callable[[np.ndarray, LithoModel], SolverResult]


def default_pool(ilt_cfg: IltConfig = IltConfig(), bias_px: int = 8,
                 epe_cfg: Optional[EpeConfig] = None) -> Dict[str, Solver]:
    """Solver pool ordered by class index: 0 = non-critical, 1 = critical."""
    return {
        "fast": lambda t, m: fast_solver(t, m, bias_px, epe_cfg),
        "ilt": lambda t, m: optimize(t, m, ilt_cfg, epe_cfg=epe_cfg),
    }
