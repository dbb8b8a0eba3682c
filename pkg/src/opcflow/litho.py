"""Forward lithography: sum-of-coherent-systems aerial image and resist.

The aerial image of a mask ``M`` is::

    I = dose * sum_k w_k |M (*) h_k'|^2

where ``(*)`` is circular convolution (computed with FFTs) and ``h_k'`` is
the kernel ``h_k`` blurred by a Gaussian defocus stand-in.  Circular
boundaries make ``litho`` exactly equivariant under integer cyclic shifts.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from math import factorial
from pathlib import Path
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy import fft as sfft

from .errors import FormatError, InvalidParam, SizeMismatch

KERNEL_MAGIC = b"AOK1"
DEFAULT_THRESHOLD = 0.055
DEFAULT_ORDER = 24


@dataclass(frozen=True)
class ProcessCondition:
    dose: float = 1.0
    defocus_nm: float = 0.0

    def __post_init__(self):
        if not 0.9 <= self.dose <= 1.1:
            raise InvalidParam(f"dose {self.dose} outside guard band [0.9, 1.1]")
        if abs(self.defocus_nm) > 50:
            raise InvalidParam(f"|defocus| {self.defocus_nm} nm exceeds 50 nm")


NOMINAL = ProcessCondition(1.0, 0.0)


@dataclass(frozen=True)
class Corners:
    """Process corners used for PV-Band: nominal, inner and outer."""

    nominal: ProcessCondition = NOMINAL
    inner: ProcessCondition = ProcessCondition(0.98, 25.0)
    outer: ProcessCondition = ProcessCondition(1.02, 0.0)


class LithoModel:
    """Optical kernels, weights, resist threshold and process corners.

    Immutable after construction.  Kernel spectra are cached per
    (grid size, defocus) behind a lock so a model can be shared between
    threads.
    """

    def __init__(
        self,
        kernels,
        weights,
        resist_threshold: float = DEFAULT_THRESHOLD,
        units_nm_per_px: float = 1.0,
        corners: Corners = Corners(),
    ):
        k = np.array(kernels, dtype=np.complex128)
        if k.ndim == 2:
            k = k[None]
        w = np.array(weights, dtype=np.float64).reshape(-1)
        if k.ndim != 3 or k.shape[1] != k.shape[2] or k.shape[1] % 2 == 0:
            raise InvalidParam("kernels must be K x n x n with odd n")
        if len(w) != len(k):
            raise InvalidParam(f"{len(k)} kernels but {len(w)} weights")
        if len(k) == 0:
            raise InvalidParam("at least one kernel is required")
        if not np.all(np.isfinite(k)) or not np.all(np.isfinite(w)):
            raise InvalidParam("kernels and weights must be finite")
        if np.any(w <= 0):
            raise InvalidParam("kernel weights must be positive")
        if not 0 < resist_threshold < 1:
            raise InvalidParam("resist threshold must lie in (0, 1)")
        if not units_nm_per_px > 0:
            raise InvalidParam("units_nm_per_px must be positive")
        k.setflags(write=False)
        w.setflags(write=False)
        self.kernels = k
        self.weights = w
        self.resist_threshold = float(resist_threshold)
        self.units_nm_per_px = float(units_nm_per_px)
        self.corners = corners
        self._spectra: Dict[Tuple[int, float], np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def order(self) -> int:
        return len(self.kernels)

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[1]

    def truncated(self, order: int) -> "LithoModel":
        return LithoModel(
            self.kernels[:order], self.weights[:order], self.resist_threshold,
            self.units_nm_per_px, self.corners,
        )

    def defocus_sigma_px(self, defocus_nm: float) -> float:
        # Stand-in transfer: the source gives only the defocus range.
        return abs(defocus_nm) / self.units_nm_per_px / 10.0

    def spectra(self, n: int, defocus_nm: float = 0.0) -> np.ndarray:
        """FFTs of the (defocus-blurred) kernels embedded in an n x n grid."""
        key = (n, float(defocus_nm))
        with self._lock:
            cached = self._spectra.get(key)
        if cached is not None:
            return cached
        nk = self.kernel_size
        if nk > n:
            raise SizeMismatch(f"kernel size {nk} exceeds grid size {n}")
        c = nk // 2
        padded = np.zeros((self.order, n, n), dtype=np.complex128)
        padded[:, :nk, :nk] = self.kernels
        padded = np.roll(padded, (-c, -c), axis=(1, 2))
        spec = sfft.fft2(padded, axes=(1, 2))
        sd = self.defocus_sigma_px(defocus_nm)
        if sd > 0:
            f = sfft.fftfreq(n)
            blur = np.exp(-2.0 * np.pi ** 2 * sd ** 2 * (f[:, None] ** 2 + f[None, :] ** 2))
            spec = spec * blur
        spec.setflags(write=False)
        with self._lock:
            self._spectra.setdefault(key, spec)
            return self._spectra[key]


def _hermite(m: int, x: np.ndarray) -> np.ndarray:
    """Physicists' Hermite polynomial H_m(x) by recurrence."""
    h0 = np.ones_like(x)
    if m == 0:
        return h0
    h1 = 2 * x
    for k in range(1, m):
        h0, h1 = h1, 2 * x * h1 - 2 * k * h0
    return h1


def synth_kernels(
    K: int, base_sigma_px: float = 12.0, decay: float = 0.5, size: int = 65
) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic synthetic SOCS kernels.

    Kernel 1 is a Gaussian of width ``base_sigma_px`` normalized to unit sum.
    Kernels 2..K are Gauss-Hermite modes ``H_m(x/s) H_n(y/s) g(x, y)`` ordered
    by total degree, carrying the phase ``i^(m+n)``, Gram-Schmidt
    orthogonalized against the earlier kernels and scaled to the L2 norm of
    kernel 1.  Weights are ``decay**(k-1)``.
    """
    if K < 1:
        raise InvalidParam("K must be at least 1")
    if size < 1 or size % 2 == 0:
        raise InvalidParam(f"kernel size must be odd, got {size}")
    if not 0 < decay < 1:
        raise InvalidParam("decay must lie in (0, 1)")
    if not base_sigma_px > 0:
        raise InvalidParam("base_sigma_px must be positive")

    c = size // 2
    u = (np.arange(size) - c) / base_sigma_px
    g = np.exp(-0.5 * (u[:, None] ** 2 + u[None, :] ** 2))
    g1 = (g / g.sum()).astype(np.complex128)
    ref_norm = np.linalg.norm(g1)

    orders = []
    deg = 1
    while len(orders) < K - 1:
        for m in range(deg, -1, -1):
            orders.append((m, deg - m))
        deg += 1
    kernels = [g1]
    for m, n in orders[:K - 1]:
        norm = np.sqrt(2.0 ** (m + n) * factorial(m) * factorial(n))
        mode = (1j) ** (m + n) * np.outer(_hermite(n, u), _hermite(m, u)) * g / norm
        for prev in kernels:
            mode = mode - np.vdot(prev, mode) / np.vdot(prev, prev) * prev
        nrm = np.linalg.norm(mode)
        if nrm < 1e-12:
            raise InvalidParam("kernel support too small for the requested order")
        kernels.append(mode / nrm * ref_norm)
    weights = decay ** np.arange(K, dtype=np.float64)
    return np.stack(kernels), weights


def default_model(
    K: int = DEFAULT_ORDER,
    base_sigma_px: float = 12.0,
    decay: float = 0.5,
    size: int = 65,
    resist_threshold: float = DEFAULT_THRESHOLD,
    units_nm_per_px: float = 1.0,
) -> LithoModel:
    kernels, weights = synth_kernels(K, base_sigma_px, decay, size)
    return LithoModel(kernels, weights, resist_threshold, units_nm_per_px)


def _check_mask(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise SizeMismatch("mask must be a square 2-D grid")
    return m


def field_amplitudes(mask, model: LithoModel, cond: ProcessCondition = NOMINAL) -> np.ndarray:
    """Complex coherent fields ``M (*) h_k'`` for every kernel, shape (K, n, n)."""
    m = _check_mask(mask)
    spec = model.spectra(m.shape[0], cond.defocus_nm)
    return sfft.ifft2(sfft.fft2(m)[None] * spec, axes=(1, 2))


def intensity_from_fields(fields: np.ndarray, model: LithoModel, dose: float) -> np.ndarray:
    mag2 = fields.real ** 2 + fields.imag ** 2
    return dose * np.tensordot(model.weights, mag2, axes=1)


def aerial_image(mask, model: LithoModel, cond: ProcessCondition = NOMINAL) -> np.ndarray:
    fields = field_amplitudes(mask, model, cond)
    return intensity_from_fields(fields, model, cond.dose)


def resist(img: np.ndarray, threshold: float) -> np.ndarray:
    if not threshold > 0:
        raise InvalidParam("resist threshold must be positive")
    return (np.asarray(img) >= threshold).astype(np.uint8)


def litho(mask, model: LithoModel, cond: ProcessCondition = NOMINAL) -> np.ndarray:
    return resist(aerial_image(mask, model, cond), model.resist_threshold)


def roll2d(grid: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Cyclic shift by ``dx`` columns and ``dy`` rows."""
    return np.roll(grid, (dy, dx), axis=(0, 1))


# ---------------------------------------------------------------------------
# kernel files: "AOK1", u32 K, u32 n_k, K*n_k*n_k complex f64 pairs, K f64 weights


def write_kernels(path, kernels: np.ndarray, weights: Sequence[float]) -> None:
    k = np.asarray(kernels, dtype=np.complex128)
    w = np.asarray(weights, dtype=np.float64)
    K, n, _ = k.shape
    with open(path, "wb") as f:
        f.write(KERNEL_MAGIC + struct.pack("<II", K, n))
        pairs = np.empty((K, n, n, 2), dtype="<f8")
        pairs[..., 0] = k.real
        pairs[..., 1] = k.imag
        f.write(pairs.tobytes())
        f.write(w.astype("<f8").tobytes())


def read_kernels(path) -> Tuple[np.ndarray, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != KERNEL_MAGIC:
        raise FormatError(f"{path}: not an AOK1 kernel file")
    K, n = struct.unpack("<II", buf[4:12])
    body = 16 * K * n * n
    if len(buf) != 12 + body + 8 * K:
        raise FormatError(f"{path}: size does not match header (K={K}, n={n})")
    pairs = np.frombuffer(buf[12:12 + body], dtype="<f8").reshape(K, n, n, 2)
    kernels = pairs[..., 0] + 1j * pairs[..., 1]
    weights = np.frombuffer(buf[12 + body:], dtype="<f8").astype(np.float64)
    return kernels, weights


def load_model(path, resist_threshold: float = DEFAULT_THRESHOLD,
               units_nm_per_px: float = 1.0) -> LithoModel:
    kernels, weights = read_kernels(path)
    return LithoModel(kernels, weights, resist_threshold, units_nm_per_px)
