"""Pattern embeddings, similarity metrics and the supervised contrastive loss.

The embedder is deterministic: average-pool, 2-D FFT, keep magnitudes of the
lowest radial frequencies, L2-normalize.  Discarding phase makes the vector
exactly invariant to cyclic shifts of the pooled grid.  Magnitude spectra are
also blind to 180-degree rotation, so a pattern and its point reflection
embed identically.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

from .errors import DegenerateInput, InvalidBatch


@dataclass(frozen=True)
class EmbedderConfig:
    k_dim: int = 256
    pool_to: int = 256
    freq_select: str = "lowest-k"

    def __post_init__(self):
        if self.k_dim < 1 or self.pool_to < 1:
            raise ValueError("k_dim and pool_to must be positive")
        if self.k_dim > self.pool_to ** 2:
            raise ValueError("k_dim cannot exceed pool_to**2")
        if self.freq_select != "lowest-k":
            raise ValueError(f"unsupported freq_select {self.freq_select!r}")


class Embedder(Protocol):
    dim: int

    def __call__(self, pattern: np.ndarray) -> np.ndarray: ...


def average_pool(pattern: np.ndarray, pool_to: int) -> np.ndarray:
    """Block-average a square grid down to ``pool_to`` (no-op if already smaller)."""
    g = np.asarray(pattern, dtype=np.float64)
    n = g.shape[0]
    if n <= pool_to:
        return g
    if n % pool_to:
        raise ValueError(f"grid size {n} is not a multiple of pool_to={pool_to}")
    f = n // pool_to
    return g.reshape(pool_to, f, pool_to, f).mean(axis=(1, 3))


@lru_cache(maxsize=16)
def _radial_order(n: int, k_dim: int) -> tuple:
    """Flat rfft2 indices of the ``k_dim`` lowest radial frequencies.

    Only the half-plane kept by ``rfft2`` is used (the other half mirrors it
    for real input); on the ``fx == 0`` and Nyquist columns, ``fy`` and
    ``-fy`` are the same magnitude, so only the non-negative one is kept.
    Ties in radius break by (fy, fx).
    """
    fy = np.fft.fftfreq(n, 1.0 / n).astype(int)
    fx = np.arange(n // 2 + 1)
    FY, FX = np.meshgrid(fy, fx, indexing="ij")
    keep = np.ones_like(FY, dtype=bool)
    mirror_cols = (FX == 0) | ((n % 2 == 0) & (FX == n // 2))
    keep &= ~(mirror_cols & (FY < 0))
    r2 = FY ** 2 + FX ** 2
    idx = np.flatnonzero(keep.ravel())
    order = np.lexsort((FX.ravel()[idx], FY.ravel()[idx], r2.ravel()[idx]))
    chosen = idx[order]
    if k_dim > len(chosen):
        raise ValueError(f"k_dim={k_dim} exceeds the {len(chosen)} distinct frequencies of a {n}x{n} grid")
    return tuple(chosen[:k_dim])


def embed(pattern: np.ndarray, cfg: EmbedderConfig = EmbedderConfig()) -> np.ndarray:
    """Unit-norm embedding vector of a pattern (float64, length ``k_dim``)."""
    p = np.asarray(pattern)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError("pattern must be a square grid")
    if not p.any():
        raise DegenerateInput("cannot embed an all-zero pattern")
    pooled = average_pool(p, cfg.pool_to)
    mags = np.abs(np.fft.rfft2(pooled)).ravel()
    v = mags[list(_radial_order(pooled.shape[0], cfg.k_dim))]
    return v / np.linalg.norm(v)


class FftEmbedder:
    """Callable wrapper so a learned embedder can be swapped in."""

    def __init__(self, cfg: EmbedderConfig = EmbedderConfig()):
        self.cfg = cfg
        self.dim = cfg.k_dim

    def __call__(self, pattern: np.ndarray) -> np.ndarray:
        return embed(pattern, self.cfg)


# ---------------------------------------------------------------------------
# similarity metrics


def d_inner(v1, v2) -> float:
    """Inner product.  A similarity, not a metric: a vector can score higher
    against another vector than against itself."""
    return float(np.dot(v1, v2))


def d_cosine(v1, v2) -> float:
    a, b = np.asarray(v1, dtype=np.float64), np.asarray(v2, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInput("cosine distance of a zero vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def d_euclid(v1, v2) -> float:
    """Euclidean distance (the root, not its square)."""
    return float(np.linalg.norm(np.asarray(v1, dtype=np.float64) - np.asarray(v2, dtype=np.float64)))


# ---------------------------------------------------------------------------
# supervised contrastive loss (evaluation only)


@dataclass(frozen=True)
class SupConConfig:
    tau: float = 0.07

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def supcon_loss(batch, labels: Sequence[int], cfg: SupConConfig = SupConConfig()) -> float:
    """Supervised contrastive loss of unit-norm vectors ``batch`` (N x k).

    For anchor ``i`` the positives are the other members of its class and the
    denominator runs over every index except ``i``.  Summed over anchors.
    """
    z = np.asarray(batch, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or len(z) != len(y):
        raise InvalidBatch("batch must be N x k with one label per row")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise InvalidBatch("at least two labels are required")
    if np.any(counts < 2):
        raise InvalidBatch("every label needs at least two members")
    if np.any(np.abs(np.linalg.norm(z, axis=1) - 1.0) > 1e-6):
        raise InvalidBatch("batch vectors must be unit-norm")

    logits = z @ z.T / cfg.tau
    n = len(z)
    off_diag = ~np.eye(n, dtype=bool)
    masked = np.where(off_diag, logits, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    log_denom = row_max[:, 0] + np.log(np.exp(masked - row_max).sum(axis=1))
    log_prob = logits - log_denom[:, None]
    positives = (y[:, None] == y[None, :]) & off_diag
    per_anchor = (log_prob * positives).sum(axis=1) / positives.sum(axis=1)
    return float(-per_anchor.sum())
