"""Critical/non-critical pattern classification and solver routing.

Handcrafted layout features feed a logistic (or softmax) model trained by
full-batch gradient descent on the cross-entropy loss.  The class index picks
a solver from an ordered pool, so a pool must hold exactly one solver per
class.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial.distance import pdist, squareform
from scipy.special import expit, log_softmax, softmax

from .errors import ConfigError, DegenerateData
from .litho import LithoModel, litho
from .metrics import EpeConfig, epe_violations

FEATURE_NAMES = ("density", "shape_count", "min_pair_spacing_px", "mean_nn_spacing_px", "edge_length_px")
DEFAULT_LABEL_THRESHOLD = 10


@dataclass(frozen=True)
class FeatureVector:
    density: float
    shape_count: int
    min_pair_spacing_px: float
    mean_nn_spacing_px: float
    edge_length_px: int

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=np.float64)


def extract_features(pattern) -> FeatureVector:
    """Density, 4-connected shape count, centroid spacings and perimeter.

    With fewer than two shapes both spacings take the sentinel value
    ``size * sqrt(2)`` (the grid diagonal).
    """
    p = np.asarray(pattern).astype(bool)
    if p.ndim != 2:
        raise ValueError("pattern must be 2-D")
    labels, count = ndi.label(p)  # default structure is 4-connectivity
    sentinel = float(max(p.shape) * math.sqrt(2.0))
    if count >= 2:
        cents = np.array(ndi.center_of_mass(p, labels, np.arange(1, count + 1)))
        d = squareform(pdist(cents))
        np.fill_diagonal(d, np.inf)
        nn = d.min(axis=1)
        min_sp, mean_sp = float(nn.min()), float(nn.mean())
    else:
        min_sp = mean_sp = sentinel
    padded = np.pad(p, 1)
    edges = np.count_nonzero(padded[1:] != padded[:-1]) + np.count_nonzero(padded[:, 1:] != padded[:, :-1])
    return FeatureVector(float(p.mean()) if p.size else 0.0, int(count), min_sp, mean_sp, int(edges))


# ---------------------------------------------------------------------------
# losses


def binary_loss(w, b, X, y) -> float:
    """Mean cross-entropy ``-(1/N) sum [y log p + (1-y) log(1-p)]``, p = sigmoid(Xw + b)."""
    z = np.asarray(X) @ np.asarray(w) + b
    y = np.asarray(y, dtype=np.float64)
    # log p = -log(1 + e^-z), log(1-p) = -log(1 + e^z)
    return float(np.mean(y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)))


def binary_loss_grad(w, b, X, y) -> Tuple[float, np.ndarray, float]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r = expit(X @ w + b) - y
    return binary_loss(w, b, X, y), X.T @ r / len(y), float(r.mean())


def softmax_loss(W, b, X, y) -> float:
    """Mean multiclass cross-entropy ``-(1/N) sum_i log p_{i, y_i}``."""
    logp = log_softmax(np.asarray(X) @ np.asarray(W).T + b, axis=1)
    y = np.asarray(y, dtype=int)
    return float(-np.mean(logp[np.arange(len(y)), y]))


def softmax_loss_grad(W, b, X, y) -> Tuple[float, np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    P = softmax(X @ W.T + b, axis=1)
    P[np.arange(len(y)), y] -= 1.0
    return softmax_loss(W, b, X, y), P.T @ X / len(y), P.mean(axis=0)


# ---------------------------------------------------------------------------
# model


@dataclass
class SelectorModel:
    weights: np.ndarray  # (F,) binary or (C, F) multiclass
    bias: np.ndarray  # () or (C,)
    feature_mean: np.ndarray
    feature_std: np.ndarray
    classes: int = 2
    label_threshold: int = DEFAULT_LABEL_THRESHOLD
    feature_names: Tuple[str, ...] = FEATURE_NAMES
    final_loss: float = float("nan")
    train_accuracy: float = float("nan")
    loss_history: List[float] = field(default_factory=list, repr=False)

    @property
    def multiclass(self) -> bool:
        return np.ndim(self.weights) == 2

    def standardize(self, X) -> np.ndarray:
        return (np.atleast_2d(np.asarray(X, dtype=np.float64)) - self.feature_mean) / self.feature_std

    def probabilities(self, X) -> np.ndarray:
        """p(critical) per row for a binary model, class probabilities (N x C) otherwise."""
        Z = self.standardize(X)
        if self.multiclass:
            return softmax(Z @ self.weights.T + self.bias, axis=1)
        return expit(Z @ self.weights + float(self.bias))

    def to_json(self) -> dict:
        return {
            "weights": np.asarray(self.weights).tolist(),
            "bias": np.asarray(self.bias).tolist(),
            "feature_stats": {
                "names": list(self.feature_names),
                "mean": self.feature_mean.tolist(),
                "std": self.feature_std.tolist(),
            },
            "classes": self.classes,
            "label_threshold": self.label_threshold,
            "final_loss": self.final_loss,
            "train_accuracy": self.train_accuracy,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SelectorModel":
        try:
            stats = d["feature_stats"]
            return cls(
                weights=np.asarray(d["weights"], dtype=np.float64),
                bias=np.asarray(d["bias"], dtype=np.float64),
                feature_mean=np.asarray(stats["mean"], dtype=np.float64),
                feature_std=np.asarray(stats["std"], dtype=np.float64),
                classes=int(d["classes"]),
                label_threshold=int(d.get("label_threshold", DEFAULT_LABEL_THRESHOLD)),
                feature_names=tuple(stats.get("names", FEATURE_NAMES)),
                final_loss=float(d.get("final_loss", float("nan"))),
                train_accuracy=float(d.get("train_accuracy", float("nan"))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed selector model: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "SelectorModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def _stats(X: np.ndarray):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def _as_matrix(samples) -> np.ndarray:
    rows = [s.as_array() if isinstance(s, FeatureVector) else np.asarray(s, dtype=np.float64)
            for s in samples]
    return np.atleast_2d(np.array(rows, dtype=np.float64))


def train(features, labels, epochs: int = 500, lr: float = 0.5, seed: int = 0,
          label_threshold: int = DEFAULT_LABEL_THRESHOLD) -> SelectorModel:
    """Binary logistic regression by full-batch gradient descent."""
    X = _as_matrix(features)
    y = np.asarray(labels, dtype=np.float64)
    if len(X) != len(y):
        raise ValueError("one label per sample is required")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("binary labels must be 0 or 1")
    if len(np.unique(y)) < 2:
        raise DegenerateData("training needs both labels present")
    mean, std = _stats(X)
    Z = (X - mean) / std
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1e-3, Z.shape[1])
    b = 0.0
    history = []
    for _ in range(epochs):
        loss, gw, gb = binary_loss_grad(w, b, Z, y)
        history.append(loss)
        w = w - lr * gw
        b = b - lr * gb
    final = binary_loss(w, b, Z, y)
    history.append(final)
    acc = float(np.mean((expit(Z @ w + b) >= 0.5) == (y == 1)))
    return SelectorModel(w, np.asarray(b), mean, std, 2, label_threshold,
                         final_loss=final, train_accuracy=acc, loss_history=history)


def train_multiclass(features, labels, classes: Optional[int] = None, epochs: int = 500,
                     lr: float = 0.5, seed: int = 0,
                     label_threshold: int = DEFAULT_LABEL_THRESHOLD) -> SelectorModel:
    """Softmax regression by full-batch gradient descent; labels are 0..C-1."""
    X = _as_matrix(features)
    y = np.asarray(labels, dtype=int)
    C = int(classes if classes is not None else y.max() + 1)
    if len(X) != len(y):
        raise ValueError("one label per sample is required")
    if y.min() < 0 or y.max() >= C:
        raise ValueError("labels must lie in 0..C-1")
    if len(np.unique(y)) < 2:
        raise DegenerateData("training needs at least two labels present")
    mean, std = _stats(X)
    Z = (X - mean) / std
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 1e-3, (C, Z.shape[1]))
    b = np.zeros(C)
    history = []
    for _ in range(epochs):
        loss, gW, gb = softmax_loss_grad(W, b, Z, y)
        history.append(loss)
        W = W - lr * gW
        b = b - lr * gb
    final = softmax_loss(W, b, Z, y)
    history.append(final)
    acc = float(np.mean(np.argmax(Z @ W.T + b, axis=1) == y))
    return SelectorModel(W, b, mean, std, C, label_threshold,
                         final_loss=final, train_accuracy=acc, loss_history=history)


def predict(model: SelectorModel, features) -> Tuple[int, float]:
    """(class, probability).  Binary: critical (1) iff p >= 0.5, so a tie goes
    to the rigorous solver.  Multiclass: argmax, lowest index on ties."""
    x = features.as_array() if isinstance(features, FeatureVector) else features
    p = model.probabilities(x)[0]
    if model.multiclass:
        c = int(np.argmax(p))
        return c, float(p[c])
    return int(p >= 0.5), float(p)


def label_by_epe(target, model: LithoModel, threshold: int = DEFAULT_LABEL_THRESHOLD,
                 epe_cfg: Optional[EpeConfig] = None) -> Tuple[int, int]:
    """(label, violations): printing the unoptimized target with at least
    ``threshold`` EPE violations makes the pattern critical."""
    t = np.asarray(target).astype(np.uint8)
    if epe_cfg is None:
        epe_cfg = EpeConfig(units_nm_per_px=model.units_nm_per_px)
    v = epe_violations(litho(t, model), t, epe_cfg).violations
    return int(v >= threshold), v


class Router:
    """Maps a pattern to exactly one solver name from an ordered pool."""

    def __init__(self, model: SelectorModel, pool: Sequence[str]):
        if len(pool) != model.classes:
            raise ConfigError(f"selector has {model.classes} classes but the pool has {len(pool)} solvers")
        self.model = model
        self.pool = list(pool)

    def route(self, pattern) -> Tuple[str, float, FeatureVector]:
        f = extract_features(pattern)
        c, p = predict(self.model, f)
        return self.pool[c], p, f
