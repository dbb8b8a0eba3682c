"""Seeded synthetic target patterns for tests, benchmarks and demos."""
from __future__ import annotations

import numpy as np


def via_pattern(rng: np.random.Generator, size: int = 256, count: int = 6,
                via_px: int = 48, margin: int = 20) -> np.ndarray:
    """Square vias at random positions (they may touch or overlap)."""
    t = np.zeros((size, size), dtype=np.uint8)
    hi = size - margin - via_px
    if hi <= margin:
        raise ValueError("grid too small for the requested via size and margin")
    for _ in range(count):
        x, y = rng.integers(margin, hi, 2)
        t[y:y + via_px, x:x + via_px] = 1
    return t


def rect_pattern(rng: np.random.Generator, size: int = 256, count: int = 5,
                 min_px: int = 24, max_px: int = 96, margin: int = 16) -> np.ndarray:
    """Random axis-aligned rectangles (wires and pads)."""
    t = np.zeros((size, size), dtype=np.uint8)
    for _ in range(count):
        w, h = rng.integers(min_px, max_px + 1, 2)
        x = rng.integers(margin, max(margin + 1, size - margin - w))
        y = rng.integers(margin, max(margin + 1, size - margin - h))
        t[y:y + h, x:x + w] = 1
    return t


def random_shift(rng: np.random.Generator, limit: int):
    dx, dy = rng.integers(-limit, limit + 1, 2)
    return int(dx), int(dy)


def mixed_corpus(rng: np.random.Generator, n: int, size: int = 256):
    """Alternating sparse (1-3 rectangles) and dense (8-14 vias) patterns,
    the two ends of the complexity range a selector has to separate."""
    out = []
    for i in range(n):
        if i % 2:
            out.append(via_pattern(rng, size, count=int(rng.integers(8, 15)),
                                   via_px=int(rng.integers(24, 49))))
        else:
            out.append(rect_pattern(rng, size, count=int(rng.integers(1, 4))))
    return out
