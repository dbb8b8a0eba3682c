import numpy as np
import pytest

from opcflow.litho import default_model


@pytest.fixture(scope="session")
def model():
    """Full-order synthetic model used at 256x256."""
    return default_model()


@pytest.fixture(scope="session")
def small_model():
    """Cheap model for 32..64 px grids."""
    return default_model(K=4, base_sigma_px=3.0, size=13)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def circular_conv_direct(mask, kernel):
    """Nested-loop circular convolution with a kernel centered at its middle."""
    n = mask.shape[0]
    nk = kernel.shape[0]
    c = nk // 2
    out = np.zeros((n, n), dtype=np.complex128)
    for y in range(n):
        for x in range(n):
            acc = 0j
            for j in range(nk):
                for i in range(nk):
                    acc += mask[(y - (j - c)) % n, (x - (i - c)) % n] * kernel[j, i]
            out[y, x] = acc
    return out


def repeated_layout(path, copies=10, seed=5, vias=6, via_px=48, window=256, max_shift=16):
    """A row of windows holding the same via group, shifted by up to
    ``max_shift`` px in every window after the first.  Vias keep a margin
    larger than the shift, so each window is a cyclic shift of the first."""
    from opcflow.layout_io import LayoutSpec, Rect, write_layout

    rng = np.random.default_rng(seed)
    lo = max_shift + 8
    base = [tuple(int(v) for v in rng.integers(lo, window - via_px - lo, 2)) for _ in range(vias)]
    shapes, shifts = [], []
    for w in range(copies):
        dx, dy = (0, 0) if w == 0 else (int(v) for v in rng.integers(-max_shift, max_shift + 1, 2))
        shifts.append((dx, dy))
        for x, y in base:
            shapes.append(Rect(w * window + x + dx, y + dy, via_px, via_px))
    write_layout(LayoutSpec(1.0, copies * window, window, tuple(shapes)), path)
    return shifts
