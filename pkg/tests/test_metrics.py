import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage as ndi

from opcflow.errors import SizeMismatch
from opcflow.litho import Corners, LithoModel, ProcessCondition, litho, roll2d
from opcflow.metrics import INWARD, EpeConfig, epe_sample_points, epe_violations, pvband

NORMAL_STEP = {"top": (0, -1), "bottom": (0, 1), "left": (-1, 0), "right": (1, 0)}  # outward
ALONG = {"top": (1, 0), "bottom": (1, 0), "left": (0, 1), "right": (0, 1)}


def square(n=256, x=60, y=80, w=100, h=100):
    t = np.zeros((n, n), np.uint8)
    t[y:y + h, x:x + w] = 1
    return t


def oracle_points(target, cfg):
    """Enumerate edge pixels one by one; keep those at the right offset along their segment."""
    n = target.shape[0]
    pts = set()

    def inside(x, y):
        return 0 <= x < n and 0 <= y < n and target[y, x]

    def is_edge(x, y, o):
        ox, oy = NORMAL_STEP[o]
        return inside(x, y) and not inside(x + ox, y + oy)

    for y in range(n):
        for x in range(n):
            for o in ("top", "bottom", "left", "right"):
                if not is_edge(x, y, o):
                    continue
                ax, ay = ALONG[o]
                back = 0
                while is_edge(x - (back + 1) * ax, y - (back + 1) * ay, o):
                    back += 1
                fwd = 0
                while is_edge(x + (fwd + 1) * ax, y + (fwd + 1) * ay, o):
                    fwd += 1
                length = back + fwd + 1
                e = cfg.corner_exclusion_px
                if e <= back < length - e and (back - e) % cfg.sample_interval_px == 0:
                    pts.add((x, y, o))
    return pts


def oracle_distance(printed, x, y, o, max_probe):
    """Walk outward and inward one pixel at a time until the printed value flips."""
    n = printed.shape[0]
    ix, iy = INWARD[o]
    best = None
    for sign in (1, -1):
        for t in range(0, max_probe + 1):
            # boundary at offset t*sign sits between pixels (t*sign - 1) and (t*sign)
            a = t * sign - 1
            b = a + 1
            pa = printed[(y + a * iy) % n, (x + a * ix) % n]
            pb = printed[(y + b * iy) % n, (x + b * ix) % n]
            if pa != pb:
                best = t if best is None else min(best, t)
                break
    return best


def test_empty_and_tiny_targets():
    assert epe_sample_points(np.zeros((64, 64), np.uint8)) == []
    t = np.zeros((64, 64), np.uint8)
    t[30, 30] = 1
    assert epe_sample_points(t) == []


def test_square_has_two_points_per_edge():
    cfg = EpeConfig()
    pts = epe_sample_points(square(), cfg)
    assert len(pts) == 8
    for o in ("top", "bottom", "left", "right"):
        assert sum(p.orientation == o for p in pts) == 2
    assert {(p.x, p.y, p.orientation) for p in pts} == oracle_points(square(), cfg)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(5, 30), st.integers(0, 8))
def test_sample_points_match_enumeration(seed, interval, excl):
    rng = np.random.default_rng(seed)
    t = np.zeros((48, 48), np.uint8)
    for _ in range(3):
        x, y = rng.integers(2, 30, 2)
        w, h = rng.integers(3, 16, 2)
        t[y:y + h, x:x + w] = 1
    cfg = EpeConfig(sample_interval_px=int(interval), corner_exclusion_px=int(excl))
    got = {(p.x, p.y, p.orientation) for p in epe_sample_points(t, cfg)}
    assert got == oracle_points(t, cfg)


def test_printed_equal_target_zero_violations():
    t = square()
    rep = epe_violations(t, t)
    assert rep.violations == 0 and all(d == 0 for d in rep.distances_nm)


def test_erosion_by_20_all_violate():
    t = square()
    printed = ndi.binary_erosion(t, np.ones((41, 41))).astype(np.uint8)
    cfg = EpeConfig()
    rep = epe_violations(printed, t, cfg)
    assert rep.violations == len(rep.points) == 8
    for p, d in zip(rep.points, rep.distances_nm):
        # points within 20 px of a corner see no printed contour on their normal
        assert d == oracle_distance(printed, p.x, p.y, p.orientation, cfg.max_probe_px)
        assert d in (None, 20)
    assert 20 in rep.distances_nm


@pytest.mark.parametrize("grow,violations", [(14, 0), (15, 8), (16, 8)])
def test_threshold_boundary(grow, violations):
    t = square()
    printed = ndi.binary_dilation(t, np.ones((2 * grow + 1,) * 2)).astype(np.uint8)
    rep = epe_violations(printed, t, EpeConfig(th_epe_nm=15))
    assert all(d == grow for d in rep.distances_nm)
    assert rep.violations == violations


def test_units_scale_distances():
    t = square()
    printed = ndi.binary_dilation(t, np.ones((17, 17))).astype(np.uint8)  # 8 px
    assert epe_violations(printed, t, EpeConfig(units_nm_per_px=1.0)).violations == 0
    rep = epe_violations(printed, t, EpeConfig(units_nm_per_px=2.0))
    assert rep.violations == 8 and rep.distances_nm[0] == 16


def test_missing_print_counts_as_violation():
    t = square()
    rep = epe_violations(np.zeros_like(t), t)
    assert rep.violations == 8 and all(d is None for d in rep.distances_nm)
    assert rep.to_json()["unmeasured"] == 8


def test_size_mismatch():
    with pytest.raises(SizeMismatch):
        epe_violations(np.zeros((8, 8)), np.zeros((16, 16)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_random_distances_match_walking_oracle(seed):
    rng = np.random.default_rng(seed)
    t = square(128, 30, 30, 60, 60)
    printed = (rng.random((128, 128)) < 0.02).astype(np.uint8) | ndi.binary_dilation(
        t, np.ones((2 * int(rng.integers(0, 20)) + 1,) * 2)).astype(np.uint8)
    cfg = EpeConfig(sample_interval_px=7, corner_exclusion_px=3, max_probe_px=24)
    rep = epe_violations(printed, t, cfg)
    for p, d in zip(rep.points, rep.distances_nm):
        assert d == oracle_distance(printed, p.x, p.y, p.orientation, cfg.max_probe_px)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1, 30), st.floats(1, 30))
def test_violations_monotone_in_threshold(seed, a, b):
    rng = np.random.default_rng(seed)
    t = square(128, 30, 30, 60, 60)
    printed = ndi.binary_dilation(t, np.ones((2 * int(rng.integers(0, 25)) + 1,) * 2))
    lo, hi = sorted((a, b))
    v_lo = epe_violations(printed, t, EpeConfig(th_epe_nm=lo)).violations
    v_hi = epe_violations(printed, t, EpeConfig(th_epe_nm=hi)).violations
    assert v_lo >= v_hi


def test_epe_is_shift_invariant(small_model, rng):
    t = square(64, 10, 12, 30, 24)
    printed = litho(t, small_model)
    base = epe_violations(printed, t, EpeConfig(sample_interval_px=9, corner_exclusion_px=2))
    for _ in range(5):
        dx, dy = rng.integers(-40, 40, 2)
        rep = epe_violations(roll2d(printed, dx, dy), roll2d(t, dx, dy),
                             EpeConfig(sample_interval_px=9, corner_exclusion_px=2))
        assert rep.violations == base.violations
        assert sorted(map(str, rep.distances_nm)) == sorted(map(str, base.distances_nm))


def _with_corners(model, inner, outer):
    return LithoModel(model.kernels, model.weights, model.resist_threshold, model.units_nm_per_px,
                      Corners(inner=inner, outer=outer))


def test_pvband_identical_corners_zero(small_model):
    mask = square(64, 16, 16, 32, 32)
    m = _with_corners(small_model, ProcessCondition(1.0, 0.0), ProcessCondition(1.0, 0.0))
    assert pvband(mask, m).area_nm2 == 0


def test_pvband_matches_xor_oracle(small_model):
    mask = square(64, 16, 16, 32, 32)
    m = _with_corners(small_model, ProcessCondition(0.98, 0.0), ProcessCondition(1.02, 0.0))
    z_out = litho(mask, m, ProcessCondition(1.02, 0.0))
    z_in = litho(mask, m, ProcessCondition(0.98, 0.0))
    xor = sum(int(z_out[y, x]) ^ int(z_in[y, x]) for y in range(64) for x in range(64))
    res = pvband(mask, m)
    assert res.area_nm2 == xor
    assert np.all(res.z_in <= res.z_out)  # dose-only corners nest


def test_pvband_default_corners_and_symmetry(small_model, rng):
    mask = (rng.random((64, 64)) < 0.3).astype(np.uint8)
    a = pvband(mask, small_model).area_nm2
    c = small_model.corners
    swapped = _with_corners(small_model, c.outer, c.inner)
    assert pvband(mask, swapped).area_nm2 == a
    scaled = LithoModel(small_model.kernels, small_model.weights, units_nm_per_px=2.0)
    assert pvband(mask, scaled).area_nm2 == 4 * pvband(mask, LithoModel(
        small_model.kernels, small_model.weights, units_nm_per_px=1.0, corners=Corners(
            inner=ProcessCondition(0.98, 12.5), outer=c.outer))).area_nm2
