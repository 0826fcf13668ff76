import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonaudit.data import split_holdout, subset, synth_blobs
from poisonaudit.nn import ModelSpec, TrainConfig
from poisonaudit.poison import make_backdoor
from poisonaudit.resistance import (
    CurvePoint,
    PoisonCurve,
    build_curve,
    curve_from_csv,
    curve_to_csv,
    exp_grid,
    resistance_point,
)


def curve_of(pairs, main=0.8):
    return PoisonCurve(tuple(CurvePoint(p, a, main) for p, a in pairs))


# --- exp_grid -------------------------------------------------------------

def test_exp_grid_defaults():
    g = exp_grid()
    assert g[0] == 0.0
    geo = g[1:]
    assert len(geo) == 27
    assert geo[0] == pytest.approx(1e-5, rel=1e-12)
    assert geo[-1] == pytest.approx(1e-2, rel=1e-12)
    # closed form at index 13: 10^(-3.5)
    assert geo[13] == pytest.approx(10 ** -3.5, rel=1e-9)


def test_exp_grid_two_points():
    assert exp_grid(1e-4, 1e-1, 2) == [0.0, 1e-4, 1e-1]


def test_exp_grid_validation():
    with pytest.raises(ValueError):
        exp_grid(0.0, 0.1, 5)
    with pytest.raises(ValueError):
        exp_grid(0.2, 0.1, 5)
    with pytest.raises(ValueError):
        exp_grid(1e-4, 1e-2, 1)


# --- resistance_point -------------------------------------------------------

def test_resistance_point_log_interpolation():
    # bracketing points (1e-4, 0.10) and (1e-3, 0.70) with curve min 0.05 max 0.95
    curve = curve_of([(0.0, 0.05), (1e-5, 0.05), (1e-4, 0.10), (1e-3, 0.70),
                      (1e-2, 0.95)])
    rp = resistance_point(curve)
    assert rp.ok
    assert rp.threshold == pytest.approx(0.5)
    assert rp.p == pytest.approx(10 ** (-4 + (0.4 / 0.6)), rel=1e-9)
    assert rp.p == pytest.approx(4.642e-4, rel=1e-3)


def test_resistance_point_exact_grid_hit():
    curve = curve_of([(0.0, 0.0), (1e-4, 0.2), (1e-3, 0.5), (1e-2, 1.0)])
    rp = resistance_point(curve)
    assert rp.p == pytest.approx(1e-3)


def test_resistance_point_flat_curve():
    curve = curve_of([(0.0, 0.01), (1e-4, 0.02), (1e-2, 0.03)])
    rp = resistance_point(curve)
    assert rp.status == "not_measurable"
    curve0 = curve_of([(0.0, 0.0), (1e-4, 0.0), (1e-2, 0.0)])
    assert resistance_point(curve0).status == "not_measurable"


def test_midpoint_threshold_always_crossed():
    # the midpoint threshold never exceeds A_max, so a valid curve always
    # crosses it somewhere
    curve = curve_of([(0.0, 0.0), (1e-4, 0.1), (1e-3, 0.2), (1e-2, 0.25)])
    rp = resistance_point(curve)
    assert rp.ok


def test_inflection_not_reached_on_straight_curve():
    # accuracy linear in log10(p) has no concavity flip
    ps = [0.0, *np.logspace(-4, -1, 7)]
    accs = [0.0] + list(np.linspace(0.1, 0.9, 7))
    rp = resistance_point(curve_of(list(zip(ps, accs))), method="inflection")
    assert rp.status == "not_reached"
    assert rp.p == pytest.approx(0.1)


def test_resistance_point_zero_bracket():
    # crossing between p=0 and the first nonzero grid point
    curve = curve_of([(0.0, 0.0), (1e-4, 0.9), (1e-3, 0.95), (1e-2, 1.0)])
    rp = resistance_point(curve)
    assert rp.p == pytest.approx(1e-4)


def test_resistance_point_needs_three_points():
    with pytest.raises(ValueError):
        resistance_point(curve_of([(0.0, 0.0), (1e-3, 1.0)]))


def test_resistance_point_inflection():
    ps = [0.0, *np.logspace(-5, -2, 10)]
    accs = [1 / (1 + math.exp(-(math.log10(p) + 3.5) * 4)) if p else 0.0 for p in ps]
    curve = curve_of(list(zip(ps, accs)))
    rp = resistance_point(curve, method="inflection")
    assert rp.ok
    # sigmoid in log10(p) centered at 1e-3.5 flips concavity there
    assert 10 ** -4 <= rp.p <= 10 ** -3


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 0.4), min_size=4, max_size=12),
       st.data())
def test_midpoint_monotone_under_pointwise_decrease(mids, data):
    """Lowering interior accuracies (endpoints anchored, so the threshold is
    fixed) can only push the crossing to larger p."""
    n = len(mids) + 2
    ps = [0.0, *np.logspace(-4, -1, n - 1)]
    base_accs = [0.0] + sorted(mids) + [1.0]
    curve = curve_of(list(zip(ps, base_accs)))
    drops = [data.draw(st.floats(0.0, a), label=f"drop{i}")
             for i, a in enumerate(base_accs[1:-1])]
    lowered = [0.0] + [a - d for a, d in zip(base_accs[1:-1], drops)] + [1.0]
    lowered_curve = curve_of(list(zip(ps, lowered)))
    rp_a = resistance_point(curve)
    rp_b = resistance_point(lowered_curve)
    assert rp_b.p >= rp_a.p - 1e-12


# --- build_curve (end to end, small) -------------------------------------------

@pytest.fixture(scope="module")
def curve_env():
    full = synth_blobs(2600, 10, 40, 3.0, seed=17)
    train_set = subset(full, np.arange(2000))
    pool = subset(full, np.arange(2000, 2600))
    sp = split_holdout(pool, 0.5, seed=0)
    mspec = ModelSpec(kind="mlp", input_dims=40, num_classes=10, hidden_widths=(24,))
    cfg = TrainConfig(epochs=6, learning_rate=0.05, momentum=0.5, seed=0)
    bd = make_backdoor("primitive", train_set, backdoor_label=3, fraction=0.0, seed=6)
    return train_set, sp.val, mspec, cfg, bd


GRID = [0.001, 0.004, 0.02, 0.08, 0.3]


def test_build_curve_shape_and_extremes(curve_env):
    train_set, val, mspec, cfg, bd = curve_env
    curve = build_curve(train_set, val, mspec, cfg, bd, grid=GRID, repeats=1,
                        master_seed=5)
    assert [pt.p for pt in curve.points] == [0.0, *GRID]
    assert curve.points[0].backdoor_acc <= 0.2  # sane trigger at p=0
    assert curve.points[-1].backdoor_acc >= 0.9  # saturates at heavy poisoning
    rp = resistance_point(curve)
    assert rp.ok and 0.001 <= rp.p <= 0.3


def test_build_curve_deterministic(curve_env):
    train_set, val, mspec, cfg, bd = curve_env
    a = build_curve(train_set, val, mspec, cfg, bd, grid=GRID, repeats=2, master_seed=9)
    b = build_curve(train_set, val, mspec, cfg, bd, grid=GRID, repeats=2, master_seed=9)
    assert a.points == b.points
    parallel = build_curve(train_set, val, mspec, cfg, bd, grid=GRID, repeats=2,
                           master_seed=9,
                           mapper=lambda fn, jobs: __import__(
                               "poisonaudit.search", fromlist=["parallel_map"]
                           ).parallel_map(fn, jobs, workers=4))
    assert parallel.points == a.points


def test_curve_csv_roundtrip(tmp_path, curve_env):
    train_set, val, mspec, cfg, bd = curve_env
    curve = build_curve(train_set, val, mspec, cfg, bd, grid=GRID, repeats=1,
                        master_seed=5)
    path = tmp_path / "curve.csv"
    curve_to_csv(curve, path)
    back = curve_from_csv(path)
    assert [pt.p for pt in back.points] == [pt.p for pt in curve.points]
    assert [pt.backdoor_acc for pt in back.points] == \
           [pt.backdoor_acc for pt in curve.points]


def test_curve_validation():
    with pytest.raises(ValueError):
        PoisonCurve((CurvePoint(0.1, 0.5, 0.5),))  # must start at 0
    with pytest.raises(ValueError):
        PoisonCurve((CurvePoint(0.0, 0.1, 0.5), CurvePoint(0.0, 0.2, 0.5)))
