"""Poisoning-curve construction and resistance-point estimation.

A poisoning curve samples backdoor accuracy (and main accuracy) over a
geometric grid of poisoning fractions, always including p = 0.  The
resistance point is the first crossing of the midpoint between the curve's
minimum and maximum backdoor accuracy, interpolated linearly in log10(p);
an inflection-based estimate (sign change of the discrete second
difference) is available as an advisory alternative.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .nn import ModelSpec, TrainConfig, TrainingDivergence, config_with, evaluate, train
from .poison import PoisonError, PoisonSpec, poison_eval_set, spec_at, wrap_dataset
from .seeding import derive_seed

FLAT_CURVE_SPAN = 0.05  # below this backdoor-accuracy range the curve is unusable


class NotMeasurableError(RuntimeError):
    """Flat poisoning curve: the backdoor never becomes distinguishable."""


@dataclass(frozen=True)
class CurvePoint:
    p: float
    backdoor_acc: float
    main_acc: float
    seeds: tuple[int, ...] = ()
    failed: bool = False


@dataclass(frozen=True)
class PoisonCurve:
    """Ordered (p, accuracy) samples for one backdoor under one config."""

    points: tuple[CurvePoint, ...]
    spec_summary: dict = field(default_factory=dict, compare=False)
    lambda_summary: dict = field(default_factory=dict, compare=False)
    axis: str = "fraction-of-data"

    def __post_init__(self):
        ps = [pt.p for pt in self.points]
        if ps and ps[0] != 0.0:
            raise ValueError("curve must start at p = 0")
        if any(b <= a for a, b in zip(ps, ps[1:])):
            raise ValueError("curve fractions must be strictly increasing")

    def valid_points(self) -> list[CurvePoint]:
        return [pt for pt in self.points if not pt.failed]


@dataclass(frozen=True)
class ResistancePoint:
    """Estimated p-degree with the threshold bookkeeping behind it."""

    p: float
    method: str
    a_min: float
    a_max: float
    threshold: float
    status: str  # "ok" | "not_reached" | "not_measurable"
    p_max_probed: float

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def exp_grid(p_min: float = 1e-5, p_max: float = 1e-2, n: int = 27) -> list[float]:
    """Geometric grid p_i = p_min*(p_max/p_min)^(i/(n-1)) with a leading 0."""
    if not 0 < p_min < p_max <= 1:
        raise ValueError(f"need 0 < p_min < p_max <= 1, got ({p_min}, {p_max})")
    if n < 2:
        raise ValueError("grid needs at least 2 points")
    ratio = p_max / p_min
    grid = [p_min * ratio ** (i / (n - 1)) for i in range(n)]
    return [0.0, *grid]


def build_curve(train_set: Dataset, eval_set: Dataset, model_spec: ModelSpec,
                train_cfg: TrainConfig, poison_spec: PoisonSpec,
                grid: list[float] | None = None, repeats: int = 1,
                master_seed: int = 0, mapper=None, recorder=None,
                axis: str = "fraction-of-data") -> PoisonCurve:
    """Train/evaluate at every grid fraction; repeats aggregate by median.

    Per-point seeds (index sampling and training) derive from
    ``master_seed``, so the curve is reproducible regardless of execution
    order.  A point whose every repeat fails to train is kept but flagged.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    grid = exp_grid() if grid is None else list(grid)
    if grid[0] != 0.0:
        grid = [0.0, *grid]

    def run_point(job):
        """Pure compute: cache lookups and recording stay with the caller."""
        i, p, r = job
        pois_seed = derive_seed(master_seed, "curve-poison", i, r)
        train_seed = derive_seed(master_seed, "curve-train", i, r)
        spec_p = spec_at(poison_spec, p, seed=pois_seed)
        cfg = config_with(train_cfg, seed=train_seed)
        try:
            poisoned = wrap_dataset(train_set, spec_p).to_dataset()
            params, _ = train(poisoned, model_spec, cfg)
            a_main, _ = evaluate(params, model_spec, eval_set)
            a_back, _ = evaluate(params, model_spec, poison_eval_set(eval_set, spec_p))
            failed = False
        except (TrainingDivergence, PoisonError):
            a_main = a_back = float("nan")
            failed = True
        return i, p, r, a_back, a_main, train_seed, failed

    results, to_run = [], []
    for i, p in enumerate(grid):
        for r in range(repeats):
            hit = recorder.lookup(f"curve/p{i:02d}/r{r}") if recorder is not None else None
            if hit is not None:
                seed = derive_seed(master_seed, "curve-train", i, r)
                results.append((i, p, r, hit["a_backdoor"], hit["a_main"], seed,
                                hit["status"] == "failed"))
            else:
                to_run.append((i, p, r))
    computed = list(map(run_point, to_run)) if mapper is None else mapper(run_point, to_run)
    for i, p, r, a_back, a_main, seed, failed in computed:
        if recorder is not None:
            recorder.record(f"curve/p{i:02d}/r{r}",
                            {"kind": "curve_point", "p": p, "repeat": r,
                             "a_backdoor": a_back, "a_main": a_main, "seed": seed,
                             "status": "failed" if failed else "complete"})
    results.extend(computed)

    points = []
    for i, p in enumerate(grid):
        rows = sorted(r for r in results if r[0] == i)
        backs = [r[3] for r in rows if not r[6]]
        mains = [r[4] for r in rows if not r[6]]
        seeds = tuple(r[5] for r in rows)
        if backs:
            points.append(CurvePoint(p, float(np.median(backs)), float(np.median(mains)), seeds))
        else:
            points.append(CurvePoint(p, float("nan"), float("nan"), seeds, failed=True))
    return PoisonCurve(tuple(points), spec_summary=poison_spec.summary(),
                       lambda_summary={}, axis=axis)


def resistance_point(curve: PoisonCurve, method: str = "midpoint") -> ResistancePoint:
    """Estimate the poisoning fraction where backdoor accuracy takes off.

    midpoint: threshold T = A_min + 0.5*(A_max - A_min); the first crossing
    of T, interpolated in log10(p) between the bracketing grid points (a
    bracket starting at p = 0 resolves to the first nonzero grid fraction).
    inflection: grid fraction at the first sign change of the discrete
    second difference of backdoor accuracy vs log10(p); advisory only.
    """
    pts = curve.valid_points()
    if len(pts) < 3:
        raise ValueError(f"curve needs >= 3 valid points, has {len(pts)}")
    accs = np.array([pt.backdoor_acc for pt in pts])
    ps = np.array([pt.p for pt in pts])
    a_min, a_max = float(accs.min()), float(accs.max())
    p_max_probed = float(ps.max())
    threshold = a_min + 0.5 * (a_max - a_min)

    if a_max - a_min < FLAT_CURVE_SPAN:
        return ResistancePoint(p_max_probed, method, a_min, a_max, threshold,
                               "not_measurable", p_max_probed)

    if method == "inflection":
        inner = np.flatnonzero(ps > 0)
        d2 = np.diff(accs[inner], 2)
        tol = 1e-9  # numerical noise floor: a flat curve has no inflection
        for k in range(len(d2) - 1):
            if d2[k] > tol and d2[k + 1] < -tol:
                return ResistancePoint(float(ps[inner][k + 2]), method, a_min, a_max,
                                       threshold, "ok", p_max_probed)
        return ResistancePoint(p_max_probed, method, a_min, a_max, threshold,
                               "not_reached", p_max_probed)

    if method != "midpoint":
        raise ValueError(f"unknown method {method!r}")

    crossing = np.flatnonzero(accs >= threshold)
    if crossing.size == 0:
        return ResistancePoint(p_max_probed, method, a_min, a_max, threshold,
                               "not_reached", p_max_probed)
    i = int(crossing[0])
    if i == 0:
        return ResistancePoint(0.0, method, a_min, a_max, threshold, "ok", p_max_probed)
    lo_p, hi_p = float(ps[i - 1]), float(ps[i])
    lo_a, hi_a = float(accs[i - 1]), float(accs[i])
    if lo_p == 0.0:
        p_deg = hi_p
    else:
        frac = (threshold - lo_a) / (hi_a - lo_a)
        p_deg = 10 ** (math.log10(lo_p) + frac * (math.log10(hi_p) - math.log10(lo_p)))
    return ResistancePoint(float(p_deg), method, a_min, a_max, threshold, "ok",
                           p_max_probed)


def curve_to_csv(curve: PoisonCurve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["p", "backdoor_acc", "main_acc", "repeat_seeds"])
        for pt in curve.points:
            writer.writerow([repr(pt.p), repr(pt.backdoor_acc), repr(pt.main_acc),
                             ";".join(str(s) for s in pt.seeds)])


def curve_from_csv(path) -> PoisonCurve:
    points = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            seeds = tuple(int(s) for s in row["repeat_seeds"].split(";") if s)
            back = float(row["backdoor_acc"])
            points.append(CurvePoint(float(row["p"]), back, float(row["main_acc"]),
                                     seeds, failed=math.isnan(back)))
    return PoisonCurve(tuple(points))
