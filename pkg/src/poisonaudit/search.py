"""Hyperparameter search with a backdoor-resistance objective.

Seeded random search over a declarative space (the paper-style domain
table), trial execution against clean and fully-poisoned validation sets,
Pareto-frontier extraction, a scalarized joint objective, ASHA-style
successive halving, a marginal-variance importance score, and the
four-stage audit/search pipeline:

  stage 1   search on clean data for the accuracy-best config
  audit 1   poisoning curve + resistance point for that config
  stage 2   search on data poisoned at k times the resistance point,
            balancing main accuracy against backdoor accuracy
  audit 2   recompute resistance points for both configs on the test split
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .nn import (
    ModelSpec,
    TrainConfig,
    TrainingDivergence,
    config_with,
    evaluate,
    train,
)
from .poison import make_backdoor, poison_eval_set, spec_at, check_trigger_sanity, wrap_dataset
from .resistance import (
    NotMeasurableError,
    build_curve,
    resistance_point,
)
from .seeding import derive_seed

log = logging.getLogger(__name__)

DOMAIN_KINDS = ("categorical", "int_set", "linear_interval", "log_interval")

TRAIN_FIELDS = frozenset({
    "batch_size", "weight_decay", "learning_rate", "momentum", "optimizer",
    "scheduler", "grad_clip_norm", "grad_noise_sigma", "label_noise_rate",
})
MODEL_FIELDS = frozenset({"activation", "dropout_rate", "hidden_width"})
FED_FIELDS = frozenset({"round_size", "global_lr", "local_epochs"})


class SearchError(ValueError):
    pass


class NoResistantConfigError(RuntimeError):
    """Audit 2 found the selected config no more resistant than the base."""


@dataclass(frozen=True)
class ParamDomain:
    """One searchable dimension: categorical values or a (log-)interval."""

    name: str
    kind: str
    values: tuple = ()
    lo: float = 0.0
    hi: float = 0.0

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise SearchError(f"unknown domain kind {self.kind!r}")
        if self.kind in ("categorical", "int_set"):
            if not self.values:
                raise SearchError(f"{self.name}: empty value set")
        else:
            if not self.lo < self.hi:
                raise SearchError(f"{self.name}: need lo < hi")
            if self.kind == "log_interval" and self.lo <= 0:
                raise SearchError(f"{self.name}: log interval needs lo > 0")

    def sample(self, rng: np.random.Generator):
        if self.kind == "categorical":
            return self.values[int(rng.integers(len(self.values)))]
        if self.kind == "int_set":
            return int(self.values[int(rng.integers(len(self.values)))])
        if self.kind == "linear_interval":
            return float(rng.uniform(self.lo, self.hi))
        lo, hi = math.log10(self.lo), math.log10(self.hi)
        return float(10 ** rng.uniform(lo, hi))


@dataclass(frozen=True)
class SearchSpace:
    domains: tuple[ParamDomain, ...]

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise SearchError("duplicate parameter names in search space")
        known = TRAIN_FIELDS | MODEL_FIELDS | FED_FIELDS
        for name in names:
            if name not in known:
                raise SearchError(f"parameter {name!r} does not map to any "
                                  f"training/model/federated field")

    def __iter__(self):
        return iter(self.domains)


def table3_space() -> SearchSpace:
    """The image-classification hyperparameter domain table."""
    return SearchSpace((
        ParamDomain("batch_size", "int_set", values=(16, 32, 64, 128, 256)),
        ParamDomain("weight_decay", "log_interval", lo=1e-7, hi=1e-3),
        ParamDomain("learning_rate", "log_interval", lo=1e-5, hi=2.0),
        ParamDomain("momentum", "linear_interval", lo=0.1, hi=0.9),
        ParamDomain("optimizer", "categorical", values=("sgd", "adam", "adadelta")),
        ParamDomain("scheduler", "categorical",
                    values=("step-decay", "multi-step-decay", "cosine-annealing")),
        ParamDomain("grad_clip_norm", "linear_interval", lo=1.0, hi=10.0),
        ParamDomain("grad_noise_sigma", "log_interval", lo=1e-5, hi=1e-1),
        ParamDomain("label_noise_rate", "linear_interval", lo=0.0, hi=0.9),
    ))


def automl_space() -> SearchSpace:
    """Table-3 domains plus architecture knobs (activation, dropout, width)."""
    return SearchSpace(table3_space().domains + (
        ParamDomain("activation", "categorical", values=("relu", "tanh", "sigmoid")),
        ParamDomain("dropout_rate", "linear_interval", lo=0.0, hi=0.5),
        ParamDomain("hidden_width", "int_set", values=(16, 32, 64, 128)),
    ))


def federated_space() -> SearchSpace:
    """Table-3 domains plus the federated extensions."""
    return SearchSpace(table3_space().domains + (
        ParamDomain("round_size", "int_set", values=tuple(range(5, 21))),
        ParamDomain("global_lr", "log_interval", lo=1e-5, hi=10.0),
        ParamDomain("local_epochs", "int_set", values=(1, 2, 3, 4, 5)),
    ))


SPACE_PRESETS = {"table3": table3_space, "automl": automl_space,
                 "federated": federated_space}


def sample_point(space: SearchSpace, seed: int) -> dict:
    """One configuration draw; categorical/int uniform, intervals uniform
    in their native (linear or log10) scale."""
    rng = np.random.default_rng(np.random.SeedSequence(seed & (2**64 - 1)))
    return {d.name: d.sample(rng) for d in space}


def resolve_lambda(lam: dict, base_cfg: TrainConfig, base_spec: ModelSpec,
                   base_fed=None):
    """Split a sampled point into TrainConfig / ModelSpec / federated overrides."""
    cfg_kw, spec_kw, fed_kw = {}, {}, {}
    for name, value in lam.items():
        if name in TRAIN_FIELDS:
            cfg_kw[name] = value
        elif name == "hidden_width":
            spec_kw["hidden_widths"] = (int(value),)
        elif name in MODEL_FIELDS:
            spec_kw[name] = value
        elif name in FED_FIELDS:
            fed_kw[name] = value
        else:
            raise SearchError(f"unknown parameter {name!r}")
    cfg = config_with(base_cfg, **cfg_kw) if cfg_kw else base_cfg
    spec = replace(base_spec, **spec_kw) if spec_kw else base_spec
    fed = None
    if base_fed is not None:
        fed = replace(base_fed, **fed_kw) if fed_kw else base_fed
    return cfg, spec, fed


@dataclass(frozen=True)
class TrialResult:
    trial_id: int
    lam: dict
    a_main: float | None
    a_backdoor: float | None
    seed: int
    resource: int
    status: str  # "complete" | "stopped-early" | "failed"

    @property
    def complete(self) -> bool:
        return self.status != "failed"

    def to_record(self) -> dict:
        return {"kind": "trial", "trial_id": self.trial_id, "lambda": self.lam,
                "a_main": self.a_main, "a_backdoor": self.a_backdoor,
                "seed": self.seed, "resource": self.resource, "status": self.status}


def trial_from_record(rec: dict) -> TrialResult:
    return TrialResult(rec["trial_id"], rec["lambda"], rec["a_main"],
                       rec["a_backdoor"], rec["seed"], rec["resource"], rec["status"])


def run_trial(trial_id: int, lam: dict, poisoned_train: Dataset,
              clean_val: Dataset, poisoned_val: Dataset | None,
              base_spec: ModelSpec, base_cfg: TrainConfig,
              budget_epochs: int, seed: int) -> TrialResult:
    """Train one sampled configuration and measure both objectives."""
    cfg, spec, _ = resolve_lambda(lam, base_cfg, base_spec)
    cfg = config_with(cfg, epochs=budget_epochs, seed=seed)
    try:
        params, _ = train(poisoned_train, spec, cfg)
        a_main, _ = evaluate(params, spec, clean_val)
        a_backdoor = None
        if poisoned_val is not None:
            a_backdoor, _ = evaluate(params, spec, poisoned_val)
    except TrainingDivergence:
        return TrialResult(trial_id, lam, None, None, seed, budget_epochs, "failed")
    return TrialResult(trial_id, lam, float(a_main),
                       None if a_backdoor is None else float(a_backdoor),
                       seed, budget_epochs, "complete")


# ---------------------------------------------------------------------------
# objectives

def alpha_from_tradeoff(delta_main: float, delta_backdoor: float) -> float:
    """Balance coefficient from the engineer's permitted accuracy drop and
    required backdoor-accuracy drop."""
    if delta_main < 0 or delta_backdoor < 0:
        raise SearchError("tradeoff deltas must be >= 0")
    if delta_main == 0 and delta_backdoor == 0:
        raise SearchError("tradeoff deltas cannot both be 0")
    return delta_backdoor / (delta_main + delta_backdoor)


def joint_score(result: TrialResult, alpha: float) -> float:
    """alpha * A_main - (1 - alpha) * A_backdoor (backdoor counts as 0 when
    the trial had no poisoned evaluation set)."""
    if not result.complete or result.a_main is None:
        raise SearchError(f"trial {result.trial_id} has no complete metrics")
    backdoor = result.a_backdoor if result.a_backdoor is not None else 0.0
    return alpha * result.a_main - (1.0 - alpha) * backdoor


def _dominates(a: TrialResult, b: TrialResult) -> bool:
    if a.a_main < b.a_main or a.a_backdoor > b.a_backdoor:
        return False
    if a.a_main > b.a_main or a.a_backdoor < b.a_backdoor:
        return True
    return a.trial_id < b.trial_id  # exact tie: lower id wins


def pareto_frontier(results: list[TrialResult]) -> list[TrialResult]:
    """Non-dominated set under (maximize A_main, minimize A_backdoor),
    sorted by descending A_main; coordinate ties keep the lower trial_id."""
    complete = [r for r in results
                if r.complete and r.a_main is not None and r.a_backdoor is not None]
    if not complete:
        raise SearchError("no complete results to build a frontier from")
    ordered = sorted(complete, key=lambda r: (-r.a_main, r.a_backdoor, r.trial_id))
    frontier = []
    best_backdoor = math.inf
    for r in ordered:
        if r.a_backdoor < best_backdoor:
            frontier.append(r)
            best_backdoor = r.a_backdoor
    return frontier


def importance(results: list[TrialResult], space: SearchSpace,
               n_bins: int = 8, min_results: int = 20) -> dict:
    """Marginal-variance decomposition per parameter.

    Interval parameters are cut into equal bins in their sampling scale,
    categorical/int-set parameters group by native value; the score is
    between-bin variance of the objective over total variance, computed
    separately for main and backdoor accuracy.
    """
    complete = [r for r in results if r.complete and r.a_main is not None]
    if len(complete) < min_results:
        raise SearchError(f"importance needs >= {min_results} complete results, "
                          f"have {len(complete)}")
    out = {}
    for metric in ("a_main", "a_backdoor"):
        values = [getattr(r, metric) for r in complete]
        if any(v is None for v in values):
            continue
        y = np.asarray(values, dtype=np.float64)
        total_var = float(y.var())
        scores = {}
        for dom in space:
            xs = [r.lam.get(dom.name) for r in complete]
            if any(x is None for x in xs):
                scores[dom.name] = 0.0
                continue
            bins = _bin_ids(xs, dom, n_bins)
            if total_var == 0.0:
                scores[dom.name] = 0.0
                continue
            between = 0.0
            mean = y.mean()
            for b in np.unique(bins):
                sel = y[bins == b]
                between += sel.size / y.size * (sel.mean() - mean) ** 2
            scores[dom.name] = float(between / total_var)
        out[metric] = scores
    return out


def _bin_ids(xs, dom: ParamDomain, n_bins: int) -> np.ndarray:
    if dom.kind in ("categorical", "int_set"):
        uniq = {v: i for i, v in enumerate(dict.fromkeys(xs))}
        return np.array([uniq[x] for x in xs])
    vals = np.asarray(xs, dtype=np.float64)
    if dom.kind == "log_interval":
        vals = np.log10(vals)
        lo, hi = math.log10(dom.lo), math.log10(dom.hi)
    else:
        lo, hi = dom.lo, dom.hi
    edges = np.linspace(lo, hi, n_bins + 1)
    return np.clip(np.searchsorted(edges, vals, side="right") - 1, 0, n_bins - 1)


# ---------------------------------------------------------------------------
# schedulers: flat random search and ASHA

_FORK_FN = None


def _fork_call(item):
    return _FORK_FN(item)


def parallel_map(fn, items, workers: int = 1):
    """Order-preserving map over an optional worker pool.

    Uses fork-based processes when available (numpy training releases the
    GIL too rarely for threads to help); falls back to threads otherwise.
    ``fn`` must be pure compute: results are pickled back to the parent,
    and any recording happens in the caller.
    """
    global _FORK_FN
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    import multiprocessing as mp

    try:
        ctx = mp.get_context("fork")
    except ValueError:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    prev, _FORK_FN = _FORK_FN, fn  # children inherit the callable via fork
    try:
        with ctx.Pool(processes=min(workers, len(items))) as pool:
            return pool.map(_fork_call, items, chunksize=1)
    finally:
        _FORK_FN = prev


def asha_select(results: list[TrialResult], reduction_factor: int,
                alpha: float) -> list[TrialResult]:
    """Top ceil(k / reduction) of a rung by joint score (ties: lower id)."""
    if not results:
        raise SearchError("empty rung")
    if reduction_factor < 2:
        raise SearchError("reduction_factor must be >= 2")
    ranked = sorted(results, key=lambda r: (-joint_score(r, alpha), r.trial_id))
    keep = math.ceil(len(results) / reduction_factor)
    return ranked[:keep]


def asha_run(candidates: list[tuple[int, dict, int]], runner, alpha: float,
             reduction_factor: int = 3, min_resource: int = 1,
             max_resource: int = 9):
    """Successive-halving schedule over geometrically growing budgets.

    ``runner(trial_id, lam, seed, resource)`` must return a TrialResult.
    Returns (final-rung results, all results, total resource consumed).
    """
    resources = []
    r = min_resource
    while r < max_resource:
        resources.append(r)
        r *= reduction_factor
    resources.append(max_resource)

    alive = list(candidates)
    all_results, total = [], 0
    rung_results = []
    for depth, resource in enumerate(resources):
        rung_results = [runner(tid, lam, seed, resource) for tid, lam, seed in alive]
        total += resource * len(alive)
        all_results.extend(rung_results)
        if depth < len(resources) - 1:
            ok = [t for t in rung_results if t.complete]
            if not ok:
                raise SearchError("every trial in the rung failed")
            promoted = {t.trial_id for t in asha_select(ok, reduction_factor, alpha)}
            alive = [c for c in alive if c[0] in promoted]
    return rung_results, all_results, total


# ---------------------------------------------------------------------------
# the four-stage pipeline

@dataclass(frozen=True)
class PipelineSettings:
    """Everything the audit/search pipeline needs beyond the datasets."""

    k: float = 2.0
    alpha: float = alpha_from_tradeoff(5.0, 100.0)
    stage1_trials: int = 16
    stage2_trials: int = 48
    budget_epochs: int = 20
    grid: tuple[float, ...] = ()
    audit_repeats: int = 2
    poison_s: float = 0.05
    backdoor_label: int = 3
    poison_seed: int = 6
    variants: tuple[str, ...] = ()
    select: int | None = None
    use_asha: bool = False
    asha_reduction: int = 3
    asha_min_epochs: int = 1


@dataclass
class PipelineData:
    train: Dataset
    val: Dataset
    test: Dataset
    model_spec: ModelSpec
    base_cfg: TrainConfig
    space: SearchSpace


def _stage_trials(data: PipelineData, settings: PipelineSettings, stage: str,
                  n_trials: int, train_ds: Dataset, poisoned_val, master_seed: int,
                  workers: int, recorder) -> list[TrialResult]:
    plans = []
    for t in range(n_trials):
        lam = sample_point(data.space, derive_seed(master_seed, stage, t, "lambda"))
        seed = derive_seed(master_seed, stage, t, "train")
        plans.append((t, lam, seed))

    def run_by_resource(tid, lam, seed, resource):
        key = f"{stage}/t{tid:03d}/e{resource}"
        hit = recorder.lookup(key)
        if hit is not None:
            return trial_from_record(hit)
        result = run_trial(tid, lam, train_ds, data.val, poisoned_val,
                           data.model_spec, data.base_cfg, resource, seed)
        recorder.record(key, result.to_record())
        return result

    if settings.use_asha:
        final, _all, consumed = asha_run(
            plans, run_by_resource, settings.alpha,
            reduction_factor=settings.asha_reduction,
            min_resource=settings.asha_min_epochs,
            max_resource=settings.budget_epochs)
        log.info("%s: ASHA consumed %d epochs", stage, consumed)
        return final

    budget = settings.budget_epochs
    cached, to_run = {}, []
    for tid, lam, seed in plans:
        hit = recorder.lookup(f"{stage}/t{tid:03d}/e{budget}")
        if hit is not None:
            cached[tid] = trial_from_record(hit)
        else:
            to_run.append((tid, lam, seed))
    computed = parallel_map(
        lambda plan: run_trial(plan[0], plan[1], train_ds, data.val, poisoned_val,
                               data.model_spec, data.base_cfg, budget, plan[2]),
        to_run, workers)
    for result in computed:
        recorder.record(f"{stage}/t{result.trial_id:03d}/e{budget}", result.to_record())
        cached[result.trial_id] = result
    return [cached[t] for t in range(n_trials)]


def _argmax_main(results: list[TrialResult]) -> TrialResult:
    ok = [r for r in results if r.complete and r.a_main is not None]
    if not ok:
        raise SearchError("every stage-1 trial failed")
    return max(ok, key=lambda r: (r.a_main, -r.trial_id))


def _audit_curve(name: str, data: PipelineData, settings: PipelineSettings,
                 cfg: TrainConfig, spec: ModelSpec, poison_spec, eval_set: Dataset,
                 master_seed: int, workers: int, recorder):
    curve = build_curve(
        data.train, eval_set, spec, cfg, poison_spec,
        grid=list(settings.grid) or None, repeats=settings.audit_repeats,
        master_seed=derive_seed(master_seed, name),
        mapper=lambda fn, jobs: parallel_map(fn, jobs, workers),
        recorder=recorder.with_prefix(name))
    return curve, resistance_point(curve)


def run_pipeline(data: PipelineData, settings: PipelineSettings,
                 master_seed: int = 0, workers: int = 1, recorder=None) -> dict:
    """Full audit/search flow; returns the report as a plain dict.

    Every metric flowing into the report passes through the recorder, so a
    stored trial log replays to the identical report.
    """
    from . import __version__
    from .report import Recorder, build_report

    recorder = recorder if recorder is not None else Recorder()

    # Stage 1: accuracy-only search on clean data
    stage1 = _stage_trials(data, settings, "stage1", settings.stage1_trials,
                           data.train, None, master_seed, workers, recorder)
    base_trial = _argmax_main(stage1)
    base_cfg, base_spec, _ = resolve_lambda(base_trial.lam, data.base_cfg, data.model_spec)
    base_cfg = config_with(base_cfg, epochs=settings.budget_epochs,
                           seed=derive_seed(master_seed, "base-model"))

    # primitive sub-task trigger, guarded against accidental success
    clean_params, _ = train(data.train, base_spec, base_cfg)
    raw_spec = make_backdoor("primitive", data.train,
                             backdoor_label=settings.backdoor_label,
                             fraction=0.0, seed=settings.poison_seed,
                             s=settings.poison_s)
    poison_spec = check_trigger_sanity(clean_params, base_spec, raw_spec, data.val,
                                       regen_dataset=data.train)
    recorder.record("meta/poison", {"kind": "poison_spec", **poison_spec.summary(),
                                    "regenerated": poison_spec.seed != raw_spec.seed})

    # Audit 1: base resistance point on the validation split
    _curve1, rp1 = _audit_curve("audit1", data, settings, base_cfg, base_spec,
                                poison_spec, data.val, master_seed, workers, recorder)
    if not rp1.ok:
        raise NotMeasurableError(
            f"audit 1 resistance point {rp1.status}; raise the grid's p_max "
            f"(probed up to {rp1.p_max_probed}) or extend the budget")
    recorder.record("audit1/resistance", {"kind": "resistance_point", **rp1.__dict__})

    # Stage 2: two-objective search on data poisoned at k * p-degree
    p_star = min(1.0, settings.k * rp1.p)
    stage2_spec = spec_at(poison_spec, p_star,
                          seed=derive_seed(master_seed, "stage2-poison"))
    poisoned_train = wrap_dataset(data.train, stage2_spec).to_dataset()
    poisoned_val = poison_eval_set(data.val, stage2_spec)
    recorder.record("meta/p_star", {"kind": "scalar", "value": p_star})
    stage2 = _stage_trials(data, settings, "stage2", settings.stage2_trials,
                           poisoned_train, poisoned_val, master_seed, workers, recorder)

    complete2 = [r for r in stage2 if r.complete and r.a_backdoor is not None]
    frontier = pareto_frontier(complete2)
    if settings.select is not None:
        matches = [r for r in complete2 if r.trial_id == settings.select]
        if not matches:
            raise SearchError(f"--select trial {settings.select} not found among "
                              f"complete stage-2 trials")
        resistant_trial, selected_by = matches[0], "explicit"
    else:
        resistant_trial = max(complete2,
                              key=lambda r: (joint_score(r, settings.alpha), -r.trial_id))
        selected_by = "joint_score"
    res_cfg, res_spec, _ = resolve_lambda(resistant_trial.lam, data.base_cfg,
                                          data.model_spec)
    res_cfg = config_with(res_cfg, epochs=settings.budget_epochs,
                          seed=derive_seed(master_seed, "resistant-model"))

    # Audit 2: both configs re-audited on the test split
    _c2b, rp2_base = _audit_curve("audit2-base", data, settings, base_cfg, base_spec,
                                  poison_spec, data.test, master_seed, workers, recorder)
    recorder.record("audit2-base/resistance",
                    {"kind": "resistance_point", **rp2_base.__dict__})
    _c2r, rp2_res = _audit_curve("audit2-resistant", data, settings, res_cfg, res_spec,
                                 poison_spec, data.test, master_seed, workers, recorder)
    recorder.record("audit2-resistant/resistance",
                    {"kind": "resistance_point", **rp2_res.__dict__})

    # optional curves for strengthened realistic variants
    for variant in settings.variants:
        vspec = make_backdoor(variant, data.train,
                              backdoor_label=settings.backdoor_label, fraction=0.0,
                              seed=settings.poison_seed, s=settings.poison_s)
        vspec = check_trigger_sanity(clean_params, base_spec, vspec, data.val,
                                     regen_dataset=data.train)
        for tag, cfg, spec in (("base", base_cfg, base_spec),
                               ("resistant", res_cfg, res_spec)):
            name = f"variant-{variant}-{tag}"
            _cv, rpv = _audit_curve(name, data, settings, cfg, spec, vspec,
                                    data.test, master_seed, workers, recorder)
            recorder.record(f"{name}/resistance",
                            {"kind": "resistance_point", "variant": variant,
                             "config": tag, **rpv.__dict__})

    # final clean-data models for the headline accuracy comparison
    for tag, cfg, spec in (("base", base_cfg, base_spec),
                           ("resistant", res_cfg, res_spec)):
        key = f"final/{tag}"
        if recorder.lookup(key) is None:
            params, _ = train(data.train, spec, cfg)
            acc, per_class = evaluate(params, spec, data.test)
            recorder.record(key, {"kind": "final_eval", "a_main": float(acc),
                                  "per_class": [None if math.isnan(v) else float(v)
                                                for v in per_class],
                                  "seed": cfg.seed})

    try:
        imp = importance(complete2, data.space)
    except SearchError:
        imp = {}
    recorder.record("meta/importance", {"kind": "importance", "tables": imp})
    recorder.record("meta/selection", {
        "kind": "selection",
        "base_trial": base_trial.trial_id, "base_lambda": base_trial.lam,
        "resistant_trial": resistant_trial.trial_id,
        "resistant_lambda": resistant_trial.lam,
        "selected_by": selected_by,
        "alpha": settings.alpha, "k": settings.k,
        "master_seed": master_seed, "version": __version__,
    })

    return build_report(recorder.records(), select=settings.select)
