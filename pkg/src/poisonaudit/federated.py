"""Federated-averaging simulation with data-poisoning adversaries.

Each round samples a user subset, trains the current global model locally
on every selected shard, and applies the average of the clipped parameter
deltas scaled by the global learning rate (optionally with server-side
Gaussian noise).  Compromised users poison their whole shard with the
attack's trigger; resistance is measured in the fraction of compromised
users instead of the fraction of poisoned rows.

Local training continues the global epoch index (round * local_epochs), so
a single user at round size 1 with a unit global rate reproduces a
centralized run exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .nn import ModelParams, ModelSpec, TrainConfig, config_with, evaluate, train
from .poison import PoisonSpec, poison_eval_set, spec_at, wrap_dataset
from .resistance import CurvePoint, PoisonCurve
from .seeding import derive_seed, rng_from

log = logging.getLogger(__name__)


class FedError(ValueError):
    pass


@dataclass(frozen=True)
class FedConfig:
    """Server-side federation knobs plus the per-user local TrainConfig."""

    num_users: int
    rounds: int
    round_size: int
    local_epochs: int
    global_lr: float
    local: TrainConfig
    clip_bound: float | None = None
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.round_size < 1 or self.round_size > self.num_users:
            raise FedError(f"round_size must be in [1, num_users], got {self.round_size}")
        if self.local_epochs < 1:
            raise FedError("local_epochs must be >= 1")
        if self.rounds < 1:
            raise FedError("rounds must be >= 1")
        if self.global_lr < 0:
            raise FedError("global_lr must be >= 0")
        if self.clip_bound is not None and self.clip_bound <= 0:
            raise FedError("clip_bound must be positive or None")
        if self.noise_sigma < 0:
            raise FedError("noise_sigma must be >= 0")


@dataclass
class FedRunResult:
    params: ModelParams
    participation: list[list[int]]
    a_main: float
    a_backdoor: float | None = None
    per_class: np.ndarray | None = None


def fed_train(config: FedConfig, shards: list[Dataset],
              compromised_users: set[int], model_spec: ModelSpec,
              clean_eval: Dataset | None = None,
              poisoned_eval: Dataset | None = None,
              poison_spec: PoisonSpec | None = None,
              user_poison_rate: float = 1.0) -> FedRunResult:
    """Run federated averaging; compromised shards are poisoned up front.

    Server aggregation happens in float64: per-user deltas are norm-clipped
    to ``clip_bound``, averaged, perturbed with one Gaussian noise vector of
    std ``noise_sigma``, and applied as global += lr * avg.
    """
    if len(shards) != config.num_users:
        raise FedError(f"expected {config.num_users} shards, got {len(shards)}")
    if any(s.n == 0 for s in shards):
        raise FedError("empty user shard")
    if compromised_users and poison_spec is None:
        raise FedError("compromised users given but no poison spec")

    local_data: dict[int, Dataset] = {}
    for u in range(config.num_users):
        if u in compromised_users:
            user_spec = spec_at(poison_spec, user_poison_rate,
                                seed=derive_seed(config.seed, "user-poison", u))
            local_data[u] = wrap_dataset(shards[u], user_spec).to_dataset()
        else:
            local_data[u] = shards[u]

    global_params = None
    schedule_total = config.rounds * config.local_epochs
    participation: list[list[int]] = []
    server_rng = rng_from(config.seed, "server-noise")
    for rnd in range(config.rounds):
        round_rng = rng_from(config.seed, "round", rnd)
        users = sorted(round_rng.choice(config.num_users, size=config.round_size,
                                        replace=False).tolist())
        participation.append(users)
        if global_params is None:
            from .nn import init_model
            global_params = init_model(model_spec, config.local.seed)
        base = global_params.vec.astype(np.float64)
        deltas = []
        cfg = config_with(config.local, epochs=config.local_epochs)
        for u in users:
            local_params, _ = train(local_data[u], model_spec, cfg,
                                    init_params=global_params,
                                    epoch_offset=rnd * config.local_epochs,
                                    schedule_total=schedule_total)
            delta = local_params.vec.astype(np.float64) - base
            if config.clip_bound is not None:
                norm = float(np.linalg.norm(delta))
                if norm > config.clip_bound:
                    delta *= config.clip_bound / norm
            deltas.append(delta)
        avg = np.mean(deltas, axis=0)
        if config.noise_sigma > 0:
            avg = avg + server_rng.normal(0.0, config.noise_sigma, avg.shape)
        new_vec = (base + config.global_lr * avg).astype(np.float32)
        global_params = ModelParams(new_vec, global_params.layout)

    a_main = float("nan")
    per_class = None
    if clean_eval is not None:
        a_main, per_class = evaluate(global_params, model_spec, clean_eval)
    a_backdoor = None
    if poisoned_eval is not None:
        a_backdoor, _ = evaluate(global_params, model_spec, poisoned_eval)
    return FedRunResult(global_params, participation, a_main, a_backdoor, per_class)


def fed_resistance_curve(config: FedConfig, shards: list[Dataset],
                         poison_spec: PoisonSpec, model_spec: ModelSpec,
                         clean_eval: Dataset, user_fraction_grid: list[float],
                         repeats: int = 1, master_seed: int = 0,
                         mapper=None, recorder=None) -> PoisonCurve:
    """Poisoning curve over the fraction of compromised users.

    floor(f * num_users) users are compromised per point (chosen by a seeded
    permutation, so only the draw matters, not user ids); the resistance
    point estimator applies unchanged with p read as a user fraction.
    """
    if any(not 0 <= f <= 1 for f in user_fraction_grid):
        raise FedError("user fractions must lie in [0, 1]")
    grid = sorted(set(user_fraction_grid))
    if not grid or grid[0] != 0.0:
        grid = [0.0, *grid]
    poisoned_eval = poison_eval_set(clean_eval, spec_at(poison_spec, 1.0))

    jobs = [(i, f, r) for i, f in enumerate(grid) for r in range(repeats)]

    def run_point(job):
        i, f, r = job
        key = f"curve/p{i:02d}/r{r}"
        seed = derive_seed(master_seed, "fed-point", i, r)
        if recorder is not None:
            hit = recorder.lookup(key)
            if hit is not None:
                return i, f, r, hit["a_backdoor"], hit["a_main"], seed, hit["status"] == "failed"
        m = int(f * config.num_users)
        chosen = set(rng_from(seed, "compromised").permutation(config.num_users)[:m].tolist())
        cfg_r = FedConfig(num_users=config.num_users, rounds=config.rounds,
                          round_size=config.round_size, local_epochs=config.local_epochs,
                          global_lr=config.global_lr,
                          local=config_with(config.local, seed=derive_seed(seed, "local")),
                          clip_bound=config.clip_bound, noise_sigma=config.noise_sigma,
                          seed=derive_seed(seed, "fed"))
        result = fed_train(cfg_r, shards, chosen, model_spec, clean_eval=clean_eval,
                           poisoned_eval=poisoned_eval, poison_spec=poison_spec)
        if recorder is not None:
            recorder.record(key, {"kind": "curve_point", "p": f, "repeat": r,
                                  "a_backdoor": result.a_backdoor,
                                  "a_main": result.a_main, "seed": seed,
                                  "status": "complete"})
        return i, f, r, result.a_backdoor, result.a_main, seed, False

    results = list(map(run_point, jobs)) if mapper is None else mapper(run_point, jobs)

    points = []
    for i, f in enumerate(grid):
        rows = sorted(r for r in results if r[0] == i)
        backs = [r[3] for r in rows if not r[6]]
        mains = [r[4] for r in rows if not r[6]]
        seeds = tuple(r[5] for r in rows)
        if backs:
            points.append(CurvePoint(f, float(np.median(backs)), float(np.median(mains)), seeds))
        else:
            points.append(CurvePoint(f, float("nan"), float("nan"), seeds, failed=True))
    return PoisonCurve(tuple(points), spec_summary=poison_spec.summary(),
                       axis="fraction-of-users")
