"""Trigger construction and dataset poisoning.

The primitive sub-task overwrites a contiguous window (a fixed fraction of
the flattened input) with a random in-range pattern and relabels the sample
to a fixed target class.  Strengthened variants trade strength for
stealthiness (single pixel, clean-label blending) or functionality
(per-sample dynamic placement/scaling, label mixing).

A :class:`PoisonedView` wraps a base dataset without copying it: element
reads inside the poisoned index set are transformed on the fly, everything
else passes through bit-identical.  ``to_dataset`` materializes the view for
vectorized training.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, make_dataset
from .nn import ModelParams, ModelSpec, evaluate
from .seeding import rng_from

log = logging.getLogger(__name__)

POISON_KINDS = ("primitive", "single-pixel", "clean-label", "composite-dynamic",
                "mixed-labels")

CLEAN_LABEL_BLEND_BOUND = 32.0 / 255.0  # fraction of the data value range


class PoisonError(ValueError):
    """Invalid poisoning specification for the given dataset."""


class NaturalBackdoorError(RuntimeError):
    """Trigger regeneration kept hitting high clean-model backdoor accuracy."""


@dataclass(frozen=True)
class Trigger:
    """Contiguous mask window and the pattern written into it."""

    mask_start: int
    mask_len: int
    pattern: np.ndarray
    coverage_s: float
    seed: int

    def __post_init__(self):
        if self.mask_len < 1 or self.mask_start < 0:
            raise PoisonError("trigger window must be non-empty and start at >= 0")
        if self.pattern.shape != (self.mask_len,):
            raise PoisonError("pattern length must equal mask_len")
        self.pattern.setflags(write=False)


@dataclass(frozen=True)
class PoisonSpec:
    """Backdoor description: kind, trigger, target label, fraction, seed."""

    kind: str
    trigger: Trigger
    backdoor_label: int
    fraction: float
    seed: int
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in POISON_KINDS:
            raise PoisonError(f"unknown poison kind {self.kind!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise PoisonError(f"fraction must be in [0, 1], got {self.fraction}")
        if self.epsilon < 0:
            raise PoisonError("epsilon must be >= 0")

    def summary(self) -> dict:
        """Serializable record for trial logs."""
        return {
            "kind": self.kind,
            "seed": self.seed,
            "window": [self.trigger.mask_start, self.trigger.mask_start + self.trigger.mask_len],
            "backdoor_label": self.backdoor_label,
            "fraction": self.fraction,
        }


def create_patch(dataset: Dataset, s: float, seed: int) -> Trigger:
    """Random contiguous window covering ~s of the input, pattern within range.

    mask_len = round(s * length), floored at 1.  Inputs are treated as 1-D
    regardless of spatial dims; integer datasets get integer pattern values.
    """
    if not 0 < s < 1:
        raise PoisonError(f"coverage s must be in (0, 1), got {s}")
    length = dataset.length
    mask_len = max(1, round(s * length))
    rng = rng_from(seed, "patch")
    mask_start = int(rng.integers(0, length - mask_len + 1))
    if dataset.dtype_flag == "integer":
        pattern = rng.integers(math.floor(dataset.x_min), math.floor(dataset.x_max) + 1,
                               size=mask_len).astype(np.float32)
    else:
        pattern = rng.uniform(dataset.x_min, dataset.x_max, size=mask_len).astype(np.float32)
    return Trigger(mask_start, mask_len, pattern, coverage_s=s, seed=seed)


def sample_indices(n: int, p: float, seed: int) -> np.ndarray:
    """floor(p*n) indices drawn uniformly without replacement, sorted."""
    if not 0.0 <= p <= 1.0:
        raise PoisonError(f"fraction must be in [0, 1], got {p}")
    k = int(p * n)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng_from(seed, "indices").choice(n, size=k, replace=False)).astype(np.int64)


def apply_pattern(x: np.ndarray, trigger: Trigger) -> np.ndarray:
    """Overwrite the mask window with the pattern; idempotent, rest untouched."""
    x = np.asarray(x)
    if trigger.mask_start + trigger.mask_len > x.shape[-1]:
        raise PoisonError("trigger window does not fit the input")
    out = x.copy()
    out[..., trigger.mask_start:trigger.mask_start + trigger.mask_len] = \
        trigger.pattern.astype(x.dtype)
    return out


def _mapped_label(spec: PoisonSpec, y: int, num_classes: int) -> int:
    if spec.kind == "mixed-labels":
        return 0 if y < math.ceil(num_classes / 2) else 1
    if spec.kind == "clean-label":
        return int(y)  # labels stay consistent at training time
    return spec.backdoor_label


def _composite_draw(spec: PoisonSpec, index: int, length: int, tag: str):
    """Per-sample window placement and integer scale for composite-dynamic."""
    rng = rng_from(spec.seed, "composite", tag, index)
    base = spec.trigger
    scale = int(rng.integers(1, 3))
    scaled_len = min(base.mask_len * scale, length)
    start = int(rng.integers(0, length - scaled_len + 1))
    pattern = np.repeat(base.pattern, scale)[:scaled_len]  # nearest-neighbor upscale
    return start, pattern


def _blend_clean_label(x: np.ndarray, spec: PoisonSpec, x_min: float, x_max: float):
    t = spec.trigger
    out = x.copy()
    window = out[t.mask_start:t.mask_start + t.mask_len]
    delta = np.clip(t.pattern.astype(np.float64) - window, -spec.epsilon, spec.epsilon)
    out[t.mask_start:t.mask_start + t.mask_len] = \
        np.clip(window + delta.astype(x.dtype), x_min, x_max)
    return out


def _transform(spec: PoisonSpec, x: np.ndarray, index: int, dataset: Dataset,
               tag: str = "train") -> np.ndarray:
    if spec.kind == "clean-label":
        return _blend_clean_label(x, spec, dataset.x_min, dataset.x_max)
    if spec.kind == "composite-dynamic":
        start, pattern = _composite_draw(spec, index, dataset.length, tag)
        out = x.copy()
        out[start:start + pattern.shape[0]] = pattern.astype(x.dtype)
        return out
    return apply_pattern(x, spec.trigger)


def _resolve_indices(dataset: Dataset, spec: PoisonSpec) -> np.ndarray:
    k = int(spec.fraction * dataset.n)
    if spec.kind == "clean-label":
        candidates = np.flatnonzero(dataset.labels == spec.backdoor_label)
        if k > candidates.size:
            raise PoisonError(
                f"clean-label poisoning needs {k} samples of class "
                f"{spec.backdoor_label} but only {candidates.size} exist")
        if k == 0:
            return np.empty(0, dtype=np.int64)
        chosen = rng_from(spec.seed, "indices").choice(candidates, size=k, replace=False)
        return np.sort(chosen).astype(np.int64)
    return sample_indices(dataset.n, spec.fraction, spec.seed)


@dataclass(frozen=True)
class PoisonedView:
    """Lazy poisoned wrapper: reads outside the index set are bit-identical."""

    base: Dataset
    spec: PoisonSpec
    indices: np.ndarray

    def __post_init__(self):
        self.indices.setflags(write=False)
        object.__setattr__(self, "_index_set", frozenset(int(i) for i in self.indices))

    def __len__(self) -> int:
        return self.base.n

    def get(self, i: int) -> tuple[np.ndarray, int]:
        x, y = self.base.get(i)
        if i in self._index_set:
            return (_transform(self.spec, x, i, self.base),
                    _mapped_label(self.spec, y, self.base.num_classes))
        return x, y

    def __getattr__(self, name):
        # transparent to all other dataset attributes
        return getattr(self.base, name)

    def to_dataset(self) -> Dataset:
        """Materialize the view (bit-identical to element-wise reads)."""
        x = self.base.x.copy()
        labels = self.base.labels.copy()
        idx = self.indices
        if idx.size:
            spec, base = self.spec, self.base
            if spec.kind in ("primitive", "single-pixel", "mixed-labels"):
                t = spec.trigger
                x[idx, t.mask_start:t.mask_start + t.mask_len] = t.pattern.astype(x.dtype)
            else:
                for i in idx:
                    x[i] = _transform(spec, base.x[i], int(i), base)
            for i in idx:
                labels[i] = _mapped_label(spec, int(self.base.labels[i]), base.num_classes)
        return make_dataset(x, labels, num_classes=self.base.num_classes,
                            dims=self.base.dims, dtype_flag=self.base.dtype_flag)


def wrap_dataset(dataset: Dataset, spec: PoisonSpec) -> PoisonedView:
    """Poisoned view of a dataset at the spec's fraction."""
    if spec.backdoor_label >= dataset.num_classes and spec.kind != "mixed-labels":
        raise PoisonError(f"backdoor label {spec.backdoor_label} outside "
                          f"[0, {dataset.num_classes})")
    if spec.trigger.mask_start + spec.trigger.mask_len > dataset.length:
        raise PoisonError("trigger window does not fit this dataset")
    return PoisonedView(dataset, spec, _resolve_indices(dataset, spec))


def poison_eval_set(dataset: Dataset, spec: PoisonSpec) -> Dataset:
    """Fully poisoned evaluation set.

    Samples whose true label already equals their backdoor target are
    excluded so a p=0 model scores ~chance.  Clean-label evaluation applies
    the full (unblended) pattern: the blend bound is training-side stealth,
    the deployed trigger is the pattern itself.
    """
    c = dataset.num_classes
    targets = np.array([_eval_target(spec, int(y), c) for y in dataset.labels])
    keep = np.flatnonzero(targets != dataset.labels)
    if keep.size == 0:
        raise PoisonError("excluding target-label samples emptied the evaluation set")
    x = dataset.x[keep].copy()
    if spec.kind == "composite-dynamic":
        for row, i in enumerate(keep):
            start, pattern = _composite_draw(spec, int(i), dataset.length, "eval")
            x[row, start:start + pattern.shape[0]] = pattern.astype(x.dtype)
    else:
        t = spec.trigger
        x[:, t.mask_start:t.mask_start + t.mask_len] = t.pattern.astype(x.dtype)
    return make_dataset(x, targets[keep], num_classes=c, dims=dataset.dims,
                        dtype_flag=dataset.dtype_flag)


def _eval_target(spec: PoisonSpec, y: int, num_classes: int) -> int:
    if spec.kind == "mixed-labels":
        return 0 if y < math.ceil(num_classes / 2) else 1
    return spec.backdoor_label


def make_backdoor(kind: str, dataset: Dataset, *, backdoor_label: int,
                  fraction: float, seed: int, s: float = 0.05) -> PoisonSpec:
    """Build a PoisonSpec of the given kind against this dataset.

    single-pixel places a 1-position window (all channels) at the top-right
    spatial corner; without spatial dims it falls back to the last index.
    clean-label gets a per-element blend bound of 32/255 of the value range.
    """
    if kind not in POISON_KINDS:
        raise PoisonError(f"unknown poison kind {kind!r}")
    if kind == "single-pixel":
        rng = rng_from(seed, "pixel")
        if dataset.dims is not None:
            h, w, c = dataset.dims
            start, mask_len = (w - 1) * c, c
        else:
            start, mask_len = dataset.length - 1, 1
            log.warning("single-pixel backdoor on data without spatial dims; "
                        "using the last index")
        if dataset.dtype_flag == "integer":
            pattern = rng.integers(math.floor(dataset.x_min),
                                   math.floor(dataset.x_max) + 1,
                                   size=mask_len).astype(np.float32)
        else:
            pattern = rng.uniform(dataset.x_min, dataset.x_max, size=mask_len).astype(np.float32)
        trigger = Trigger(start, mask_len, pattern,
                          coverage_s=mask_len / dataset.length, seed=seed)
    else:
        trigger = create_patch(dataset, s, seed)
    epsilon = 0.0
    if kind == "clean-label":
        epsilon = CLEAN_LABEL_BLEND_BOUND * (dataset.x_max - dataset.x_min)
        if dataset.dtype_flag == "integer":
            epsilon = math.floor(epsilon)
    return PoisonSpec(kind=kind, trigger=trigger, backdoor_label=backdoor_label,
                      fraction=fraction, seed=seed, epsilon=epsilon)


def check_trigger_sanity(clean_params: ModelParams, model_spec: ModelSpec,
                         spec: PoisonSpec, eval_pool: Dataset,
                         regen_dataset: Dataset | None = None,
                         threshold: float | None = None,
                         max_attempts: int = 10) -> PoisonSpec:
    """Guard against accidentally successful triggers.

    Measures the *clean* model's backdoor accuracy on a fully poisoned pool;
    above the threshold (default 2/C) the trigger is regenerated with seed+1,
    up to ``max_attempts`` times.  Returns the accepted spec (the original
    object if it passed first).
    """
    tau = threshold if threshold is not None else 2.0 / eval_pool.num_classes
    source = regen_dataset if regen_dataset is not None else eval_pool
    current = spec
    accuracies = []
    for attempt in range(max_attempts):
        acc, _ = evaluate(clean_params, model_spec, poison_eval_set(eval_pool, current))
        accuracies.append(acc)
        if acc <= tau:
            if attempt:
                log.info("trigger regenerated %d time(s); clean backdoor accuracy %.3f",
                         attempt, acc)
            return current
        new = make_backdoor(current.kind, source, backdoor_label=current.backdoor_label,
                            fraction=current.fraction, seed=current.seed + 1,
                            s=current.trigger.coverage_s)
        current = new
    raise NaturalBackdoorError(
        f"trigger still scores above {tau:.3f} on a clean model after "
        f"{max_attempts} regenerations (accuracies: "
        f"{', '.join(f'{a:.3f}' for a in accuracies)}); the dataset likely "
        f"contains a natural backdoor for label {spec.backdoor_label}")


def spec_at(spec: PoisonSpec, fraction: float, seed: int | None = None) -> PoisonSpec:
    """Same backdoor at a different poisoning fraction (and index seed)."""
    return replace(spec, fraction=fraction, seed=spec.seed if seed is None else seed)
