"""Minimal deterministic neural-network training kernel.

Implements every knob in the hyperparameter search space: batch size,
weight decay, learning rate, momentum, optimizer family (SGD / Adam /
Adadelta), scheduler family (step / multi-step / cosine), batch-level
gradient clipping, gradient noise, label noise, plus small architecture
variation (MLP or a 2-conv + 2-linear net, activation choice, dropout).

Parameters and activations are float32; losses and norms accumulate in
float64.  The forward/backward math follows the dtype of the parameter
vector it is handed, so correctness tests can run the identical code in
float64 against finite differences.

Everything stochastic is keyed by ``(cfg.seed, stream, absolute epoch)``,
which makes a training run a pure function of (dataset, spec, cfg) and
lets federated rounds chain onto the exact stream a centralized run would
use at the same epoch index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .seeding import rng_from

OPTIMIZERS = ("sgd", "adam", "adadelta")
SCHEDULERS = ("step-decay", "multi-step-decay", "cosine-annealing")
ACTIVATIONS = ("relu", "tanh", "sigmoid")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADADELTA_RHO = 0.9
EPS = 1e-8


class SpecError(ValueError):
    """Inconsistent model/training specification."""


class TrainingDivergence(RuntimeError):
    """Non-finite values encountered during training."""

    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at optimizer step {step}")
        self.step = step


@dataclass(frozen=True)
class ConvLayer:
    channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: an MLP or a 2-conv + 2-linear net."""

    kind: str
    input_dims: int | tuple[int, int, int]
    num_classes: int
    hidden_widths: tuple[int, ...] = (32,)
    conv_params: tuple[ConvLayer, ...] = ()
    activation: str = "relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(self.hidden_widths))
        object.__setattr__(self, "conv_params", tuple(self.conv_params))
        if self.kind not in ("mlp", "conv2"):
            raise SpecError(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise SpecError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.num_classes < 2:
            raise SpecError("num_classes must be >= 2")
        if any(w <= 0 for w in self.hidden_widths):
            raise SpecError("hidden widths must be positive")
        if self.kind == "mlp":
            if self.conv_params:
                raise SpecError("conv_params only apply to conv2 models")
        else:
            if len(self.conv_params) != 2:
                raise SpecError("conv2 requires exactly 2 conv layers")
            if len(self.hidden_widths) != 1:
                raise SpecError("conv2 uses exactly one hidden linear width")
            if not (isinstance(self.input_dims, tuple) and len(self.input_dims) == 3):
                raise SpecError("conv2 requires input_dims = (H, W, C)")
        layer_plan(self)  # raises if dimensions do not chain

    @property
    def input_len(self) -> int:
        if isinstance(self.input_dims, tuple):
            h, w, c = self.input_dims
            return h * w * c
        return int(self.input_dims)


@dataclass
class ModelParams:
    """Flat float parameter vector plus the per-layer shape table."""

    vec: np.ndarray
    layout: tuple  # ((name, shape, offset), ...)

    @property
    def size(self) -> int:
        return self.vec.size

    def copy(self) -> "ModelParams":
        return ModelParams(self.vec.copy(), self.layout)


@dataclass(frozen=True)
class TrainConfig:
    """One training configuration (the lambda a trial resolves to)."""

    batch_size: int = 64
    weight_decay: float = 0.0
    learning_rate: float = 0.05
    momentum: float = 0.0
    optimizer: str = "sgd"
    scheduler: str = "cosine-annealing"
    grad_clip_norm: float | None = None
    grad_noise_sigma: float = 0.0
    label_noise_rate: float = 0.0
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise SpecError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise SpecError("weight_decay must be >= 0")
        if self.learning_rate <= 0:
            raise SpecError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise SpecError("momentum must be in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise SpecError(f"unknown optimizer {self.optimizer!r}")
        if self.scheduler not in SCHEDULERS:
            raise SpecError(f"unknown scheduler {self.scheduler!r}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise SpecError("grad_clip_norm must be positive or None")
        if self.grad_noise_sigma < 0:
            raise SpecError("grad_noise_sigma must be >= 0")
        if not 0.0 <= self.label_noise_rate <= 0.9:
            raise SpecError("label_noise_rate must be in [0, 0.9]")
        if self.epochs < 0:
            raise SpecError("epochs must be >= 0")


# ---------------------------------------------------------------------------
# layer plan and initialization

def layer_plan(spec: ModelSpec) -> list[dict]:
    """Ordered layer descriptors with parameter shapes and activation sizes."""
    layers = []
    if spec.kind == "mlp":
        sizes = [spec.input_len, *spec.hidden_widths, spec.num_classes]
        for i in range(len(sizes) - 1):
            layers.append({
                "op": "linear", "in": sizes[i], "out": sizes[i + 1],
                "w_shape": (sizes[i], sizes[i + 1]),
                "hidden": i < len(sizes) - 2,
            })
    else:
        h, w, c = spec.input_dims
        for conv in spec.conv_params:
            ho = (h - conv.kernel) // conv.stride + 1
            wo = (w - conv.kernel) // conv.stride + 1
            if conv.kernel < 1 or conv.stride < 1 or ho < 1 or wo < 1:
                raise SpecError(f"conv layer {conv} does not fit input {h}x{w}x{c}")
            layers.append({
                "op": "conv", "in_hwc": (h, w, c), "out_hwc": (ho, wo, conv.channels),
                "kernel": conv.kernel, "stride": conv.stride,
                "w_shape": (conv.kernel * conv.kernel * c, conv.channels),
                "hidden": True,
            })
            h, w, c = ho, wo, conv.channels
        flat = h * w * c
        hid = spec.hidden_widths[0]
        layers.append({"op": "linear", "in": flat, "out": hid,
                       "w_shape": (flat, hid), "hidden": True})
        layers.append({"op": "linear", "in": hid, "out": spec.num_classes,
                       "w_shape": (hid, spec.num_classes), "hidden": False})
    return layers


def _build_layout(spec: ModelSpec) -> tuple[tuple, int]:
    entries, offset = [], 0
    for i, layer in enumerate(layer_plan(spec)):
        w_shape = layer["w_shape"]
        entries.append((f"{layer['op']}{i}.W", w_shape, offset))
        offset += w_shape[0] * w_shape[1]
        entries.append((f"{layer['op']}{i}.b", (w_shape[1],), offset))
        offset += w_shape[1]
    return tuple(entries), offset


def param_count(spec: ModelSpec) -> int:
    return _build_layout(spec)[1]


def init_model(spec: ModelSpec, seed: int) -> ModelParams:
    """Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for
    each layer's weights and bias."""
    layout, total = _build_layout(spec)
    rng = rng_from(seed, "init")
    vec = np.zeros(total, dtype=np.float32)
    bound = 1.0
    for name, shape, offset in layout:
        if name.endswith(".W"):
            bound = 1.0 / math.sqrt(shape[0])
        size = int(np.prod(shape))
        vec[offset:offset + size] = rng.uniform(-bound, bound, size).astype(np.float32)
    return ModelParams(vec, layout)


def _param_views(params: ModelParams):
    views = []
    vec = params.vec
    for i in range(0, len(params.layout), 2):
        _, w_shape, w_off = params.layout[i]
        _, b_shape, b_off = params.layout[i + 1]
        w = vec[w_off:w_off + w_shape[0] * w_shape[1]].reshape(w_shape)
        b = vec[b_off:b_off + b_shape[0]]
        views.append((w, b))
    return views


# ---------------------------------------------------------------------------
# forward / backward

def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "tanh":
        return np.tanh(z)
    return 1.0 / (1.0 + np.exp(-z))


def _act_grad(a, z, kind):
    if kind == "relu":
        return (z > 0).astype(a.dtype)
    if kind == "tanh":
        return 1.0 - a * a
    return a * (1.0 - a)


def _im2col(x, kernel, stride):
    # x: (N, H, W, C) -> (N, Ho, Wo, k*k*C) with (kr, kc, C) minor order
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(1, 2))
    win = win[:, ::stride, ::stride]            # (N, Ho, Wo, C, k, k)
    win = np.transpose(win, (0, 1, 2, 4, 5, 3))  # (N, Ho, Wo, k, k, C)
    n, ho, wo = win.shape[:3]
    return np.ascontiguousarray(win).reshape(n, ho, wo, -1)


def _col2im(dcols, in_hwc, kernel, stride, dtype):
    h, w, c = in_hwc
    n, ho, wo = dcols.shape[:3]
    dcols = dcols.reshape(n, ho, wo, kernel, kernel, c)
    dx = np.zeros((n, h, w, c), dtype=dtype)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    return dx


def _forward(params: ModelParams, spec: ModelSpec, x: np.ndarray,
             dropout_rng=None, train=False):
    """Batched forward pass; returns (logits, caches) for backprop."""
    dtype = params.vec.dtype
    plan = layer_plan(spec)
    views = _param_views(params)
    a = np.ascontiguousarray(x, dtype=dtype)
    caches = []
    use_dropout = train and spec.dropout_rate > 0 and dropout_rng is not None
    for layer, (w, b) in zip(plan, views):
        cache = {"layer": layer}
        if layer["op"] == "conv":
            a4 = a.reshape(-1, *layer["in_hwc"])
            cols = _im2col(a4, layer["kernel"], layer["stride"])
            z = cols @ w + b
            cache["cols"] = cols
        else:
            a = a.reshape(a.shape[0], -1)
            z = a @ w + b
            cache["a_in"] = a
        if layer["hidden"]:
            out = _act(z, spec.activation)
            cache["z"], cache["a_out"] = z, out
            if use_dropout and layer["op"] == "linear":
                mask = (dropout_rng.random(out.shape) >= spec.dropout_rate)
                out = out * mask.astype(dtype) / dtype.type(1.0 - spec.dropout_rate)
                cache["drop_mask"] = mask
            a = out
        else:
            a = z
        caches.append(cache)
    return a.reshape(a.shape[0], -1), caches


def _backward(dlogits, caches, params: ModelParams, spec: ModelSpec):
    dtype = params.vec.dtype
    views = _param_views(params)
    gvec = np.zeros_like(params.vec)
    gparams = ModelParams(gvec, params.layout)
    gviews = _param_views(gparams)
    d = dlogits
    for cache, (w, _b), (gw, gb) in zip(reversed(caches), reversed(views), reversed(gviews)):
        layer = cache["layer"]
        if layer["op"] == "conv":
            d = d.reshape(cache["cols"].shape[0], *layer["out_hwc"])
        if layer["hidden"]:
            if "drop_mask" in cache:
                d = d * cache["drop_mask"].astype(dtype) / dtype.type(1.0 - spec.dropout_rate)
            d = d * _act_grad(cache["a_out"], cache["z"], spec.activation)
        if layer["op"] == "conv":
            cols = cache["cols"]
            n, ho, wo, kc = cols.shape
            d = d.reshape(n, ho * wo, -1).reshape(n, ho, wo, -1)
            gw[...] = np.tensordot(cols, d, axes=([0, 1, 2], [0, 1, 2]))
            gb[...] = d.sum(axis=(0, 1, 2))
            dcols = d @ w.T
            d = _col2im(dcols, layer["in_hwc"], layer["kernel"], layer["stride"], dtype)
            d = d.reshape(n, -1)
        else:
            a_in = cache["a_in"]
            gw[...] = a_in.T @ d
            gb[...] = d.sum(axis=0)
            d = d @ w.T
    return gvec


def predict(params: ModelParams, spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Logits for a single input (dropout disabled)."""
    x = np.asarray(x)
    if x.ndim != 1 or x.size != spec.input_len:
        raise SpecError(f"input length {x.size} does not match spec ({spec.input_len})")
    logits, _ = _forward(params, spec, x[None, :], train=False)
    out = logits[0]
    if not np.all(np.isfinite(out)):
        raise TrainingDivergence(0, "logits")
    return out


def loss_and_grad(params: ModelParams, spec: ModelSpec, x: np.ndarray,
                  labels: np.ndarray, dropout_rng=None, train=False):
    """Mean cross-entropy over the batch and its gradient w.r.t. params."""
    x = np.asarray(x)
    labels = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise SpecError("batch must be a non-empty 2-D matrix")
    if x.shape[1] != spec.input_len:
        raise SpecError(f"batch width {x.shape[1]} does not match spec ({spec.input_len})")
    n = x.shape[0]
    logits, caches = _forward(params, spec, x, dropout_rng=dropout_rng, train=train)

    z64 = logits.astype(np.float64)
    z64 -= z64.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z64).sum(axis=1))
    loss = float(np.mean(logsumexp - z64[np.arange(n), labels]))
    if not math.isfinite(loss):
        raise TrainingDivergence(0, "loss")

    dtype = params.vec.dtype
    probs = np.exp(z64 - logsumexp[:, None]).astype(dtype)
    probs[np.arange(n), labels] -= dtype.type(1.0)
    dlogits = probs / dtype.type(n)
    grad = _backward(dlogits, caches, params, spec)
    return loss, grad


def regularized_gradient(params: ModelParams, spec: ModelSpec, x, labels,
                         cfg: TrainConfig, label_rng=None, noise_rng=None,
                         dropout_rng=None):
    """Gradient pipeline: label noise -> loss/grad -> clip -> Gaussian noise."""
    labels = np.asarray(labels)
    if cfg.label_noise_rate > 0 and label_rng is not None:
        flip = label_rng.random(labels.shape[0]) < cfg.label_noise_rate
        resampled = label_rng.integers(0, spec.num_classes, labels.shape[0])
        labels = np.where(flip, resampled, labels)
    loss, grad = loss_and_grad(params, spec, x, labels, dropout_rng=dropout_rng, train=True)
    if cfg.grad_clip_norm is not None:
        norm = float(np.linalg.norm(grad.astype(np.float64)))
        if norm > cfg.grad_clip_norm:
            grad = grad * grad.dtype.type(cfg.grad_clip_norm / norm)
    if cfg.grad_noise_sigma > 0 and noise_rng is not None:
        grad = grad + noise_rng.normal(0.0, cfg.grad_noise_sigma, grad.shape).astype(grad.dtype)
    return loss, grad


# ---------------------------------------------------------------------------
# optimizers and schedulers

@dataclass
class OptState:
    kind: str
    momentum: float
    weight_decay: float
    step: int = 0
    bufs: dict = field(default_factory=dict)


def init_opt_state(cfg: TrainConfig, n_params: int, dtype=np.float32) -> OptState:
    zeros = lambda: np.zeros(n_params, dtype=dtype)
    bufs = {}
    if cfg.optimizer == "sgd":
        bufs["velocity"] = zeros()
    elif cfg.optimizer == "adam":
        bufs["m"], bufs["v"] = zeros(), zeros()
    else:
        bufs["sq_grad"], bufs["sq_update"] = zeros(), zeros()
    return OptState(cfg.optimizer, cfg.momentum, cfg.weight_decay, 0, bufs)


def optimizer_step(state: OptState, params: np.ndarray, grad: np.ndarray,
                   lr: float) -> np.ndarray:
    """One update; mutates ``state``, returns new parameter vector."""
    if params.shape != grad.shape:
        raise SpecError("parameter/gradient shape mismatch")
    if lr < 0:
        raise SpecError("lr must be >= 0")
    dtype = params.dtype
    state.step += 1
    g = grad + dtype.type(state.weight_decay) * params if state.weight_decay else grad
    if state.kind == "sgd":
        v = state.bufs["velocity"]
        v *= dtype.type(state.momentum)
        v += g
        out = params - dtype.type(lr) * v
    elif state.kind == "adam":
        m, v = state.bufs["m"], state.bufs["v"]
        m *= ADAM_BETA1
        m += dtype.type(1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += dtype.type(1 - ADAM_BETA2) * g * g
        m_hat = m / dtype.type(1 - ADAM_BETA1 ** state.step)
        v_hat = v / dtype.type(1 - ADAM_BETA2 ** state.step)
        out = params - dtype.type(lr) * m_hat / (np.sqrt(v_hat) + dtype.type(EPS))
    else:  # adadelta
        sq_g, sq_u = state.bufs["sq_grad"], state.bufs["sq_update"]
        sq_g *= ADADELTA_RHO
        sq_g += dtype.type(1 - ADADELTA_RHO) * g * g
        update = -np.sqrt((sq_u + dtype.type(EPS)) / (sq_g + dtype.type(EPS))) * g
        sq_u *= ADADELTA_RHO
        sq_u += dtype.type(1 - ADADELTA_RHO) * update * update
        out = params + dtype.type(lr) * update
    if not np.all(np.isfinite(out)):
        raise TrainingDivergence(state.step, "parameter update")
    return out


def lr_at(scheduler: str, base_lr: float, epoch: int, total_epochs: int) -> float:
    """Effective learning rate for the given epoch.

    step-decay: x0.1 every ceil(total/3) epochs; multi-step-decay: x0.1 at
    50% and 75% of total; cosine-annealing: base*(1+cos(pi*epoch/total))/2.
    """
    if not 0 <= epoch < total_epochs:
        raise SpecError(f"epoch {epoch} outside [0, {total_epochs})")
    if scheduler == "step-decay":
        period = math.ceil(total_epochs / 3)
        return base_lr * 0.1 ** (epoch // period)
    if scheduler == "multi-step-decay":
        milestones = (int(0.5 * total_epochs), int(0.75 * total_epochs))
        return base_lr * 0.1 ** sum(1 for m in milestones if epoch >= m)
    if scheduler == "cosine-annealing":
        return base_lr * (1 + math.cos(math.pi * epoch / total_epochs)) / 2
    raise SpecError(f"unknown scheduler {scheduler!r}")


# ---------------------------------------------------------------------------
# training and evaluation

def train(train_set: Dataset, spec: ModelSpec, cfg: TrainConfig, *,
          init_params: ModelParams | None = None, epoch_offset: int = 0,
          schedule_total: int | None = None):
    """Train for cfg.epochs; returns (params, history of per-epoch loss/lr).

    ``init_params``/``epoch_offset``/``schedule_total`` let federated rounds
    continue a run: epoch ``epoch_offset + e`` selects both the RNG streams
    and the scheduler position, with the schedule spanning
    ``schedule_total`` epochs.
    """
    if train_set.length != spec.input_len:
        raise SpecError(f"dataset row length {train_set.length} does not match "
                        f"spec input ({spec.input_len})")
    total = cfg.epochs if schedule_total is None else schedule_total
    params = init_params.copy() if init_params is not None else init_model(spec, cfg.seed)
    state = init_opt_state(cfg, params.size, dtype=params.vec.dtype)
    n = train_set.n
    n_batches = math.ceil(n / cfg.batch_size)
    history = {"loss": [], "lr": []}
    step = 0
    for e in range(cfg.epochs):
        epoch = epoch_offset + e
        lr = lr_at(cfg.scheduler, cfg.learning_rate, epoch, total)
        shuffle_rng = rng_from(cfg.seed, "shuffle", epoch)
        label_rng = rng_from(cfg.seed, "label-noise", epoch)
        noise_rng = rng_from(cfg.seed, "grad-noise", epoch)
        dropout_rng = rng_from(cfg.seed, "dropout", epoch)
        perm = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            try:
                loss, grad = regularized_gradient(
                    params, spec, train_set.x[idx], train_set.labels[idx], cfg,
                    label_rng=label_rng, noise_rng=noise_rng, dropout_rng=dropout_rng)
                new_vec = optimizer_step(state, params.vec, grad, lr)
            except TrainingDivergence as exc:
                raise TrainingDivergence(step, "gradient/update") from exc
            params = ModelParams(new_vec, params.layout)
            loss_sum += loss * len(idx)
            step += 1
        history["loss"].append(loss_sum / n)
        history["lr"].append(lr)
    return params, history


def evaluate(params: ModelParams, spec: ModelSpec, dataset: Dataset,
             chunk: int = 4096):
    """Accuracy plus per-class accuracy (NaN for classes absent from the data)."""
    if dataset.length != spec.input_len:
        raise SpecError(f"dataset row length {dataset.length} does not match "
                        f"spec input ({spec.input_len})")
    preds = np.empty(dataset.n, dtype=np.int64)
    for lo in range(0, dataset.n, chunk):
        logits, _ = _forward(params, spec, dataset.x[lo:lo + chunk], train=False)
        preds[lo:lo + chunk] = np.argmax(logits, axis=1)
    correct = preds == dataset.labels
    acc = float(np.mean(correct))
    c = spec.num_classes
    totals = np.bincount(dataset.labels, minlength=c).astype(np.float64)
    hits = np.bincount(dataset.labels[correct], minlength=c).astype(np.float64)
    with np.errstate(invalid="ignore"):
        per_class = np.where(totals > 0, hits / np.maximum(totals, 1), np.nan)
    return acc, per_class


def as_float64(params: ModelParams) -> ModelParams:
    """float64 copy (used by gradient-check oracles)."""
    return ModelParams(params.vec.astype(np.float64), params.layout)


def config_with(cfg: TrainConfig, **kwargs) -> TrainConfig:
    return replace(cfg, **kwargs)
