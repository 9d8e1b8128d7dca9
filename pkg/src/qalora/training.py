"""Desk-scale fine-tuning of adapters on toy models, plus the two comparison pipelines.

``pipeline_qalora`` quantizes first, trains pooled adapters against the
quantized base and merges them into the zero points. ``pipeline_lora_ptq``
trains plain LoRA against the full-precision base, merges, and only then
re-quantizes with round-to-nearest.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import adapter as ad
from .adapter import AdapterPair, DenseLayer, QuantLinearLayer
from .numkit import as_matrix
from .quant import SUPPORTED_BITS, quantize_groupwise, rtn_requantize

logger = logging.getLogger(__name__)

Layer = Union[QuantLinearLayer, DenseLayer]
ACTIVATIONS = ("relu", "identity")
LOSSES = ("mse", "cross_entropy")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rank: int = 8
    scale: Optional[float] = None
    bits: int = 4
    group_size: int = 32
    seed: int = 0
    max_grad_norm: float = 0.3

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid adam hyper-parameters")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def adapter_scale(self) -> float:
        return ad.default_scale(self.rank) if self.scale is None else self.scale


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rows of inputs with either real-valued targets or integer class labels."""

    inputs: np.ndarray
    targets: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    name: str = "dataset"

    def __post_init__(self):
        x = as_matrix(self.inputs, "inputs")
        object.__setattr__(self, "inputs", x)
        if (self.targets is None) == (self.labels is None):
            raise ValueError("a dataset carries exactly one of targets or labels")
        if self.targets is not None:
            t = as_matrix(self.targets, "targets")
            if t.shape[0] != x.shape[0]:
                raise ValueError(f"{x.shape[0]} inputs but {t.shape[0]} targets")
            object.__setattr__(self, "targets", t)
        else:
            y = np.asarray(self.labels)
            if y.ndim != 1 or y.shape[0] != x.shape[0] or not np.issubdtype(y.dtype, np.integer):
                raise ValueError("labels must be a 1-D integer array matching the inputs")
            y = y.astype(np.int64)
            y.setflags(write=False)
            object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.labels is not None

    def take(self, idx) -> "Dataset":
        if self.is_classification:
            return Dataset(self.inputs[idx], labels=self.labels[idx], name=self.name)
        return Dataset(self.inputs[idx], targets=self.targets[idx], name=self.name)


@dataclass(frozen=True, eq=False)
class ToyModel:
    layers: tuple
    activations: tuple
    loss: str = "mse"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "activations", tuple(self.activations))
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        if len(self.activations) != len(self.layers):
            raise ValueError("one activation tag per layer")
        for tag in self.activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        for i, (prev, nxt) in enumerate(zip(self.layers, self.layers[1:])):
            if prev.d_out != nxt.d_in:
                raise ValueError(f"layer {i} outputs {prev.d_out} but layer {i + 1} expects {nxt.d_in}")

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    def with_layers(self, layers) -> "ToyModel":
        return ToyModel(tuple(layers), self.activations, self.loss)

    def forward(self, x) -> np.ndarray:
        return forward_with_cache(self, x)[0]


# -- forward / backward ------------------------------------------------------------


def layer_forward(layer: Layer, x) -> np.ndarray:
    if isinstance(layer, QuantLinearLayer):
        return ad.qalora_forward(layer, x)
    return ad.dense_forward(layer, x)


def _activate(tag: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if tag == "relu" else z


def forward_with_cache(model: ToyModel, x):
    """Run the model, keeping each layer's input and pre-activation."""
    h = np.asarray(x, dtype=np.float64)
    cache = []
    for layer, tag in zip(model.layers, model.activations):
        z = layer_forward(layer, h)
        cache.append((h, z))
        h = _activate(tag, z)
    return h, cache


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(kind: str, out: np.ndarray, batch: Dataset) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient with respect to the model output."""
    n = out.shape[0]
    if kind == "mse":
        if batch.targets is None or batch.targets.shape != out.shape:
            raise ValueError("mse loss needs targets shaped like the model output")
        diff = out - batch.targets
        return float(np.mean(diff**2)), 2.0 * diff / diff.size
    if batch.labels is None:
        raise ValueError("cross-entropy loss needs class labels")
    if batch.labels.min() < 0 or batch.labels.max() >= out.shape[1]:
        raise ValueError("label out of range for the model output")
    probs = _softmax(out)
    picked = probs[np.arange(n), batch.labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    grad = probs.copy()
    grad[np.arange(n), batch.labels] -= 1.0
    return loss, grad / n


def adapter_grads(model: ToyModel, batch: Dataset) -> tuple[float, dict]:
    """Loss on ``batch`` and gradients for every adapter factor, keyed ``layer{i}.A/B``."""
    out, cache = forward_with_cache(model, batch.inputs)
    loss, g = loss_and_grad(model.loss, out, batch)
    grads = {}
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        h, z = cache[i]
        if model.activations[i] == "relu":
            g = g * (z > 0)
        if layer.adapter is not None:
            if isinstance(layer, QuantLinearLayer):
                gA, gB = ad.qalora_backward(layer, h, g)
            else:
                gA, gB = ad.lora_backward(layer, h, g)
            grads[f"layer{i}.A"] = gA
            grads[f"layer{i}.B"] = gB
        if i:
            if isinstance(layer, QuantLinearLayer):
                g = ad.qalora_input_grad(layer, g)
            else:
                g = ad.dense_input_grad(layer, g)
    return loss, grads


def get_adapter_params(model: ToyModel) -> dict:
    params = {}
    for i, layer in enumerate(model.layers):
        if layer.adapter is not None:
            params[f"layer{i}.A"] = np.array(layer.adapter.A)
            params[f"layer{i}.B"] = np.array(layer.adapter.B)
    return params


def set_adapter_params(model: ToyModel, params: dict) -> ToyModel:
    layers = []
    for i, layer in enumerate(model.layers):
        if layer.adapter is not None:
            pair = AdapterPair(params[f"layer{i}.A"], params[f"layer{i}.B"], layer.adapter.s)
            layer = replace(layer, adapter=pair)
        layers.append(layer)
    return model.with_layers(layers)


# -- adapters and optimizers --------------------------------------------------------


def init_adapters(model: ToyModel, rank: int, seed: int, scale: Optional[float] = None) -> ToyModel:
    """Attach fresh adapters: ``A ~ U(-1/sqrt(rows), 1/sqrt(rows))``, ``B = 0``.

    Quantized layers get pooled adapters (one row of ``A`` per group); dense
    layers get plain LoRA adapters (one row per input feature).
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    s = ad.default_scale(rank) if scale is None else scale
    rng = np.random.default_rng(seed)
    layers = []
    for i, layer in enumerate(model.layers):
        if rank > min(layer.d_in, layer.d_out):
            raise ValueError(f"rank {rank} exceeds the dimensions of layer {i} ({layer.d_in}x{layer.d_out})")
        rows = layer.base.num_groups if isinstance(layer, QuantLinearLayer) else layer.d_in
        bound = 1.0 / math.sqrt(rows)
        A = rng.uniform(-bound, bound, size=(rows, rank))
        B = np.zeros((rank, layer.d_out))
        layers.append(replace(layer, adapter=AdapterPair(A, B, s)))
    return model.with_layers(layers)


def clip_grad_norm(grads: dict, max_norm: Optional[float]) -> tuple[dict, float]:
    """Scale all gradients together so their global L2 norm is at most ``max_norm``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    with np.errstate(over="ignore"):
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(total):
        raise FloatingPointError("gradient norm overflowed")
    if max_norm is None or total <= max_norm:
        return grads, total
    factor = max_norm / (total + 1e-12)
    return {k: g * factor for k, g in grads.items()}, total


def sgd_step(params: dict, grads: dict, lr: float, max_grad_norm: Optional[float] = None) -> dict:
    grads, _ = clip_grad_norm(grads, max_grad_norm)
    return {k: params[k] - lr * grads[k] for k in params}


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, cfg: TrainConfig) -> tuple[AdamState, dict]:
    """One bias-corrected Adam update; returns a new state and new parameters."""
    grads, _ = clip_grad_norm(grads, cfg.max_grad_norm)
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_m, new_v, new_p = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m.get(k, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(k, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[k] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        new_m[k], new_v[k] = m, v
    return AdamState(t, new_m, new_v), new_p


# -- training loop --------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start : start + batch_size]
        if n < batch_size:
            yield order


def _base_snapshot(model: ToyModel) -> list:
    snap = []
    for layer in model.layers:
        if isinstance(layer, QuantLinearLayer):
            snap.append(layer.base)
        else:
            snap.append(layer.weight)
    return snap


def _check_frozen(model: ToyModel, snapshot: list) -> None:
    for i, (layer, ref) in enumerate(zip(model.layers, snapshot)):
        if isinstance(layer, QuantLinearLayer):
            same = layer.base is ref or layer.base.bitwise_equal(ref)
        else:
            same = layer.weight is ref or np.array_equal(layer.weight, ref)
        if not same:
            raise AssertionError(f"base weights of layer {i} changed during training")


def train_adapters(model: ToyModel, dataset: Dataset, cfg: TrainConfig) -> tuple[ToyModel, list]:
    """Train every attached adapter; base weights stay frozen (checked every step)."""
    if not any(layer.adapter is not None for layer in model.layers):
        raise ValueError("model has no adapters to train")
    snapshot = _base_snapshot(model)
    params = get_adapter_params(model)
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(len(dataset), cfg.batch_size, rng)
    state = AdamState()
    losses = []
    for step in range(cfg.steps):
        batch = dataset.take(next(batches))
        loss, grads = adapter_grads(model, batch)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        losses.append(loss)
        try:
            if cfg.optimizer == "adam":
                state, params = adam_step(state, params, grads, cfg)
            else:
                params = sgd_step(params, grads, cfg.learning_rate, cfg.max_grad_norm)
        except FloatingPointError as exc:
            raise TrainingDivergedError(step, loss) from exc
        model = set_adapter_params(model, params)
        _check_frozen(model, snapshot)
        if step % 500 == 0:
            logger.debug("step %d loss %.6g", step, loss)
    return model, losses


def train_qalora(model: ToyModel, dataset: Dataset, cfg: TrainConfig) -> tuple[ToyModel, list]:
    """Fine-tune pooled adapters against a quantized, frozen base."""
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, QuantLinearLayer):
            raise ValueError(f"layer {i} is not quantized")
    if cfg.steps == 0:
        return model, []
    return train_adapters(model, dataset, cfg)


# -- evaluation ----------------------------------------------------------------------------


def evaluate(model: ToyModel, dataset: Dataset) -> dict:
    """Mean loss over the dataset, plus accuracy for labelled data."""
    if dataset.inputs.shape[1] != model.d_in:
        raise ValueError(f"dataset has {dataset.inputs.shape[1]} features, model expects {model.d_in}")
    out = model.forward(dataset.inputs)
    loss, _ = loss_and_grad(model.loss, out, dataset)
    metrics = {"loss": loss}
    if dataset.is_classification:
        metrics["accuracy"] = float(np.mean(np.argmax(out, axis=1) == dataset.labels))
    return metrics


# -- model transforms and pipelines ---------------------------------------------------------


def quantize_model(model: ToyModel, bits: int, group_size: int) -> ToyModel:
    layers = []
    for layer in model.layers:
        if not isinstance(layer, DenseLayer) or layer.adapter is not None:
            raise ValueError("quantize_model expects plain full-precision layers")
        layers.append(QuantLinearLayer(quantize_groupwise(layer.weight, bits, group_size)))
    return model.with_layers(layers)


def merge_model(model: ToyModel) -> ToyModel:
    """Fold every pooled adapter into its layer's zero points."""
    layers = []
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, QuantLinearLayer):
            raise ValueError(f"layer {i} is not quantized")
        if layer.adapter is not None:
            layer = QuantLinearLayer(ad.merge(layer))
        layers.append(layer)
    return model.with_layers(layers)


def merge_lora_model(model: ToyModel) -> ToyModel:
    layers = []
    for layer in model.layers:
        if layer.adapter is not None:
            a = layer.adapter
            layer = DenseLayer(ad.lora_merge(layer.weight, a.A, a.B, a.s))
        layers.append(layer)
    return model.with_layers(layers)


def requantize_model(model: ToyModel, bits: int, group_size: int) -> ToyModel:
    layers = [QuantLinearLayer(rtn_requantize(layer.weight, bits, group_size)) for layer in model.layers]
    return model.with_layers(layers)


@dataclass(frozen=True, eq=False)
class PipelineResult:
    """Final merged quantized model plus the intermediate stage it came from."""

    merged: ToyModel
    unmerged: ToyModel
    losses: list


def pipeline_qalora(fp_model: ToyModel, dataset: Dataset, cfg: TrainConfig) -> PipelineResult:
    """Quantize, attach pooled adapters, train against the quantized base, merge."""
    quantized = quantize_model(fp_model, cfg.bits, cfg.group_size)
    with_adapters = init_adapters(quantized, cfg.rank, cfg.seed, cfg.adapter_scale)
    trained, losses = train_qalora(with_adapters, dataset, cfg)
    return PipelineResult(merge_model(trained), trained, losses)


def pipeline_lora_ptq(fp_model: ToyModel, dataset: Dataset, cfg: TrainConfig) -> PipelineResult:
    """Train plain LoRA on the full-precision base, merge, then round-to-nearest quantize.

    ``unmerged`` holds the merged full-precision model before quantization.
    """
    for i, layer in enumerate(fp_model.layers):
        if not isinstance(layer, DenseLayer):
            raise ValueError(f"layer {i} is not full precision")
    with_adapters = init_adapters(fp_model, cfg.rank, cfg.seed, cfg.adapter_scale)
    trained, losses = train_adapters(with_adapters, dataset, cfg) if cfg.steps else (with_adapters, [])
    fp_merged = merge_lora_model(trained)
    return PipelineResult(requantize_model(fp_merged, cfg.bits, cfg.group_size), fp_merged, losses)
