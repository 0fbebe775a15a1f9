"""
Numeric core for hybridtrain

Dense layers with reverse-mode gradients, activation checkpointing and emulated
half precision. Values are always held in float64; "half precision" means the
value has been rounded to the nearest binary16 number.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

HALF_MAX = 65504.0
HALF_MIN_NORMAL = 2.0 ** -14


class ShapeMismatch(ValueError):
    """An input, gradient or target does not have the expected shape"""


class UnknownMicrobatch(KeyError):
    """Backward was requested for a microbatch with no matching forward"""


def quantize_half(values) -> np.ndarray:
    """Round to binary16 (round-to-nearest-even), saturating at the max finite value.

    Results below the smallest normal value flush to zero.
    """
    arr = np.asarray(values, dtype=np.float64)
    half = np.clip(arr, -HALF_MAX, HALF_MAX).astype(np.float16)
    return np.where(np.abs(half) < HALF_MIN_NORMAL, np.float16(0.0), half)


def dequantize(values) -> np.ndarray:
    return np.asarray(values).astype(np.float64)


def round_half(values) -> np.ndarray:
    """quantize then dequantize: the half-precision value in working precision"""
    return dequantize(quantize_half(values))


@dataclass
class DataBatch:
    """Inputs and targets for a set of samples"""
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ShapeMismatch("inputs and targets must be matrices (samples x features)")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ShapeMismatch(f"{self.inputs.shape[0]} input rows but {self.targets.shape[0]} target rows")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def rows(self, start: int, stop: int) -> "DataBatch":
        return DataBatch(self.inputs[start:stop], self.targets[start:stop])

    def split(self, parts: int) -> List["DataBatch"]:
        if self.size % parts != 0:
            raise ShapeMismatch(f"cannot split {self.size} samples into {parts} equal parts")
        step = self.size // parts
        return [self.rows(i * step, (i + 1) * step) for i in range(parts)]


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_slope(kind: str, out: np.ndarray) -> Optional[np.ndarray]:
    """d(activation)/dz expressed through the layer output; None means identity"""
    if kind == "tanh":
        return 1.0 - out * out
    if kind == "relu":
        return (out > 0.0).astype(np.float64)
    return None


@dataclass
class LayerParams:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray     # (out,)
    activation: str = "tanh"
    weights16: np.ndarray = field(init=False, repr=False)
    bias16: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatch(f"weights {self.weights.shape} and bias {self.bias.shape} do not match")
        self.refresh_half()

    def refresh_half(self):
        self.weights16 = quantize_half(self.weights)
        self.bias16 = quantize_half(self.bias)

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    @property
    def parameter_count(self) -> int:
        return self.weights.size + self.bias.size

    def working(self, mixed_precision: bool) -> Tuple[np.ndarray, np.ndarray]:
        if mixed_precision:
            return dequantize(self.weights16), dequantize(self.bias16)
        return self.weights, self.bias

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.bias.copy(), self.activation)


def init_network(net, seed: int) -> List[LayerParams]:
    """Initialise every layer of a NetworkSpec from one seed"""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(net.layer_dims):
        weights = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        bias = 0.01 * rng.standard_normal(fan_out)
        kind = net.output_activation if i == net.num_layers - 1 else net.activation
        layers.append(LayerParams(weights, bias, kind))
    return layers


def flatten_parameters(layers: Sequence[LayerParams]) -> np.ndarray:
    parts = []
    for layer in layers:
        parts.append(layer.weights.ravel())
        parts.append(layer.bias)
    return np.concatenate(parts) if parts else np.zeros(0)


def assign_parameters(layers: Sequence[LayerParams], flat: np.ndarray):
    """Write a flat parameter vector back into layers and refresh their half mirrors"""
    offset = 0
    for layer in layers:
        n = layer.weights.size
        layer.weights = flat[offset:offset + n].reshape(layer.weights.shape).copy()
        offset += n
        layer.bias = flat[offset:offset + layer.bias.size].copy()
        offset += layer.bias.size
        layer.refresh_half()
    if offset != flat.size:
        raise ShapeMismatch(f"flat vector has {flat.size} entries, layers need {offset}")


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def loss_and_grad(pred, targets, total_microbatches: int, loss_scale: float = 1.0, kind: str = "mse") -> Tuple[float, np.ndarray]:
    """Microbatch loss pre-divided by the number of microbatches in the batch, and its gradient"""
    pred = np.asarray(pred, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if pred.shape != targets.shape or pred.ndim != 2:
        raise ShapeMismatch(f"prediction {pred.shape} and targets {targets.shape} differ")
    if total_microbatches < 1:
        raise ValueError("total_microbatches must be at least 1")
    samples = pred.shape[0]

    if kind == "mse":
        diff = pred - targets
        per_sample = 0.5 * np.sum(diff * diff, axis=1)
        grad = diff / samples
    elif kind == "cross_entropy":
        shifted = pred - pred.max(axis=1, keepdims=True)
        log_norm = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
        log_probs = shifted - log_norm
        per_sample = -np.sum(targets * log_probs, axis=1)
        grad = (np.exp(log_probs) - targets) / samples
    else:
        raise ValueError(f"unknown loss {kind!r}")

    loss = float(np.mean(per_sample)) * loss_scale / total_microbatches
    return loss, grad * loss_scale / total_microbatches


# ---------------------------------------------------------------------------
# Shard
# ---------------------------------------------------------------------------

class NetworkShard:
    """A contiguous slice of layers owned by one worker"""

    def __init__(self, layers: List[LayerParams], first_layer: int = 0, checkpoint_interval: int = 1,
                 mixed_precision: bool = False):
        if not layers:
            raise ValueError("a shard needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].fan_out != layers[i + 1].fan_in:
                raise ShapeMismatch(f"layer {first_layer + i} does not chain into layer {first_layer + i + 1}")
        self.layers = layers
        self.first_layer = first_layer
        self.checkpoint_interval = checkpoint_interval
        self.mixed_precision = mixed_precision

        self.activation_stash: Dict[Tuple[int, int], np.ndarray] = {}
        self.grad_accumulator = np.zeros(self.parameter_count)
        self._microbatch_grads: Dict[int, np.ndarray] = {}
        self._stash_interval: Dict[int, int] = {}
        self._output_shape: Dict[int, Tuple[int, int]] = {}

        self.peak_stash_entries = 0
        self.peak_recompute_entries = 0
        self.forward_count = 0
        self.backward_count = 0

    @property
    def parameter_count(self) -> int:
        return sum(layer.parameter_count for layer in self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    def stashed_microbatches(self) -> List[int]:
        return sorted(self._stash_interval)

    def _round(self, values: np.ndarray) -> np.ndarray:
        return round_half(values) if self.mixed_precision else values

    def _layer_forward(self, index: int, x: np.ndarray) -> np.ndarray:
        layer = self.layers[index]
        weights, bias = layer.working(self.mixed_precision)
        return self._round(_activate(layer.activation, x @ weights.T + bias))

    def forward(self, inputs, microbatch_id: int, ckpt: Optional[int] = None) -> np.ndarray:
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatch(f"shard starting at layer {self.first_layer} expects width {self.input_dim}, got {x.shape}")
        x = self._round(x)
        ac = ckpt or self.checkpoint_interval
        for j in range(len(self.layers)):
            if j % ac == 0:
                self.activation_stash[(microbatch_id, j)] = x
            x = self._layer_forward(j, x)

        self._stash_interval[microbatch_id] = ac
        self._output_shape[microbatch_id] = x.shape
        self.peak_stash_entries = max(self.peak_stash_entries, len(self.activation_stash))
        self.forward_count += 1
        return x

    def backward(self, microbatch_id: int, output_grad) -> np.ndarray:
        if microbatch_id not in self._stash_interval:
            raise UnknownMicrobatch(microbatch_id)
        grad = np.asarray(output_grad, dtype=np.float64)
        if grad.shape != self._output_shape[microbatch_id]:
            raise ShapeMismatch(f"output gradient {grad.shape} does not match output {self._output_shape[microbatch_id]}")
        grad = self._round(grad)

        ac = self._stash_interval.pop(microbatch_id)
        del self._output_shape[microbatch_id]
        depth = len(self.layers)
        layer_grads: List[Optional[np.ndarray]] = [None] * depth

        for start in reversed(range(0, depth, ac)):
            stop = min(start + ac, depth)
            # rematerialise the segment from its checkpoint
            x = self.activation_stash.pop((microbatch_id, start))
            inputs, outputs = [], []
            for j in range(start, stop):
                inputs.append(x)
                x = self._layer_forward(j, x)
                outputs.append(x)
            self.peak_recompute_entries = max(self.peak_recompute_entries, len(outputs))

            for j in reversed(range(start, stop)):
                layer = self.layers[j]
                weights, _ = layer.working(self.mixed_precision)
                slope = _activation_slope(layer.activation, outputs[j - start])
                dz = grad if slope is None else grad * slope
                d_weights = self._round(dz.T @ inputs[j - start])
                d_bias = self._round(dz.sum(axis=0))
                grad = self._round(dz @ weights)
                layer_grads[j] = np.concatenate([d_weights.ravel(), d_bias])

        flat = np.concatenate(layer_grads)
        if microbatch_id in self._microbatch_grads:
            flat = self._round(self._microbatch_grads[microbatch_id] + flat)
        self._microbatch_grads[microbatch_id] = flat
        self.backward_count += 1
        return grad

    def zero_grad(self):
        self.grad_accumulator = np.zeros(self.parameter_count)
        self._microbatch_grads.clear()

    def finalize_gradients(self) -> np.ndarray:
        """Sum pending microbatch gradients into the accumulator in ascending microbatch order"""
        acc = self.grad_accumulator
        for microbatch_id in sorted(self._microbatch_grads):
            acc = self._round(acc + self._microbatch_grads[microbatch_id])
        self._microbatch_grads.clear()
        self.grad_accumulator = acc
        return acc

    def parameters(self) -> np.ndarray:
        return flatten_parameters(self.layers)

    def load_parameters(self, flat: np.ndarray):
        assign_parameters(self.layers, flat)
