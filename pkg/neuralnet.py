"""
Convolutional encoder-decoder written directly on numpy, with hand-written
backward passes, a mean-squared-error objective, Adam, and a binary
checkpoint format.

Arrays are NCHW. Parameters default to float32; building with float64 gives
the headroom finite-difference checks need.
"""

import hashlib
import json
import logging
import math
import struct
from pathlib import Path
from typing import Annotated, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import CheckpointError, NumericalError, ShapeError, SpecError, TrainingDivergedError

# Configure logging
logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"QNET0001"
CHECKPOINT_FAMILY = b"QNET"
CHECKPOINT_DTYPES = {"float32": "<f4", "float64": "<f8"}
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 2


class ConvSpec(BaseModel):
    kind: Literal["conv"] = "conv"
    out_channels: int = Field(ge=1)
    kernel: int = Field(3, ge=1)
    batch_norm: bool = True
    relu: bool = True


class PoolSpec(BaseModel):
    kind: Literal["pool"] = "pool"


class DeconvSpec(BaseModel):
    """2x2 transposed convolution with stride 2, linear."""

    kind: Literal["deconv"] = "deconv"
    out_channels: int = Field(ge=1)


LayerSpec = Annotated[Union[ConvSpec, PoolSpec, DeconvSpec], Field(discriminator="kind")]


class NetworkSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input_h: int = Field(ge=1)
    input_w: int = Field(ge=1)
    input_channels: int = Field(1, ge=1)
    layers: List[LayerSpec]


def encoder_decoder_spec(
    input_h: int, input_w: int, widths: Sequence[int] = (32, 64, 128)
) -> NetworkSpec:
    """
    VGG-style encoder and deconvolution decoder without skip connections.

    Eleven convolutions (the first 5x5, the last a 1x1 linear projection),
    three max-pools and three transposed convolutions. Output dims equal input dims.

    Args:
        input_h: Input height, divisible by 8
        input_w: Input width, divisible by 8
        widths: Channel widths of the three encoder stages
    """
    w1, w2, w3 = widths
    layers: List[BaseModel] = [
        ConvSpec(out_channels=w1, kernel=5),
        ConvSpec(out_channels=w1),
        PoolSpec(),
        ConvSpec(out_channels=w2),
        ConvSpec(out_channels=w2),
        PoolSpec(),
        ConvSpec(out_channels=w3),
        ConvSpec(out_channels=w3),
        ConvSpec(out_channels=w3),
        PoolSpec(),
    ]
    for width in (w3, w2, w1):
        layers += [DeconvSpec(out_channels=width), ConvSpec(out_channels=width)]
    layers.append(ConvSpec(out_channels=1, kernel=1, batch_norm=False, relu=False))
    spec = NetworkSpec(input_h=input_h, input_w=input_w, layers=layers)
    check_spec(spec)
    return spec


def check_spec(spec: NetworkSpec) -> Tuple[int, int, int]:
    """Trace shapes through the spec; returns the output (channels, h, w)."""
    c, h, w = spec.input_channels, spec.input_h, spec.input_w
    for index, layer in enumerate(spec.layers):
        if isinstance(layer, ConvSpec):
            if layer.kernel % 2 == 0:
                raise SpecError(f"layer {index}: convolution kernel {layer.kernel} must be odd")
            c = layer.out_channels
        elif isinstance(layer, PoolSpec):
            if h % 2 or w % 2:
                raise SpecError(f"layer {index}: cannot max-pool odd dims {h}x{w}")
            h, w = h // 2, w // 2
        else:
            c, h, w = layer.out_channels, h * 2, w * 2
    if (h, w) != (spec.input_h, spec.input_w):
        raise SpecError(f"network maps {spec.input_h}x{spec.input_w} to {h}x{w}; dims must be preserved")
    if c != 1:
        raise SpecError(f"network must end in a single output channel, got {c}")
    return c, h, w


def parameter_count(spec: NetworkSpec) -> int:
    count = 0
    c = spec.input_channels
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            count += layer.kernel * layer.kernel * c * layer.out_channels + layer.out_channels
            if layer.batch_norm:
                count += 2 * layer.out_channels
            c = layer.out_channels
        elif isinstance(layer, DeconvSpec):
            count += 4 * c * layer.out_channels + layer.out_channels
            c = layer.out_channels
    return count


class Layer:
    """Base layer: ordered params/grads dicts and named buffers."""

    name = "layer"

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def switch_state(self):
        """Discrete state that finite differences must not cross (ReLU masks, pool winners)."""
        return None


class Conv2D(Layer):
    name = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator, dtype):
        super().__init__()
        bound = math.sqrt(6.0 / (in_channels * kernel * kernel))
        self.kernel = kernel
        self.params["weight"] = rng.uniform(-bound, bound, (out_channels, in_channels, kernel, kernel)).astype(dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self._padded = None

    def _windows(self, padded: np.ndarray) -> np.ndarray:
        return sliding_window_view(padded, (self.kernel, self.kernel), axis=(2, 3))

    def forward(self, x, training):
        p = self.kernel // 2
        self._padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        out = np.tensordot(self._windows(self._padded), self.params["weight"], axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2) + self.params["bias"][None, :, None, None]

    def backward(self, dout):
        weight = self.params["weight"]
        k, p = self.kernel, self.kernel // 2
        windows = self._windows(self._padded)
        self.grads["weight"] = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
        self.grads["bias"] = dout.sum(axis=(0, 2, 3))
        n, _, h, w = dout.shape
        dpadded = np.zeros_like(self._padded)
        for i in range(k):
            for j in range(k):
                contribution = np.tensordot(weight[:, :, i, j], dout, axes=([0], [1]))
                dpadded[:, :, i:i + h, j:j + w] += contribution.transpose(1, 0, 2, 3)
        return dpadded[:, :, p:p + h, p:p + w]


class BatchNorm2D(Layer):
    name = "batchnorm"

    def __init__(self, channels: int, dtype):
        super().__init__()
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x, training):
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * m / max(m - 1, 1)
            self.buffers["running_mean"] = ((1 - BN_MOMENTUM) * self.buffers["running_mean"] + BN_MOMENTUM * mean).astype(x.dtype)
            self.buffers["running_var"] = ((1 - BN_MOMENTUM) * self.buffers["running_var"] + BN_MOMENTUM * unbiased).astype(x.dtype)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std)
        return self.params["gamma"][None, :, None, None] * xhat + self.params["beta"][None, :, None, None]

    def backward(self, dout):
        xhat, inv_std = self._cache
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        self.grads["gamma"] = (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.params["gamma"][None, :, None, None]
        total = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        weighted = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (inv_std[None, :, None, None] / m) * (m * dxhat - total - xhat * weighted)


class ReLU(Layer):
    name = "relu"

    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x, training):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype)

    def backward(self, dout):
        return np.where(self._mask, dout, 0).astype(dout.dtype)

    def switch_state(self):
        return self._mask


class MaxPool2D(Layer):
    """2x2 max-pool, stride 2; ties go to the first maximum."""

    name = "maxpool"

    def __init__(self):
        super().__init__()
        self._onehot = None

    def forward(self, x, training):
        n, c, h, w = x.shape
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        winner = blocks.argmax(axis=-1)
        self._onehot = np.eye(4, dtype=x.dtype)[winner]
        return np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        n, c, h2, w2 = dout.shape
        blocks = self._onehot * dout[..., None]
        return blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)

    def switch_state(self):
        return self._onehot


class ConvTranspose2D(Layer):
    name = "deconv"

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, dtype):
        super().__init__()
        # every output pixel receives exactly one tap per input channel
        bound = math.sqrt(6.0 / in_channels)
        self.params["weight"] = rng.uniform(-bound, bound, (in_channels, out_channels, 2, 2)).astype(dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self._input = None

    def forward(self, x, training):
        self._input = x
        n, _, h, w = x.shape
        out = np.einsum("nchw,coij->nohiwj", x, self.params["weight"], optimize=True)
        out = out.reshape(n, out.shape[1], 2 * h, 2 * w)
        return out + self.params["bias"][None, :, None, None]

    def backward(self, dout):
        n, o, h2, w2 = dout.shape
        d6 = dout.reshape(n, o, h2 // 2, 2, w2 // 2, 2)
        self.grads["weight"] = np.einsum("nchw,nohiwj->coij", self._input, d6, optimize=True)
        self.grads["bias"] = dout.sum(axis=(0, 2, 3))
        return np.einsum("nohiwj,coij->nchw", d6, self.params["weight"], optimize=True)


class Network:
    """Sequential stack of layers built from a NetworkSpec."""

    def __init__(self, spec: NetworkSpec, layers: List[Layer], dtype):
        self.spec = spec
        self.layers = layers
        self.dtype = np.dtype(dtype)
        self.metadata: Dict = {}
        self._output: Optional[np.ndarray] = None

    def named_parameters(self) -> List[Tuple[int, str, np.ndarray]]:
        return [(i, name, p) for i, layer in enumerate(self.layers) for name, p in layer.params.items()]

    def named_buffers(self) -> List[Tuple[int, str, np.ndarray]]:
        return [(i, name, b) for i, layer in enumerate(self.layers) for name, b in layer.buffers.items()]

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        x = np.asarray(x)
        expected = (self.spec.input_channels, self.spec.input_h, self.spec.input_w)
        if x.ndim != 4 or x.shape[1:] != expected or x.shape[0] < 1:
            raise ShapeError(f"input shape {x.shape} does not match (N, {expected[0]}, {expected[1]}, {expected[2]})")
        out = x.astype(self.dtype, copy=False)
        for index, layer in enumerate(self.layers):
            out = layer.forward(out, training)
            if not np.all(np.isfinite(out)):
                raise NumericalError(f"non-finite activations after layer {index} ({layer.name})", layer_index=index)
        self._output = out
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        grad = dout.astype(self.dtype, copy=False)
        for index in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[index]
            grad = layer.backward(grad)
            finite = np.all(np.isfinite(grad)) and all(np.all(np.isfinite(g)) for g in layer.grads.values())
            if not finite:
                raise NumericalError(f"non-finite gradients in layer {index} ({layer.name})", layer_index=index)
        return grad

    def switch_states(self) -> List[np.ndarray]:
        return [s for s in (layer.switch_state() for layer in self.layers) if s is not None]


def build_network(spec: NetworkSpec, init_seed: int, dtype=np.float32) -> Network:
    """
    Instantiate a spec with He-uniform weights, zero biases and identity batch-norm.

    Args:
        spec: Network description
        init_seed: Seed of the initialisation stream
        dtype: Parameter and activation dtype
    """
    check_spec(spec)
    rng = np.random.default_rng(init_seed)
    layers: List[Layer] = []
    c = spec.input_channels
    for layer_spec in spec.layers:
        if isinstance(layer_spec, ConvSpec):
            layers.append(Conv2D(c, layer_spec.out_channels, layer_spec.kernel, rng, dtype))
            if layer_spec.batch_norm:
                layers.append(BatchNorm2D(layer_spec.out_channels, dtype))
            if layer_spec.relu:
                layers.append(ReLU())
            c = layer_spec.out_channels
        elif isinstance(layer_spec, PoolSpec):
            layers.append(MaxPool2D())
        else:
            layers.append(ConvTranspose2D(c, layer_spec.out_channels, rng, dtype))
            c = layer_spec.out_channels
    network = Network(spec, layers, dtype)
    logger.debug(f"Built network with {parameter_count(spec)} parameters in {len(layers)} layers")
    return network


def forward(network: Network, inputs: np.ndarray, training: bool = False) -> np.ndarray:
    return network.forward(inputs, training)


def mse_loss(predicted: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error over every pixel of every sample, accumulated in float64."""
    if predicted.shape != target.shape:
        raise ShapeError(f"prediction shape {predicted.shape} does not match target {target.shape}")
    diff = predicted.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(diff * diff))


def mse_gradient(predicted: np.ndarray, target: np.ndarray) -> np.ndarray:
    if predicted.shape != target.shape:
        raise ShapeError(f"prediction shape {predicted.shape} does not match target {target.shape}")
    diff = predicted.astype(np.float64) - target.astype(np.float64)
    return (2.0 * diff / diff.size).astype(predicted.dtype)


def backward(network: Network, targets: np.ndarray) -> List[Dict[str, np.ndarray]]:
    """Back-propagate the MSE of the last forward pass against targets."""
    if network._output is None:
        raise NumericalError("backward called before forward")
    network.backward(mse_gradient(network._output, targets))
    return [dict(layer.grads) for layer in network.layers]


def predict(network: Network, inputs: np.ndarray, batch_size: int = 32) -> np.ndarray:
    outputs = [
        network.forward(inputs[start:start + batch_size], training=False)
        for start in range(0, len(inputs), batch_size)
    ]
    return np.concatenate(outputs, axis=0)


def flatten_parameters(network: Network) -> np.ndarray:
    params = [p.ravel() for _, _, p in network.named_parameters()]
    return np.concatenate(params) if params else np.zeros(0, dtype=network.dtype)


def assign_parameters(network: Network, blob: np.ndarray) -> None:
    blob = np.asarray(blob).ravel()
    expected = sum(p.size for _, _, p in network.named_parameters())
    if blob.size != expected:
        raise ShapeError(f"parameter blob holds {blob.size} values, network needs {expected}")
    offset = 0
    for index, name, p in network.named_parameters():
        network.layers[index].params[name] = blob[offset:offset + p.size].reshape(p.shape).astype(network.dtype)
        offset += p.size


def _flatten_buffers(network: Network) -> np.ndarray:
    buffers = [b.ravel() for _, _, b in network.named_buffers()]
    return np.concatenate(buffers) if buffers else np.zeros(0, dtype=network.dtype)


def _assign_buffers(network: Network, blob: np.ndarray) -> None:
    offset = 0
    for index, name, b in network.named_buffers():
        network.layers[index].buffers[name] = blob[offset:offset + b.size].reshape(b.shape).astype(network.dtype)
        offset += b.size


class Adam:
    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: Dict[Tuple[int, str], np.ndarray] = {}
        self.v: Dict[Tuple[int, str], np.ndarray] = {}

    def step(self, network: Network) -> None:
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for index, name, p in network.named_parameters():
            key = (index, name)
            grad = network.layers[index].grads[name]
            m = self.m.get(key, np.zeros_like(p))
            v = self.v.get(key, np.zeros_like(p))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.m[key], self.v[key] = m.astype(p.dtype), v.astype(p.dtype)
            update = self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            network.layers[index].params[name] = (p - update).astype(p.dtype)

    def flat_moments(self, network: Network) -> Tuple[np.ndarray, np.ndarray]:
        m, v = [], []
        for index, name, p in network.named_parameters():
            m.append(self.m.get((index, name), np.zeros_like(p)).ravel())
            v.append(self.v.get((index, name), np.zeros_like(p)).ravel())
        return np.concatenate(m), np.concatenate(v)

    def load_moments(self, network: Network, m: np.ndarray, v: np.ndarray, step_count: int) -> None:
        self.step_count = step_count
        offset = 0
        for index, name, p in network.named_parameters():
            self.m[(index, name)] = m[offset:offset + p.size].reshape(p.shape).astype(p.dtype)
            self.v[(index, name)] = v[offset:offset + p.size].reshape(p.shape).astype(p.dtype)
            offset += p.size


class TrainingHistory(BaseModel):
    epochs: int
    learning_rate: float
    batch_size: int
    seed: int
    loss_history: List[float]


def train(
    network: Network,
    inputs: np.ndarray,
    targets: np.ndarray,
    epochs: int,
    batch_size: int,
    learning_rate: float = 1e-3,
    seed: int = 0,
    optimizer: Optional[Adam] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainingHistory:
    """
    Mini-batch Adam training on the MSE objective.

    Args:
        network: Network to update in place
        inputs: (N, C, H, W) intensity maps
        targets: (N, 1, H, W) phase-correction maps
        epochs: Number of passes over the data
        batch_size: Samples per update
        learning_rate: Adam step size
        seed: Seed of the per-epoch shuffling stream
        optimizer: Existing optimizer to continue from
        on_epoch: Callback receiving (epoch, mean loss)

    Raises:
        TrainingDivergedError: loss above 10x the first epoch's for 2 consecutive epochs
    """
    if epochs < 1 or batch_size < 1 or learning_rate < 0:
        raise SpecError(f"invalid hyperparameters: epochs={epochs}, batch_size={batch_size}, lr={learning_rate}")
    if len(inputs) != len(targets) or len(inputs) == 0:
        raise ShapeError(f"need matching non-empty inputs/targets, got {len(inputs)} and {len(targets)}")
    optimizer = optimizer or Adam(learning_rate)
    optimizer.learning_rate = learning_rate
    rng = np.random.default_rng(seed)
    history: List[float] = []
    initial = None
    strikes = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(inputs))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            output = network.forward(inputs[batch], training=True)
            total += mse_loss(output, targets[batch]) * len(batch)
            backward(network, targets[batch])
            optimizer.step(network)
        loss = total / len(order)
        history.append(loss)
        logger.info(f"Epoch {epoch}/{epochs}: train loss {loss:.6f}")
        if on_epoch is not None:
            on_epoch(epoch, loss)
        if initial is None:
            initial = loss
        strikes = strikes + 1 if loss > DIVERGENCE_FACTOR * initial else 0
        if strikes >= DIVERGENCE_PATIENCE:
            raise TrainingDivergedError(
                f"training diverged: loss {loss:.4g} exceeded {DIVERGENCE_FACTOR}x the initial "
                f"{initial:.4g} for {DIVERGENCE_PATIENCE} epochs (history {history})"
            )
    return TrainingHistory(
        epochs=epochs, learning_rate=learning_rate, batch_size=batch_size, seed=seed, loss_history=history
    )


class GradientCheckReport(BaseModel):
    max_relative_error: float
    checked: int
    skipped: int
    worst: str = ""


def gradient_check(
    network: Network,
    inputs: np.ndarray,
    targets: np.ndarray,
    eps: float = 1e-3,
    max_entries: int = 64,
    seed: int = 0,
    check_inputs: bool = False,
    floor: float = 1e-6,
) -> GradientCheckReport:
    """
    Compare analytic gradients with central finite differences of the MSE loss.

    Entries whose perturbation flips a ReLU mask or a max-pool winner are
    skipped; the loss is not differentiable there.

    Args:
        network: Network, ideally built with float64
        inputs: Batch of inputs
        targets: Matching targets
        eps: Finite-difference step
        max_entries: Entries sampled per parameter tensor
        seed: Seed selecting the sampled entries
        check_inputs: Also check the gradient with respect to the inputs
        floor: Magnitude below which errors are measured absolutely
    """
    rng = np.random.default_rng(seed)
    inputs = np.asarray(inputs, dtype=network.dtype)
    saved_buffers = _flatten_buffers(network)
    output = network.forward(inputs, training=True)
    input_grad = network.backward(mse_gradient(output, targets))
    baseline = [s.copy() for s in network.switch_states()]
    analytic = {(i, n): network.layers[i].grads[n].copy() for i, n, _ in network.named_parameters()}

    def loss_at() -> Tuple[float, bool]:
        value = mse_loss(network.forward(inputs, training=True), targets)
        crossed = any(not np.array_equal(a, b) for a, b in zip(baseline, network.switch_states()))
        return value, crossed

    targets_to_check: List[Tuple[str, np.ndarray, np.ndarray]] = [
        (f"layer {i} {n}", network.layers[i].params[n], analytic[(i, n)]) for i, n, _ in network.named_parameters()
    ]
    if check_inputs:
        targets_to_check.append(("input", inputs, input_grad))

    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    for name, array, grad in targets_to_check:
        flat = array.reshape(-1)
        picks = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
        for k in picks:
            original = flat[k]
            flat[k] = original + eps
            plus, crossed_plus = loss_at()
            flat[k] = original - eps
            minus, crossed_minus = loss_at()
            flat[k] = original
            if crossed_plus or crossed_minus:
                skipped += 1
                continue
            numeric = (plus - minus) / (2.0 * eps)
            exact = float(grad.reshape(-1)[k])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            checked += 1
            if error > worst:
                worst, worst_name = error, f"{name}[{k}]"
    _assign_buffers(network, saved_buffers)
    return GradientCheckReport(max_relative_error=worst, checked=checked, skipped=skipped, worst=worst_name)


_COUNT = struct.Struct("<Q")
_LENGTH = struct.Struct("<I")


def save_checkpoint(
    network: Network,
    path: Union[str, Path],
    optimizer: Optional[Adam] = None,
    metadata: Optional[Dict] = None,
) -> None:
    """
    Write a QNET0001 checkpoint.

    Layout: magic, u32 header length, JSON header (spec, parameter offsets,
    metadata), u64 count + parameters, u64 count + buffers, u8 Adam flag
    [+ u64 step, m, v], SHA-256 of all preceding bytes. Floats are little-endian
    in the network dtype named by the header (float32 or float64).
    """
    dtype_name = network.dtype.name
    if dtype_name not in CHECKPOINT_DTYPES:
        raise CheckpointError(f"cannot checkpoint a {dtype_name} network")
    wire = CHECKPOINT_DTYPES[dtype_name]
    offsets = []
    position = 0
    for index, name, p in network.named_parameters():
        offsets.append({"layer": index, "name": name, "offset": position, "shape": list(p.shape)})
        position += p.size
    header = {
        "spec": network.spec.model_dump(mode="json"),
        "offsets": offsets,
        "metadata": metadata if metadata is not None else network.metadata,
        "dtype": dtype_name,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    params = flatten_parameters(network).astype(wire)
    buffers = _flatten_buffers(network).astype(wire)
    parts = [
        CHECKPOINT_MAGIC,
        _LENGTH.pack(len(header_bytes)),
        header_bytes,
        _COUNT.pack(params.size),
        params.tobytes(),
        _COUNT.pack(buffers.size),
        buffers.tobytes(),
    ]
    if optimizer is not None:
        m, v = optimizer.flat_moments(network)
        parts += [b"\x01", _COUNT.pack(optimizer.step_count), m.astype(wire).tobytes(), v.astype(wire).tobytes()]
    else:
        parts.append(b"\x00")
    body = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    logger.info(f"Saved checkpoint {path} ({params.size} {dtype_name} parameters)")


class _Reader:
    def __init__(self, data: bytes, wire: str = "<f4"):
        self.data = data
        self.pos = 0
        self.wire = np.dtype(wire)

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(self.wire.itemsize * count), dtype=self.wire).astype(self.wire.type)


def _read_checkpoint(path: Union[str, Path]) -> Tuple[Network, Optional[Adam]]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    if len(data) < len(CHECKPOINT_MAGIC) + 32:
        raise CheckpointError(f"checkpoint {path} is truncated")
    magic = data[:8]
    if magic != CHECKPOINT_MAGIC:
        if magic.startswith(CHECKPOINT_FAMILY):
            raise CheckpointError(f"unsupported checkpoint version {magic[4:]!r}")
        raise CheckpointError(f"{path} is not a checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checkpoint {path} failed its digest check")

    reader = _Reader(body)
    reader.take(8)
    (header_len,) = _LENGTH.unpack(reader.take(4))
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
        spec = NetworkSpec.model_validate(header["spec"])
    except (ValueError, KeyError, ValidationError) as e:
        raise CheckpointError(f"checkpoint header is invalid: {e}")

    dtype_name = header.get("dtype", "float32")
    if dtype_name not in CHECKPOINT_DTYPES:
        raise CheckpointError(f"checkpoint dtype {dtype_name!r} is not supported")
    reader.wire = np.dtype(CHECKPOINT_DTYPES[dtype_name])
    network = build_network(spec, 0, np.dtype(dtype_name))
    (n_params,) = _COUNT.unpack(reader.take(8))
    if n_params != parameter_count(spec):
        raise CheckpointError(f"checkpoint holds {n_params} parameters, spec requires {parameter_count(spec)}")
    assign_parameters(network, reader.floats(n_params))
    (n_buffers,) = _COUNT.unpack(reader.take(8))
    if n_buffers != _flatten_buffers(network).size:
        raise CheckpointError(f"checkpoint holds {n_buffers} buffer values, network has {_flatten_buffers(network).size}")
    _assign_buffers(network, reader.floats(n_buffers))
    network.metadata = header.get("metadata") or {}

    optimizer = None
    if reader.take(1) == b"\x01":
        (step,) = _COUNT.unpack(reader.take(8))
        m = reader.floats(n_params)
        v = reader.floats(n_params)
        optimizer = Adam(learning_rate=float(network.metadata.get("learning_rate", 1e-3)))
        optimizer.load_moments(network, m, v, step)
    if reader.pos != len(body):
        raise CheckpointError(f"checkpoint {path} has {len(body) - reader.pos} trailing bytes")
    return network, optimizer


def load_checkpoint(path: Union[str, Path], input_shape: Optional[Tuple[int, int]] = None) -> Network:
    """
    Load a checkpoint written by save_checkpoint.

    Args:
        path: Checkpoint file
        input_shape: Expected (H, W); a different spec input raises SpecError
    """
    network, _ = _read_checkpoint(path)
    if input_shape is not None and (network.spec.input_h, network.spec.input_w) != tuple(input_shape):
        raise SpecError(
            f"checkpoint expects {network.spec.input_h}x{network.spec.input_w} inputs, data is "
            f"{input_shape[0]}x{input_shape[1]}"
        )
    return network


def load_optimizer(path: Union[str, Path]) -> Optional[Adam]:
    _, optimizer = _read_checkpoint(path)
    return optimizer
