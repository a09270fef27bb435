"""Small neural-network kernel: layers, losses, SGD and a parameter container.

Tensors are numpy arrays. Parameters are stored as float32 (or float64 for
gradient checks); every forward and backward pass computes in float64.

Layer shapes:
    dense      (N, in) -> (N, out); inputs with more axes are flattened
    conv1d     (N, C_in, L) -> (N, C_out, (L - k) // stride + 1), valid padding
    batchnorm  (N, C) or (N, C, L), statistics per channel
    relu       any shape
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from orewatch_errors import (ConfigError, DegenerateVectorError,
                             DimensionError, FormatError, LabelError,
                             StateError)

TRAIN = "train"
INFER = "infer"

CONTAINER_MAGIC = b"ORWN"
CONTAINER_VERSION = 1

KIND_TAGS = {"dense": 1, "conv1d": 2, "batchnorm": 3, "relu": 4}
TAG_KINDS = {tag: kind for kind, tag in KIND_TAGS.items()}


@dataclass
class Cache:
    """Activations saved by a forward pass for the matching backward pass."""

    owner: object
    mode: str
    data: tuple = ()


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = ""

    def __init__(self, name=""):
        self.name = name or self.kind

    def params(self):
        """Trainable parameters, name -> array (updated in place)."""
        return {}

    def buffers(self):
        """Non-trainable state that is still serialized."""
        return {}

    def dims(self):
        return ()

    def _check_cache(self, cache):
        if not isinstance(cache, Cache) or cache.owner is not self:
            raise StateError(f"{self.name}: backward given a cache from another layer")
        if cache.mode != TRAIN:
            raise StateError(f"{self.name}: backward needs a train-mode forward cache")

    def forward(self, x, mode=TRAIN):
        raise NotImplementedError

    def backward(self, grad, cache):
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng=None, name="", dtype=np.float32):
        super().__init__(name)
        if n_in < 1 or n_out < 1:
            raise DimensionError(f"{self.name}: dense dims must be >= 1, got {n_in}x{n_out}")
        self.n_in = n_in
        self.n_out = n_out
        rng = np.random.default_rng(0) if rng is None else rng
        self.weight = he_uniform(rng, (n_out, n_in), n_in, dtype)
        self.bias = np.zeros(n_out, dtype=dtype)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def dims(self):
        return (self.n_in, self.n_out)

    def forward(self, x, mode=TRAIN):
        x = np.asarray(x)
        flat = x.reshape(x.shape[0], -1).astype(np.float64, copy=False)
        if flat.shape[1] != self.n_in:
            raise DimensionError(
                f"{self.name}: dense expects {self.n_in} inputs, got shape {x.shape}"
            )
        out = flat @ self.weight.astype(np.float64).T + self.bias
        return out, Cache(self, mode, (x.shape, flat))

    def backward(self, grad, cache):
        self._check_cache(cache)
        in_shape, flat = cache.data
        grad = np.asarray(grad, dtype=np.float64)
        grads = {"weight": grad.T @ flat, "bias": grad.sum(axis=0)}
        dx = (grad @ self.weight.astype(np.float64)).reshape(in_shape)
        return dx, grads


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, kernel_length, in_channels, out_channels, stride=1, rng=None,
                 name="", dtype=np.float32):
        super().__init__(name)
        if min(kernel_length, in_channels, out_channels, stride) < 1:
            raise DimensionError(f"{self.name}: conv1d dims must all be >= 1")
        self.kernel_length = kernel_length
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = in_channels * kernel_length
        self.weight = he_uniform(rng, (out_channels, in_channels, kernel_length), fan_in, dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def dims(self):
        return (self.kernel_length, self.in_channels, self.out_channels, self.stride)

    def output_length(self, length):
        return (length - self.kernel_length) // self.stride + 1

    def forward(self, x, mode=TRAIN):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != self.in_channels or x.shape[2] < self.kernel_length:
            raise DimensionError(
                f"{self.name}: conv1d expects (N, {self.in_channels}, L>={self.kernel_length}),"
                f" got {x.shape}"
            )
        # (N, C_in, L_out, k)
        windows = sliding_window_view(x, self.kernel_length, axis=2)[:, :, ::self.stride, :]
        out = np.tensordot(windows, self.weight.astype(np.float64), axes=([1, 3], [1, 2]))
        out = out.transpose(0, 2, 1) + self.bias[None, :, None]
        return np.ascontiguousarray(out), Cache(self, mode, (x.shape, windows))

    def backward(self, grad, cache):
        self._check_cache(cache)
        in_shape, windows = cache.data
        grad = np.asarray(grad, dtype=np.float64)
        grads = {
            "weight": np.tensordot(grad, windows, axes=([0, 2], [0, 2])),
            "bias": grad.sum(axis=(0, 2)),
        }
        # (N, L_out, C_in, k)
        cols = np.tensordot(grad, self.weight.astype(np.float64), axes=([1], [0]))
        cols = cols.transpose(0, 2, 1, 3)
        dx = np.zeros(in_shape, dtype=np.float64)
        span = self.stride * (grad.shape[2] - 1) + 1
        for tap in range(self.kernel_length):
            dx[:, :, tap:tap + span:self.stride] += cols[:, :, :, tap]
        return dx, grads


class BatchNorm(Layer):
    """Per-channel normalisation with a learned scale and shift.

    Train mode normalises with batch statistics and updates the running
    statistics; infer mode uses the running statistics. A frozen layer
    uses its running statistics in both modes.
    """

    kind = "batchnorm"

    def __init__(self, channels, epsilon=1e-5, momentum=0.9, name="", dtype=np.float32):
        super().__init__(name)
        if channels < 1:
            raise DimensionError(f"{self.name}: batchnorm needs >= 1 channel")
        self.channels = channels
        self.epsilon = epsilon
        self.momentum = momentum
        self.frozen = False
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def dims(self):
        return (self.channels,)

    def _shape(self, x):
        if x.ndim not in (2, 3) or x.shape[1] != self.channels:
            raise DimensionError(
                f"{self.name}: batchnorm expects (N, {self.channels}[, L]), got {x.shape}"
            )
        axes = (0,) if x.ndim == 2 else (0, 2)
        view = (1, self.channels) if x.ndim == 2 else (1, self.channels, 1)
        return axes, view

    def forward(self, x, mode=TRAIN):
        x = np.asarray(x, dtype=np.float64)
        axes, view = self._shape(x)
        use_batch = mode == TRAIN and not self.frozen
        if use_batch:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1.0 - m) * mean
            self.running_var[...] = m * self.running_var + (1.0 - m) * var
        else:
            mean = self.running_mean.astype(np.float64)
            var = self.running_var.astype(np.float64)
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        x_hat = (x - mean.reshape(view)) * inv_std.reshape(view)
        out = self.gamma.astype(np.float64).reshape(view) * x_hat + self.beta.reshape(view)
        return out, Cache(self, mode, (x_hat, inv_std, axes, view, use_batch))

    def backward(self, grad, cache):
        self._check_cache(cache)
        x_hat, inv_std, axes, view, use_batch = cache.data
        grad = np.asarray(grad, dtype=np.float64)
        grads = {
            "gamma": (grad * x_hat).sum(axis=axes),
            "beta": grad.sum(axis=axes),
        }
        d_hat = grad * self.gamma.astype(np.float64).reshape(view)
        if not use_batch:
            return d_hat * inv_std.reshape(view), grads
        count = grad.size // self.channels
        dx = (
            count * d_hat
            - d_hat.sum(axis=axes, keepdims=True)
            - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True)
        ) * (inv_std.reshape(view) / count)
        return dx, grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode=TRAIN):
        x = np.asarray(x, dtype=np.float64)
        return np.maximum(x, 0.0), Cache(self, mode, (x > 0,))

    def backward(self, grad, cache):
        self._check_cache(cache)
        (active,) = cache.data
        return np.asarray(grad, dtype=np.float64) * active, {}


class Sequential:
    """An ordered stack of layers trained end to end."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, mode=TRAIN):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, mode)
            caches.append(cache)
        return x, caches

    def predict(self, x):
        out, _ = self.forward(x, INFER)
        return out

    def backward(self, grad, caches):
        """Backpropagate `grad` and return per-layer gradient dicts in layer order."""
        if len(caches) != len(self.layers):
            raise StateError(f"{len(caches)} caches for {len(self.layers)} layers")
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            grad, grads[i] = self.layers[i].backward(grad, caches[i])
        return grad, grads

    def parameters(self):
        return [array for layer in self.layers for array in layer.params().values()]

    @staticmethod
    def flatten_grads(grads):
        return [g for layer_grads in grads for g in layer_grads.values()]


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy over a batch.

    Args:
        logits: (N, C) scores, or a single (C,) vector
        labels: (N,) class indices, or a single index

    Returns:
        (loss, gradient with respect to logits, same shape as `logits`)
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != z.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    if np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise LabelError(f"labels must lie in [0, {z.shape[1]})")

    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_prob = shifted - log_norm
    rows = np.arange(z.shape[0])
    loss = -log_prob[rows, labels].mean()
    grad = np.exp(log_prob)
    grad[rows, labels] -= 1.0
    grad /= z.shape[0]
    return float(loss), (grad[0] if single else grad)


def cosine_sa_loss(output, target, eps=0.0):
    """Mean of 1 - cos(output, target) over a batch, with its gradient.

    Args:
        output: (N, D) or (D,) network output
        target: Same shape as output
        eps: Added to vector norms; 0 raises on zero-norm rows

    Returns:
        (loss in [0, 2], gradient with respect to output)
    """
    output = np.asarray(output, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if output.shape != target.shape:
        raise DimensionError(f"cosine loss of shapes {output.shape} and {target.shape}")
    single = output.ndim == 1
    y = output[None, :] if single else output
    t = target[None, :] if single else target

    norm_y = np.linalg.norm(y, axis=1, keepdims=True)
    norm_t = np.linalg.norm(t, axis=1, keepdims=True)
    if eps == 0.0 and (np.any(norm_y == 0) or np.any(norm_t == 0)):
        raise DegenerateVectorError("cosine loss of a zero-norm vector")
    norm_y = norm_y + eps
    norm_t = norm_t + eps

    dot = (y * t).sum(axis=1, keepdims=True)
    cosine = dot / (norm_y * norm_t)
    loss = float(np.mean(1.0 - cosine))
    d_cos = t / (norm_y * norm_t) - cosine * y / (norm_y * norm_y)
    grad = -d_cos / y.shape[0]
    return loss, (grad[0] if single else grad)


@dataclass
class OptimizerState:
    """Momentum SGD settings and one velocity buffer per parameter."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    velocities: list = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate {self.learning_rate} must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum {self.momentum} outside [0, 1)")


def sgd_step(params, grads, state):
    """One momentum step, in place: v = momentum*v - lr*g; p = p + v."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(grads)} gradients for {len(params)} parameters")
    if not state.velocities:
        state.velocities = [np.zeros(p.shape, dtype=np.float64) for p in params]
    for p, g, v in zip(params, grads, state.velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise DimensionError(f"parameter {p.shape}, gradient {g.shape}, velocity {v.shape}")
        v *= state.momentum
        v -= state.learning_rate * g
        p[...] = (p.astype(np.float64) + v).astype(p.dtype)
    return params


def numeric_gradient(f, x, eps=1e-3):
    """Central finite differences of scalar f with respect to array x (perturbed in place)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        upper = f()
        flat[i] = saved - eps
        lower = f()
        flat[i] = saved
        grad.reshape(-1)[i] = (upper - lower) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric):
    """Largest element-wise disagreement, scaled by the larger gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_layer_gradients(layer, x, rng, eps=1e-3):
    """Compare a layer's analytic gradients with finite differences.

    The scalar objective is sum(forward(x) * R) for a fixed random R.

    Returns:
        Dict of relative errors keyed by "input" and each parameter name
    """
    x = np.array(x, dtype=np.float64)
    out, _ = layer.forward(x, TRAIN)
    projection = rng.standard_normal(out.shape)

    def objective():
        y, _ = layer.forward(x, TRAIN)
        return float(np.sum(y * projection))

    _, cache = layer.forward(x, TRAIN)
    dx, grads = layer.backward(projection, cache)
    errors = {"input": relative_error(dx, numeric_gradient(objective, x, eps))}
    for name, array in layer.params().items():
        errors[name] = relative_error(grads[name], numeric_gradient(objective, array, eps))
    return errors


def write_network(network, path):
    """Serialize a Sequential's layers into the versioned binary container.

    Layout (little-endian): magic, u16 version, u32 layer count; then per
    layer a u8 kind tag, u32 dim count, u32 dims, for batchnorm two float64
    (epsilon, momentum), then float32 blocks in params()+buffers() order.
    """
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<HI", CONTAINER_VERSION, len(network.layers)))
        for layer in network.layers:
            dims = layer.dims()
            f.write(struct.pack("<BI", KIND_TAGS[layer.kind], len(dims)))
            f.write(struct.pack(f"<{len(dims)}I", *dims))
            if layer.kind == "batchnorm":
                f.write(struct.pack("<dd", layer.epsilon, layer.momentum))
            for array in list(layer.params().values()) + list(layer.buffers().values()):
                f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return path


def _build_layer(kind, dims, extra, name):
    if kind == "dense":
        return Dense(*dims, name=name)
    if kind == "conv1d":
        return Conv1d(*dims, name=name)
    if kind == "batchnorm":
        return BatchNorm(dims[0], epsilon=extra[0], momentum=extra[1], name=name)
    return ReLU(name=name)


def read_network(path):
    """Load a container written by write_network."""
    with open(path, "rb") as f:
        raw = f.read()

    offset = 0

    def take(size, what):
        nonlocal offset
        if offset + size > len(raw):
            raise FormatError(f"{path}: truncated while reading {what}", offset)
        chunk = raw[offset:offset + size]
        offset += size
        return chunk

    if take(len(CONTAINER_MAGIC), "magic") != CONTAINER_MAGIC:
        raise FormatError(f"{path}: not a parameter container", 0)
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}", 4)

    layers = []
    for index in range(count):
        tag_offset = offset
        tag, n_dims = struct.unpack("<BI", take(5, f"layer {index} tag"))
        if tag not in TAG_KINDS:
            raise FormatError(f"{path}: unknown layer kind tag {tag}", tag_offset)
        dims = struct.unpack(f"<{n_dims}I", take(4 * n_dims, f"layer {index} dims"))
        kind = TAG_KINDS[tag]
        extra = struct.unpack("<dd", take(16, "batchnorm settings")) if kind == "batchnorm" else ()
        try:
            layer = _build_layer(kind, dims, extra, f"{kind}{index}")
        except (TypeError, IndexError, DimensionError) as e:
            raise FormatError(f"{path}: bad dims {dims} for {kind}: {e}", tag_offset)
        for array in list(layer.params().values()) + list(layer.buffers().values()):
            block = take(4 * array.size, f"layer {index} parameters")
            array[...] = np.frombuffer(block, dtype="<f4").reshape(array.shape)
        layers.append(layer)

    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes", offset)
    return Sequential(layers)
