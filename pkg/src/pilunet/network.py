"""Layers and the fixed CIFAR CNN they assemble.

Five layer types feed a 32x32x3 image through five valid 3x3 convolutions
(16, 16, 32, 32, 64 filters), one 2x2 max-pool after the first activation,
global average pooling, dropout(0.5), a fully connected classifier, and a
softmax. Activation layers sit after every convolution and carry the
adaptive parameters.

Layers own their weights and the cache from the most recent forward call;
a model instance is single-writer during training.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .activations import (
    ActivationKind,
    ActivationSpec,
    SharingScheme,
    apply_activation,
    apply_activation_backward,
    branch_code,
    init_param_store,
)
from .tensor import Tensor, reduce_mean_spatial

CHECKPOINT_VERSION = 1


def glorot_normal(fan_in: int, fan_out: int, rng: np.random.Generator, shape=None, dtype=np.float64) -> Tensor:
    """Zero-mean normal samples with std sqrt(2 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fans must be positive")
    std = np.sqrt(2.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Layer:
    """Base layer: parameter lists are kept aligned with gradient lists."""

    name = "layer"

    def __init__(self):
        self.params: list[Tensor] = []
        self.grads: list[Tensor] = []
        self.param_names: list[str] = []

    def forward(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        raise NotImplementedError

    def backward(self, dy: Tensor) -> Tensor:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-example output shape given a per-example input shape."""
        return input_shape

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params)

    def zero_grads(self) -> None:
        for g in self.grads:
            g[...] = 0.0


class Conv2D(Layer):
    """Valid 3x3 cross-correlation with bias, stride 1, NHWC layout.

    Weights have shape (kh, kw, cin, cout); output spatial dims shrink by
    kernel size minus one.
    """

    name = "conv2d"

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, ksize: int = 3, dtype=np.float64):
        super().__init__()
        self.cin, self.cout, self.ksize = cin, cout, ksize
        fan_in = ksize * ksize * cin
        self.w = glorot_normal(fan_in, cout, rng, shape=(ksize, ksize, cin, cout), dtype=dtype)
        self.b = np.zeros(cout, dtype=dtype)
        self.params = [self.w, self.b]
        self.grads = [np.zeros_like(self.w), np.zeros_like(self.b)]
        self.param_names = ["w", "b"]
        self._cache = None

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if c != self.cin:
            raise ValueError(f"expected {self.cin} input channels, got {c}")
        k = self.ksize
        if h < k or w < k:
            raise ValueError(f"spatial dims {h}x{w} smaller than kernel {k}x{k}")
        return (h - k + 1, w - k + 1, self.cout)

    @staticmethod
    def _im2col(x: Tensor, k: int) -> Tensor:
        # (n, oh, ow, c, k, k) view -> (n*oh*ow, k*k*c) matrix in (kh, kw, c) order
        windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
        n, oh, ow = windows.shape[:3]
        cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, -1)
        return cols, (n, oh, ow)

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[3] != self.cin:
            raise ValueError(f"conv2d expected (n, h, w, {self.cin}) input, got {x.shape}")
        k = self.ksize
        cols, (n, oh, ow) = self._im2col(x, k)
        y = cols @ self.w.reshape(-1, self.cout) + self.b
        self._cache = (x, cols, (n, oh, ow))
        return y.reshape(n, oh, ow, self.cout)

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("conv2d backward called before forward")
        x, cols, (n, oh, ow) = self._cache
        if dy.shape != (n, oh, ow, self.cout):
            raise ValueError(f"stale cache: dy shape {dy.shape} != {(n, oh, ow, self.cout)}")
        k = self.ksize
        dy_flat = dy.reshape(n * oh * ow, self.cout)
        self.grads[0] += (cols.T @ dy_flat).reshape(self.w.shape)
        self.grads[1] += dy_flat.sum(axis=0)
        # dx is a valid correlation of the zero-padded dy with the kernel
        # flipped spatially and transposed in its channel axes.
        pad = k - 1
        dy_pad = np.pad(dy, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        w_flip = self.w[::-1, ::-1].transpose(0, 1, 3, 2)  # (k, k, cout, cin)
        cols_b, (_, ih, iw) = self._im2col(dy_pad, k)
        dx = (cols_b @ w_flip.reshape(-1, self.cin)).reshape(n, ih, iw, self.cin)
        return dx


class MaxPool2x2(Layer):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Gradient is routed to the argmax of each window; ties go to the lowest
    flat index so backward is deterministic.
    """

    name = "maxpool2x2"

    def __init__(self):
        super().__init__()
        self._cache = None

    def output_shape(self, input_shape):
        h, w, c = input_shape
        return (h // 2, w // 2, c)

    def forward(self, x, train=False, rng=None):
        n, h, w, c = x.shape
        oh, ow = h // 2, w // 2
        cropped = x[:, : 2 * oh, : 2 * ow, :]
        windows = cropped.reshape(n, oh, 2, ow, 2, c).transpose(0, 1, 3, 5, 2, 4)
        flat = windows.reshape(n, oh, ow, c, 4)
        argmax = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, argmax)
        return y

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("maxpool backward called before forward")
        in_shape, argmax = self._cache
        n, h, w, c = in_shape
        oh, ow = h // 2, w // 2
        flat = np.zeros((n, oh, ow, c, 4), dtype=dy.dtype)
        np.put_along_axis(flat, argmax[..., None], dy[..., None], axis=-1)
        windows = flat.reshape(n, oh, ow, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(in_shape, dtype=dy.dtype)
        dx[:, : 2 * oh, : 2 * ow, :] = windows.reshape(n, 2 * oh, 2 * ow, c)
        return dx


class Activation(Layer):
    """Adaptive (or fixed) activation with a parameter sharing scheme."""

    name = "activation"

    def __init__(self, spec: ActivationSpec, feature_shape: tuple[int, ...], dtype=np.float64):
        super().__init__()
        self.spec = spec
        self.feature_shape = feature_shape
        self.store = init_param_store(spec, feature_shape, dtype=dtype)
        if spec.trainable and self.store.size > 0:
            self.params = [self.store]
            self.grads = [np.zeros_like(self.store)]
            self.param_names = ["activation"]
        self._cache = None

    def forward(self, x, train=False, rng=None):
        y, self._cache = apply_activation(x, self.spec, self.store)
        return y

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("activation backward called before forward")
        dx, dparams = apply_activation_backward(dy, self._cache, self.spec)
        if self.params:
            self.grads[0] += dparams
        return dx

    def branch_signature(self, x) -> Tensor:
        return branch_code(x, self.spec, self.store)

    def project(self) -> None:
        # DoubleReLU's dead-zone half-width must stay nonnegative.
        if self.spec.kind is ActivationKind.DOUBLE_RELU and self.params:
            np.maximum(self.store[0], 0.0, out=self.store[0])


class GlobalAvgPool(Layer):
    """Spatial mean per channel: (n, h, w, c) -> (n, c)."""

    name = "global_avg_pool"

    def __init__(self):
        super().__init__()
        self._cache = None

    def output_shape(self, input_shape):
        h, w, c = input_shape
        return (c,)

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return reduce_mean_spatial(x)

    def backward(self, dy):
        n, h, w, c = self._cache
        return np.broadcast_to(dy[:, None, None, :] / (h * w), (n, h, w, c)).astype(dy.dtype)


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-p); eval is identity."""

    name = "dropout"

    def __init__(self, p: float = 0.5):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._mask = None

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout requires an rng stream")
        keep = 1.0 - self.p
        self._mask = (rng.random(x.shape) >= self.p).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


class Dense(Layer):
    """Fully connected layer: y = x @ w + b."""

    name = "dense"

    def __init__(self, u_in: int, u_out: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.u_in, self.u_out = u_in, u_out
        self.w = glorot_normal(u_in, u_out, rng, dtype=dtype)
        self.b = np.zeros(u_out, dtype=dtype)
        self.params = [self.w, self.b]
        self.grads = [np.zeros_like(self.w), np.zeros_like(self.b)]
        self.param_names = ["w", "b"]
        self._cache = None

    def output_shape(self, input_shape):
        (u,) = input_shape
        if u != self.u_in:
            raise ValueError(f"expected {self.u_in} input units, got {u}")
        return (self.u_out,)

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.u_in:
            raise ValueError(f"dense expected (n, {self.u_in}) input, got {x.shape}")
        self._cache = x
        return x @ self.w + self.b

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("dense backward called before forward")
        x = self._cache
        self.grads[0] += x.T @ dy
        self.grads[1] += dy.sum(axis=0)
        return dy @ self.w.T


class Softmax(Layer):
    """Row softmax with max-subtraction for numerical stability."""

    name = "softmax"

    def __init__(self):
        super().__init__()
        self._probs = None

    def forward(self, x, train=False, rng=None):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self._probs = e / e.sum(axis=1, keepdims=True)
        return self._probs

    def backward(self, dy):
        if self._probs is None:
            raise RuntimeError("softmax backward called before forward")
        p = self._probs
        return p * (dy - (dy * p).sum(axis=1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    """Functional softmax over the last axis of a (n, k) tensor."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ParamRef:
    """One registered parameter tensor with a stable, readable name."""

    name: str
    layer: Layer
    index: int

    @property
    def values(self) -> Tensor:
        return self.layer.params[self.index]

    @property
    def grad(self) -> Tensor:
        return self.layer.grads[self.index]


class Model:
    """Ordered layer list with a flat, stably ordered parameter registry."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...], config: dict | None = None):
        self.layers = layers
        self.input_shape = input_shape
        self.config = config or {}
        self.registry: list[ParamRef] = []
        for li, layer in enumerate(layers):
            for pi, pname in enumerate(layer.param_names):
                self.registry.append(ParamRef(f"layer{li}.{layer.name}.{pname}", layer, pi))

    def forward(self, x: Tensor, train: bool = False, rng=None, branch_sink: list | None = None) -> Tensor:
        for layer in self.layers:
            if branch_sink is not None and isinstance(layer, Activation):
                branch_sink.append(layer.branch_signature(x))
            x = layer.forward(x, train=train, rng=rng)
        return x

    def backward(self, dprobs: Tensor) -> Tensor:
        dy = dprobs
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.zero_grads()

    def project_params(self) -> None:
        for layer in self.layers:
            if isinstance(layer, Activation):
                layer.project()

    def predict(self, x: Tensor) -> Tensor:
        return self.forward(x, train=False).argmax(axis=1)

    @property
    def output_dense(self) -> Dense:
        for layer in reversed(self.layers):
            if isinstance(layer, Dense):
                return layer
        raise ValueError("model has no dense layer")

    def shape_chain(self) -> list[tuple[int, ...]]:
        """Per-example shapes from input through every layer."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    def summary(self) -> str:
        """Architecture table: layer, output size, parameter count."""
        lines = [f"{'Layer':<28}{'Output size':<16}{'Parameters':>12}"]
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            size = "x".join(str(d) for d in shape)
            lines.append(f"{layer.name:<28}{size:<16}{layer.param_count():>12,}")
        lines.append(f"{'total':<44}{count_parameters(self):>12,}")
        return "\n".join(lines)

    def save(self, path: str) -> None:
        """Write a self-describing checkpoint that round-trips bit-exactly."""
        arrays = {f"param_{i:03d}": ref.values for i, ref in enumerate(self.registry)}
        header = {
            "version": CHECKPOINT_VERSION,
            "config": self.config,
            "names": [ref.name for ref in self.registry],
        }
        with open(path, "wb") as fh:
            np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)

    def load(self, path: str) -> None:
        """Restore parameters saved by :meth:`save` into this model."""
        with np.load(path) as data:
            header = json.loads(bytes(data["header"]))
            if header["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header['version']}")
            names = header["names"]
            if names != [ref.name for ref in self.registry]:
                raise ValueError("checkpoint parameter registry does not match model")
            for i, ref in enumerate(self.registry):
                ref.values[...] = data[f"param_{i:03d}"]


def count_parameters(model: Model) -> int:
    return sum(int(ref.values.size) for ref in model.registry)


CIFAR_INPUT_SHAPE = (32, 32, 3)
CONV_FILTERS = (16, 16, 32, 32, 64)


def build_cifar_cnn(
    num_classes: int,
    kind: ActivationKind = ActivationKind.RELU,
    scheme: SharingScheme = SharingScheme.CHANNEL_WISE,
    seed: int = 0,
    rng: np.random.Generator | None = None,
    dtype=np.float64,
    activation_init: tuple[float, ...] | None = None,
) -> Model:
    """Assemble the fixed CIFAR architecture with the requested activation.

    The layer stack is conv(16) act pool conv(16) act conv(32) act conv(32)
    act conv(64) act gap dropout dense softmax, all convs 3x3 valid. Only
    the activation kind/scheme and the classifier width vary.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    spec = ActivationSpec(kind=kind, scheme=scheme, init=activation_init)

    layers: list[Layer] = []
    shape = CIFAR_INPUT_SHAPE
    cin = shape[-1]
    for i, cout in enumerate(CONV_FILTERS):
        conv = Conv2D(cin, cout, rng, dtype=dtype)
        shape = conv.output_shape(shape)
        layers.append(conv)
        layers.append(Activation(spec, shape, dtype=dtype))
        if i == 0:
            pool = MaxPool2x2()
            shape = pool.output_shape(shape)
            layers.append(pool)
        cin = cout
    layers.append(GlobalAvgPool())
    shape = (shape[-1],)
    layers.append(Dropout(0.5))
    layers.append(Dense(shape[0], num_classes, rng, dtype=dtype))
    layers.append(Softmax())

    config = {
        "num_classes": num_classes,
        "activation": kind.value,
        "scheme": scheme.value,
        "dtype": np.dtype(dtype).name,
    }
    return Model(layers, CIFAR_INPUT_SHAPE, config=config)
