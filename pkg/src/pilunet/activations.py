"""Piecewise-linear activation functions and their exact gradients.

The two adaptive units implemented here are:

* PiLU, a two-slope unit with a learnable knot::

      f(x) = alpha * x + gamma * (1 - alpha)   if x >  gamma
      f(x) = beta  * x + gamma * (1 - beta)    if x <= gamma

  Both branches evaluate to gamma at x == gamma, so f is continuous and
  f(gamma) == gamma. With (alpha=1, gamma=0) PiLU reduces to the familiar
  rectifiers: beta=0 gives ReLU, beta=0.01 gives LeakyReLU, beta=delta
  gives PReLU.

* DoubleReLU, an odd unit with a dead zone of true zeros::

      f(x) = x - alpha   if x >  alpha
      f(x) = 0           if -alpha <= x <= alpha
      f(x) = x + alpha   if x < -alpha

  alpha >= 0 is maintained by projection after each optimizer step. With
  alpha == 0 the function is the identity.

All forward/backward functions are numpy-vectorized: scalars, arrays, and
broadcastable parameter arrays are all accepted. Backward functions return
*per-element* parameter gradients; aggregation across elements that share a
parameter is done by :func:`apply_activation_backward` according to the
sharing scheme.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

LRELU_SLOPE = 0.01


class ActivationKind(enum.Enum):
    LINEAR = "linear"
    RELU = "relu"
    LRELU = "lrelu"
    PRELU = "prelu"
    DOUBLE_RELU = "double_relu"
    PILU = "pilu"

    @property
    def arity(self) -> int:
        """Number of adaptive parameters per unit."""
        return _ARITY[self]

    @property
    def param_names(self) -> tuple[str, ...]:
        return _PARAM_NAMES[self]

    @property
    def default_init(self) -> tuple[float, ...]:
        return _DEFAULT_INIT[self]


_ARITY = {
    ActivationKind.LINEAR: 0,
    ActivationKind.RELU: 0,
    ActivationKind.LRELU: 0,
    ActivationKind.PRELU: 1,
    ActivationKind.DOUBLE_RELU: 1,
    ActivationKind.PILU: 3,
}

_PARAM_NAMES = {
    ActivationKind.LINEAR: (),
    ActivationKind.RELU: (),
    ActivationKind.LRELU: (),
    ActivationKind.PRELU: ("delta",),
    ActivationKind.DOUBLE_RELU: ("alpha",),
    ActivationKind.PILU: ("alpha", "beta", "gamma"),
}

# Starting values for the adaptive parameters. PiLU starts LeakyReLU-
# equivalent so training begins from a known-good rectifier.
_DEFAULT_INIT = {
    ActivationKind.LINEAR: (),
    ActivationKind.RELU: (),
    ActivationKind.LRELU: (),
    ActivationKind.PRELU: (0.25,),
    ActivationKind.DOUBLE_RELU: (0.5,),
    ActivationKind.PILU: (1.0, LRELU_SLOPE, 0.0),
}


class SharingScheme(enum.Enum):
    """Granularity at which adaptive activation parameters are tied."""

    LAYER_WISE = "layer"
    CHANNEL_WISE = "channel"
    NEURON_WISE = "neuron"


@dataclass(frozen=True)
class PiluParams:
    alpha: float | Tensor
    beta: float | Tensor
    gamma: float | Tensor


@dataclass(frozen=True)
class DoubleReluParams:
    alpha: float | Tensor


@dataclass(frozen=True)
class PreluParams:
    delta: float | Tensor


@dataclass(frozen=True)
class ActivationSpec:
    """Activation kind, sharing scheme, initial values, and trainability."""

    kind: ActivationKind
    scheme: SharingScheme = SharingScheme.CHANNEL_WISE
    init: tuple[float, ...] | None = None
    trainable: bool = True

    def initial_values(self) -> tuple[float, ...]:
        if self.init is not None:
            if len(self.init) != self.kind.arity:
                raise ValueError(
                    f"{self.kind.value} takes {self.kind.arity} parameters, "
                    f"got init of length {len(self.init)}"
                )
            return self.init
        return self.kind.default_init


# ---------------------------------------------------------------------------
# Forward / backward kernels


def pilu_forward(x, p: PiluParams):
    """alpha*x + gamma*(1-alpha) above the knot, beta*x + gamma*(1-beta) at
    or below it. Continuous, with f(gamma) == gamma.

    Branches are evaluated in the knot-centered form gamma + slope*(x - gamma),
    which is the same function but keeps f(gamma) == gamma exact in floating
    point; a slope of exactly 1 short-circuits to x so the identity
    parameterization and the rectifier reductions are bit-exact too.
    """
    centred = x - p.gamma
    above = centred > 0
    y_above = np.where(np.equal(p.alpha, 1.0), x, p.gamma + p.alpha * centred)
    y_below = np.where(np.equal(p.beta, 1.0), x, p.gamma + p.beta * centred)
    return np.where(above, y_above, y_below)


def pilu_backward(x, p: PiluParams, dy):
    """Per-element gradients (dx, dalpha, dbeta, dgamma) for PiLU.

    dx     = dy * alpha              where x > gamma, else dy * beta
    dalpha = dy * (x - gamma)        where x > gamma, else 0
    dbeta  = dy * (x - gamma)        where x <= gamma, else 0
    dgamma = dy * (1 - alpha)        where x > gamma, else dy * (1 - beta)
    """
    above = x > p.gamma
    dx = dy * np.where(above, p.alpha, p.beta)
    centred = dy * (x - p.gamma)
    dalpha = np.where(above, centred, 0.0)
    dbeta = np.where(above, 0.0, centred)
    dgamma = dy * np.where(above, 1.0 - p.alpha, 1.0 - p.beta)
    return dx, dalpha, dbeta, dgamma


def double_relu_forward(x, p: DoubleReluParams):
    """x - alpha above the dead zone, x + alpha below it, 0 on [-alpha, alpha]."""
    return np.where(x > p.alpha, x - p.alpha, np.where(x < -p.alpha, x + p.alpha, 0.0))


def double_relu_backward(x, p: DoubleReluParams, dy):
    """Per-element gradients (dx, dalpha) for DoubleReLU.

    dx is dy where |x| > alpha and zero on the dead zone (the derivative of
    the zero branch is zero). dalpha is -dy above, +dy below, 0 inside.
    """
    dx = dy * np.where(np.abs(x) > p.alpha, 1.0, 0.0)
    dalpha = dy * np.where(x > p.alpha, -1.0, np.where(x < -p.alpha, 1.0, 0.0))
    return dx, dalpha


def prelu_forward(x, p: PreluParams):
    return np.where(x > 0, x, p.delta * x)


def prelu_backward(x, p: PreluParams, dy):
    """Per-element gradients (dx, ddelta) for PReLU."""
    dx = dy * np.where(x > 0, 1.0, p.delta)
    ddelta = dy * np.where(x > 0, 0.0, x)
    return dx, ddelta


def rectifier_forward(x, kind: ActivationKind, params=None):
    """Forward pass for the fixed-shape rectifier family.

    ``params`` is only consulted for PReLU (a :class:`PreluParams` or a bare
    slope value).
    """
    if kind is ActivationKind.LINEAR:
        return np.asarray(x) + 0.0
    if kind is ActivationKind.RELU:
        return np.maximum(x, 0.0)
    if kind is ActivationKind.LRELU:
        return np.where(x > 0, x, LRELU_SLOPE * x)
    if kind is ActivationKind.PRELU:
        delta = params.delta if isinstance(params, PreluParams) else params
        if delta is None:
            raise ValueError("PReLU requires a slope parameter")
        return prelu_forward(x, PreluParams(delta))
    raise ValueError(f"{kind.value} is not a fixed-shape rectifier")


def as_pilu(kind: ActivationKind, params=None) -> PiluParams:
    """PiLU parameter triple that reproduces a rectifier exactly.

    ReLU -> (1, 0, 0); LeakyReLU -> (1, 0.01, 0); PReLU(delta) -> (1, delta, 0).
    """
    if kind is ActivationKind.RELU:
        return PiluParams(1.0, 0.0, 0.0)
    if kind is ActivationKind.LRELU:
        return PiluParams(1.0, LRELU_SLOPE, 0.0)
    if kind is ActivationKind.PRELU:
        delta = params.delta if isinstance(params, PreluParams) else params
        if delta is None:
            raise ValueError("PReLU requires a slope parameter")
        return PiluParams(1.0, delta, 0.0)
    raise ValueError(f"{kind.value} has no equivalent PiLU parameterization")


# ---------------------------------------------------------------------------
# Parameter stores and sharing schemes


def param_store_shape(
    kind: ActivationKind, scheme: SharingScheme, feature_shape: tuple[int, ...]
) -> tuple[int, ...]:
    """Shape of the parameter tensor for one activation layer.

    ``feature_shape`` is the per-example output shape of the preceding
    layer: (h, w, c) for conv feature maps, (units,) for dense outputs.
    """
    arity = kind.arity
    if scheme is SharingScheme.LAYER_WISE:
        return (arity,)
    if scheme is SharingScheme.CHANNEL_WISE:
        return (arity, feature_shape[-1])
    if scheme is SharingScheme.NEURON_WISE:
        return (arity, *feature_shape)
    raise ValueError(f"unknown sharing scheme {scheme}")


def init_param_store(
    spec: ActivationSpec, feature_shape: tuple[int, ...], dtype=np.float64
) -> Tensor:
    """Allocate and fill the parameter tensor for an activation layer."""
    shape = param_store_shape(spec.kind, spec.scheme, feature_shape)
    store = np.empty(shape, dtype=dtype)
    for k, value in enumerate(spec.initial_values()):
        store[k] = value
    return store


def activation_param_count(
    kind: ActivationKind, scheme: SharingScheme, layer_output_shape: tuple[int, ...]
) -> int:
    """Number of adaptive parameters an activation layer adds to the model."""
    shape = param_store_shape(kind, scheme, layer_output_shape)
    return int(np.prod(shape)) if shape else 0


@dataclass
class ActivationCache:
    """What the backward pass needs from the matching forward call."""

    x: Tensor
    params: Tensor


def _check_store(spec: ActivationSpec, x: Tensor, params: Tensor) -> None:
    expected = param_store_shape(spec.kind, spec.scheme, x.shape[1:])
    if tuple(params.shape) != expected:
        raise ValueError(
            f"parameter store shape {params.shape} does not match "
            f"{spec.scheme.value}-wise {spec.kind.value} on input {x.shape}; "
            f"expected {expected}"
        )


def apply_activation(
    x: Tensor, spec: ActivationSpec, param_store: Tensor
) -> tuple[Tensor, ActivationCache]:
    """Apply an activation to a batched tensor under a sharing scheme.

    Parameter rows broadcast against x's trailing axes, which routes each
    element to the parameter set of its layer / channel / neuron coordinate.
    """
    _check_store(spec, x, param_store)
    kind = spec.kind
    if kind is ActivationKind.PILU:
        y = pilu_forward(x, PiluParams(param_store[0], param_store[1], param_store[2]))
    elif kind is ActivationKind.DOUBLE_RELU:
        y = double_relu_forward(x, DoubleReluParams(param_store[0]))
    elif kind is ActivationKind.PRELU:
        y = prelu_forward(x, PreluParams(param_store[0]))
    else:
        y = rectifier_forward(x, kind)
    return y, ActivationCache(x=x, params=param_store)


def apply_activation_backward(
    dy: Tensor, cache: ActivationCache, spec: ActivationSpec
) -> tuple[Tensor, Tensor]:
    """Gradients of an activation layer: dx plus aggregated dparams.

    Each dparams entry is the sum of per-element parameter gradients over
    all elements that share that parameter.
    """
    x, store = cache.x, cache.params
    if dy.shape != x.shape:
        raise ValueError(
            f"upstream gradient shape {dy.shape} does not match cached input "
            f"shape {x.shape}; stale cache?"
        )
    kind = spec.kind
    if kind is ActivationKind.PILU:
        p = PiluParams(store[0], store[1], store[2])
        dx, *per_elem = pilu_backward(x, p, dy)
    elif kind is ActivationKind.DOUBLE_RELU:
        dx, *per_elem = double_relu_backward(x, DoubleReluParams(store[0]), dy)
    elif kind is ActivationKind.PRELU:
        dx, *per_elem = prelu_backward(x, PreluParams(store[0]), dy)
    elif kind is ActivationKind.LINEAR:
        dx, per_elem = dy + 0.0, []
    elif kind is ActivationKind.RELU:
        dx, per_elem = dy * np.where(x > 0, 1.0, 0.0), []
    elif kind is ActivationKind.LRELU:
        dx, per_elem = dy * np.where(x > 0, 1.0, LRELU_SLOPE), []
    else:
        raise ValueError(f"unknown activation kind {kind}")

    dparams = np.zeros_like(store)
    row_ndim = store.ndim - 1
    reduce_axes = tuple(range(x.ndim - row_ndim))
    for k, g in enumerate(per_elem):
        # Broadcast g up to x's shape first so layer-wise scalars reduce too.
        dparams[k] = np.broadcast_to(g, x.shape).sum(axis=reduce_axes)
    return dx, dparams


def branch_code(x: Tensor, spec: ActivationSpec, param_store: Tensor) -> Tensor:
    """Small-int label of the linear branch each element falls on.

    Used by the gradient checker to detect knot crossings between two
    perturbed forward passes.
    """
    kind = spec.kind
    if kind is ActivationKind.PILU:
        return (x > param_store[2]).astype(np.int8)
    if kind is ActivationKind.DOUBLE_RELU:
        alpha = param_store[0]
        return ((x > alpha).astype(np.int8) - (x < -alpha).astype(np.int8))
    if kind is ActivationKind.LINEAR:
        return np.zeros(x.shape, dtype=np.int8)
    return (x > 0).astype(np.int8)
