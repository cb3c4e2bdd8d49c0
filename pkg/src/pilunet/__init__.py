"""Adaptive piecewise-linear activations with a from-scratch CNN harness."""

from .activations import (
    ActivationKind,
    ActivationSpec,
    DoubleReluParams,
    PiluParams,
    PreluParams,
    SharingScheme,
    as_pilu,
    double_relu_backward,
    double_relu_forward,
    pilu_backward,
    pilu_forward,
    prelu_backward,
    prelu_forward,
    rectifier_forward,
)
from .data import Dataset, load_cifar10, load_cifar100, make_synthetic, one_hot, subset
from .network import Model, build_cifar_cnn, count_parameters, glorot_normal
from .training import (
    Adam,
    AdamConfig,
    RunRecord,
    TrainConfig,
    build_and_train,
    categorical_cross_entropy,
    gradient_check,
    l2_penalty,
    train_run,
)

__version__ = "0.1.0"
