"""Minimal reverse-mode differentiation core.

Provides exactly the tensor operations the inversion networks and their
structural-similarity objective need, a tape-based backward pass, layer
containers with named parameters, the Adam optimizer with the poly
learning-rate schedule, and a finite-difference gradient checker.
Float32 is the training dtype; gradient checks run the same code in
float64.
"""

from .tensor import Tensor, Parameter, no_grad
from . import ops
from .ops import (
    conv2d, dense, batch_norm, dropout, leaky_relu, upsample_nearest2,
    avg_pool2, concat,
)
from .nn import Module, Conv2d, Dense, BatchNorm, Dropout, Sequential
from .optim import Adam, poly_lr, step_decay_lr
from .gradcheck import grad_check
