"""Layer containers with named parameters and train/eval modes.

Modules register child modules and Parameters simply by attribute
assignment; named_parameters() walks the tree building dotted paths
like "encoder.context.conv3.weight". Weight init is He-style normal
driven by an explicit rng so two builds from the same seed are
bit-identical.
"""

import numpy as np

from .tensor import Parameter
from . import ops


class Module:
    def __init__(self):
        self.training = True

    def __setattr__(self, name, value):
        object.__setattr__(self, name, value)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (prefix + name, value)
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffer_names", ()):
            yield (prefix + name, getattr(self, name))
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def state_tensors(self):
        """Flat name -> array dict of parameters and buffers."""
        state = {f"param.{n}": p.data for n, p in self.named_parameters()}
        state.update({f"buffer.{n}": b for n, b in self.named_buffers()})
        return state

    def load_state_tensors(self, state):
        for name, p in self.named_parameters():
            key = f"param.{name}"
            if key not in state:
                raise KeyError(f"checkpoint missing parameter {name}")
            if tuple(state[key].shape) != tuple(p.data.shape):
                raise ValueError(
                    f"parameter {name}: checkpoint shape "
                    f"{state[key].shape} != model shape {p.data.shape}"
                )
            p.data = state[key].astype(np.float32).copy()
        for name, buf in self.named_buffers():
            key = f"buffer.{name}"
            if key not in state:
                raise KeyError(f"checkpoint missing buffer {name}")
            buf[...] = state[key]


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, pad=0):
        super().__init__()
        kh, kw = kernel if isinstance(kernel, (tuple, list)) else (kernel,) * 2
        fan_in = in_ch * kh * kw
        scale = np.sqrt(2.0 / fan_in)
        self.weight = Parameter(
            rng.normal(0.0, scale, size=(out_ch, in_ch, kh, kw)))
        self.bias = Parameter(np.zeros(out_ch))
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias,
                          stride=self.stride, pad=self.pad)


class Dense(Module):
    def __init__(self, in_dim, out_dim, rng):
        super().__init__()
        scale = np.sqrt(2.0 / in_dim)
        self.weight = Parameter(rng.normal(0.0, scale, size=(out_dim, in_dim)))
        self.bias = Parameter(np.zeros(out_dim))

    def __call__(self, x):
        return ops.dense(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self._buffer_names = ("running_mean", "running_var")
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        return ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps)


class LeakyReLU(Module):
    def __init__(self, slope=0.2):
        super().__init__()
        self.slope = slope

    def __call__(self, x):
        return ops.leaky_relu(x, self.slope)


class Dropout(Module):
    def __init__(self, rate, granularity="element"):
        super().__init__()
        self.rate = rate
        self.granularity = granularity

    def __call__(self, x, rng=None):
        return ops.dropout(x, self.rate, training=self.training,
                           rng=rng, granularity=self.granularity)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
