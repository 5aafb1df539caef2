"""Minimal layer containers on top of :mod:`vmrfanet.ops`."""

import numpy as np

from . import ops
from .tensor import dtype, Parameter

RUNNING_MEAN = "#running_mean"
RUNNING_VAR = "#running_var"


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        """Non-trainable state (batch-norm running statistics) as numpy arrays."""
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_group(self, group):
        for p in self.parameters():
            p.group = group
        return self

    def assign_names(self):
        for name, p in self.named_parameters():
            p.name = name
        return self


def he_normal(rng, shape, fan_out):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_out)).astype(dtype())


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0, bias=False):
        kh, kw = ops._pair(kernel)
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(he_normal(rng, (out_ch, in_ch, kh, kw), out_ch * kh * kw))
        self.bias = Parameter(np.zeros(out_ch, dtype())) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels):
        self.weight = Parameter(np.ones(channels, dtype()))
        self.bias = Parameter(np.zeros(channels, dtype()))
        self.running_mean = np.zeros(channels, dtype())
        self.running_var = np.ones(channels, dtype())

    def forward(self, x):
        return ops.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var, self.training)

    def named_buffers(self, prefix=""):
        yield prefix.rstrip(".") + RUNNING_MEAN, self.running_mean
        yield prefix.rstrip(".") + RUNNING_VAR, self.running_var


class Linear(Module):
    def __init__(self, rng, in_dim, out_dim, std=None, bias=True):
        std = np.sqrt(2.0 / out_dim) if std is None else std
        self.weight = Parameter((rng.standard_normal((out_dim, in_dim)) * std).astype(dtype()))
        self.bias = Parameter(np.zeros(out_dim, dtype())) if bias else None

    def forward(self, x):
        return ops.affine(x, self.weight, self.bias)


class ConvBNReLU(Module):
    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0, relu=True):
        self.conv = Conv2d(rng, in_ch, out_ch, kernel, stride, padding)
        self.bn = BatchNorm(out_ch)
        self.relu = relu

    def forward(self, x):
        y = self.bn(self.conv(x))
        return ops.relu(y) if self.relu else y


class FeatureExtractor(Module):
    """Pooled feature -> affine -> batch norm -> relu, returning NxD."""

    def __init__(self, rng, in_ch, out_dim):
        self.fc = Linear(rng, in_ch, out_dim)
        self.bn = BatchNorm(out_dim)

    def forward(self, pooled):
        return ops.relu(self.bn(self.fc(ops.flatten(pooled))))
