"""Minimal module system over the functional kernels."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .tensor import Parameter, Tensor


class Module:
    training: bool = True

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal --------------------------------------------------------
    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for m in self.modules():
            for name in getattr(m, "_buffers", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    # -- persistence ------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data.copy() for n, p in self.named_parameters()}
        state.update({n: b.copy() for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        bufs = {n for n, _ in self.named_buffers()}
        expected = set(own) | bufs
        if set(state) != expected:
            missing = sorted(expected - set(state))[:5]
            extra = sorted(set(state) - expected)[:5]
            raise CheckpointError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise CheckpointError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = state[name].astype(p.dtype).copy()
        for m_prefix, m in self._prefixed_modules():
            for b in getattr(m, "_buffers", ()):
                arr = state[m_prefix + b]
                if arr.shape != getattr(m, b).shape:
                    raise CheckpointError(f"{m_prefix + b}: shape mismatch")
                setattr(m, b, arr.astype(getattr(m, b).dtype).copy())

    def _prefixed_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self._children():
            yield from child._prefixed_modules(f"{prefix}{name}.")

    def save(self, path):
        save_tensors(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(load_tensors(path))
        return self


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv3d(Module):
    def __init__(self, cin, cout, kernel=3, stride=1, padding=0, groups=1, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        k = F._triple(kernel)
        if cin % groups or cout % groups:
            raise ValueError(f"groups={groups} must divide {cin} and {cout}")
        fan_in = cin // groups * k[0] * k[1] * k[2]
        self.weight = Parameter(he_normal(rng, (cout, cin // groups) + k, fan_in))
        self.bias = Parameter(np.zeros(cout, np.float32)) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x):
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose3d(Module):
    def __init__(self, cin, cout, kernel=2, stride=2, padding=0, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        k = F._triple(kernel)
        fan_in = cin * k[0] * k[1] * k[2] // (F._triple(stride)[0] ** 3)
        self.weight = Parameter(he_normal(rng, (cin, cout) + k, max(fan_in, 1)))
        self.bias = Parameter(np.zeros(cout, np.float32)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return F.conv_transpose3d(x, self.weight, self.bias, self.stride, self.padding)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel=3, padding=1, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel))
        self.bias = Parameter(np.zeros(cout, np.float32)) if bias else None
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, 1, self.padding)


class BatchNorm3d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, np.float32))
        self.beta = Parameter(np.zeros(channels, np.float32))
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.eps, self.momentum = eps, momentum

    def forward(self, x):
        return F.batch_norm3d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.eps, self.momentum,
        )


class Linear(Module):
    def __init__(self, fin, fout, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(he_normal(rng, (fout, fin), fin))
        self.bias = Parameter(np.zeros(fout, np.float32)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Activation(Module):
    def __init__(self, kind="modified_relu"):
        super().__init__()
        if kind not in F.ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x):
        return F.activation(x, self.kind)


class Dropout(Module):
    def __init__(self, rate=0.3, rng=None):
        super().__init__()
        self.rate = rate
        self.rng = rng or np.random.default_rng(0)

    def forward(self, x):
        return F.dropout(x, self.rate, self.training, self.rng)


class MaxPool3d(Module):
    def __init__(self, kernel=2, stride=None):
        super().__init__()
        self.kernel, self.stride = kernel, stride

    def forward(self, x):
        return F.max_pool3d(x, self.kernel, self.stride)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ConvBNAct(Module):
    """conv -> batch norm -> activation (activation optional)."""

    def __init__(self, cin, cout, kernel, padding=0, groups=1, act="modified_relu", rng=None):
        super().__init__()
        self.conv = Conv3d(cin, cout, kernel, padding=padding, groups=groups, bias=False, rng=rng)
        self.bn = BatchNorm3d(cout)
        self.act = Activation(act) if act else None

    def forward(self, x):
        x = self.bn(self.conv(x))
        return self.act(x) if self.act is not None else x
