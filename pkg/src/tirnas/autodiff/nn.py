"""Small module system over the tensor core: parameter bookkeeping,
train/eval mode, state dicts, and the three learnable layer types the
search space needs (conv, batchnorm, linear).
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .conv import batchnorm, conv2d
from .tensor import Tensor, add, matmul


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def add_module(self, name: str, module: "Module") -> None:
        self._modules[name] = module
        object.__setattr__(self, name, module)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({"buf:" + name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for key, arr in state.items():
            if key.startswith("buf:"):
                target = buffers[key[4:]]
                target[...] = arr
            else:
                p = params[key]
                p.data[...] = np.asarray(arr, dtype=p.data.dtype).reshape(p.data.shape)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = []
        for m in items:
            self.append(m)

    def append(self, module: Module) -> None:
        self.add_module(str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Conv2d(Module):
    """Bias-free convolution layer, He-initialized (fan-in scaled)."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0,
                 dilation: int = 1, groups: int = 1, rng: np.random.Generator | None = None):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise ConfigError(f"conv channels ({c_in}->{c_out}) not divisible by groups={groups}")
        rng = rng or np.random.default_rng()
        fan_in = (c_in // groups) * k * k
        std = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.normal(0.0, std, size=(c_out, c_in // groups, k, k)),
                             requires_grad=True)
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups

    def forward(self, x):
        return conv2d(x, self.weight, self.stride, self.padding, self.dilation, self.groups)


class BatchNorm2d(Module):
    def __init__(self, c: int, affine: bool = True, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.affine = affine
        self.momentum = momentum
        self.eps = eps
        if affine:
            self.gamma = Tensor(np.ones(c), requires_grad=True)
            self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(c, dtype=np.float64))
        self.register_buffer("running_var", np.ones(c, dtype=np.float64))

    def forward(self, x):
        gamma = self.gamma if self.affine else None
        beta = self.beta if self.affine else None
        return batchnorm(x, self.running_mean, self.running_var, gamma, beta,
                         training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng()
        bound = 1.0 / np.sqrt(c_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(c_in, c_out)), requires_grad=True)
        self.has_bias = bias
        if bias:
            self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def forward(self, x):
        out = matmul(x, self.weight)
        if self.has_bias:
            out = add(out, self.bias)
        return out
