"""Module system and leaf layers.

Leaf layers are the unit of cost accounting: while a :class:`Tracer` is
active, every leaf call is recorded with its input and output shapes.
"""

from __future__ import annotations

import contextlib
import math
from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from treenet import ops
from treenet.tensor import Tensor

_tracer: Optional["Tracer"] = None
_skip_init = False


@contextlib.contextmanager
def skip_init():
    """Allocate weights as zeros instead of sampling; for structure-only builds."""
    global _skip_init
    prev, _skip_init = _skip_init, True
    try:
        yield
    finally:
        _skip_init = prev


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    if _skip_init:
        return np.zeros(shape, dtype=dtype)
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def Parameter(data: np.ndarray, no_decay: bool = False) -> Tensor:
    t = Tensor(data, requires_grad=True, dtype=data.dtype)
    t.no_decay = no_decay
    return t


class Module:
    """Container with ordered parameters, buffers and child modules."""

    is_leaf = False

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        setattr(self, name, module)

    # -- traversal -------------------------------------------------------

    def named_modules(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def children(self) -> Iterator["Module"]:
        return iter(self._modules.values())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for mname, mod in self.named_modules(prefix):
            for pname, p in mod._params.items():
                yield (f"{mname}.{pname}" if mname else pname), p

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for mname, mod in self.named_modules(prefix):
            for bname in mod._buffers:
                yield (f"{mname}.{bname}" if mname else bname), getattr(mod, bname)

    def leaves(self) -> list:
        return [(n, m) for n, m in self.named_modules() if m.is_leaf]

    # -- state -----------------------------------------------------------

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update((n, b) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = {}
        for mname, mod in self.named_modules():
            for bname in mod._buffers:
                buffers[f"{mname}.{bname}" if mname else bname] = (mod, bname)
        expected = set(params) | set(buffers)
        missing, unexpected = expected - set(state), set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, arr in state.items():
            target = params[name].data if name in params else getattr(*buffers[name])
            if tuple(arr.shape) != tuple(target.shape):
                raise ValueError(f"shape mismatch for {name}: checkpoint {tuple(arr.shape)} vs model {target.shape}")
        for name, arr in state.items():
            if name in params:
                params[name].data = np.ascontiguousarray(arr, dtype=params[name].dtype)
            else:
                mod, bname = buffers[name]
                cur = getattr(mod, bname)
                cur[...] = arr

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, mod in self.named_modules():
            for bname in list(mod._buffers):
                mod.register_buffer(bname, getattr(mod, bname).astype(dtype))
        return self

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self, include_bn: bool = True) -> int:
        total = 0
        for name, mod in self.named_modules():
            if isinstance(mod, BatchNorm2d) and not include_bn:
                continue
            total += sum(p.size for p in mod._params.values())
        return total

    # -- execution -------------------------------------------------------

    def forward(self, *args):
        raise NotImplementedError

    def __call__(self, *args):
        if _tracer is not None and self.is_leaf:
            return _tracer.call(self, args)
        return self.forward(*args)


# --------------------------------------------------------------------------
# leaves


class Conv2d(Module):
    is_leaf = True
    kind = "conv"

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=None, groups=1, bias=False, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        padding = (kernel - 1) // 2 if padding is None else padding
        self.geom = ops.ConvParams(in_ch, out_ch, kernel, stride, padding, groups)
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = Parameter(he_normal(rng, self.geom.weight_shape, fan_in, dtype))
        self.geom.weight = self.weight
        if bias:
            self.bias = Parameter(np.zeros(out_ch, dtype=dtype), no_decay=True)
            self.geom.bias = self.bias
        else:
            self.bias = None

    def forward(self, x):
        self.geom.weight, self.geom.bias = self.weight, self.bias
        return ops.conv2d_params(x, self.geom)

    def output_shape(self, shape):
        ho, wo = self.geom.output_hw(shape[2], shape[3])
        return (shape[0], self.geom.out_channels, ho, wo)

    def __repr__(self):
        g = self.geom
        return f"Conv2d({g.in_channels}->{g.out_channels}, k={g.kernel[0]}, s={g.stride}, g={g.groups})"


class BatchNorm2d(Module):
    is_leaf = True
    kind = "bn"

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype), no_decay=True)
        self.beta = Parameter(np.zeros(channels, dtype=dtype), no_decay=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        return ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class ReLU(Module):
    is_leaf = True
    kind = "relu"

    def forward(self, x):
        return ops.relu(x)


class MaxPool2d(Module):
    is_leaf = True
    kind = "maxpool"

    def __init__(self, kernel=3, stride=2, padding=1):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x):
        return ops.max_pool2d(x, self.kernel, self.stride, self.padding)


class GlobalAvgPool(Module):
    is_leaf = True
    kind = "gap"

    def forward(self, x):
        return ops.global_avg_pool(x)


class Linear(Module):
    is_leaf = True
    kind = "fc"

    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(he_normal(rng, (in_features, out_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), no_decay=True) if bias else None

    def forward(self, x):
        if x.ndim == 4:
            x = ops.reshape(x, (x.shape[0], -1))
        return ops.fully_connected(x, self.weight, self.bias)

    def output_shape(self, shape):
        return (shape[0], self.out_features)


class Concat(Module):
    is_leaf = True
    kind = "concat"

    def forward(self, *xs):
        return ops.concat_channels(xs)


class Add(Module):
    is_leaf = True
    kind = "add"

    def forward(self, a, b):
        return ops.add(a, b)


def eca_kernel_size(channels: int, gamma: int = 2, b: int = 1) -> int:
    """Adaptive odd kernel size: |log2(C)/gamma + b/gamma| truncated, bumped to odd."""
    t = int(abs(math.log2(channels) / gamma + b / gamma))
    return t if t % 2 else t + 1


class ECA(Module):
    """Channel gate: GAP, shared 1-D conv across channels, sigmoid, rescale."""

    is_leaf = True
    kind = "eca"

    def __init__(self, channels, kernel_size=None, rng=None, dtype=np.float32):
        super().__init__()
        if channels < 2:
            raise ValueError("ECA needs at least 2 channels")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.kernel_size = kernel_size or eca_kernel_size(channels)
        if self.kernel_size % 2 == 0:
            raise ValueError(f"ECA kernel size must be odd, got {self.kernel_size}")
        self.weight = Parameter(he_normal(rng, (self.kernel_size,), self.kernel_size, dtype))

    def attention(self, x):
        n, c = x.shape[:2]
        pooled = ops.reshape(ops.global_avg_pool(x), (n, c))
        return ops.reshape(ops.sigmoid(ops.conv1d_channels(pooled, self.weight)), (n, c, 1, 1))

    def forward(self, x):
        return ops.multiply_channelwise(x, self.attention(x))


# --------------------------------------------------------------------------
# tracing


class Tracer:
    """Records (name, module, input shapes, output shape) for every leaf call.

    With ``dry=True`` conv and FC layers return zeros of the right shape
    instead of computing, which makes whole-network shape/cost walks cheap.
    """

    def __init__(self, root: Module, dry: bool = True):
        self.names = {id(m): n for n, m in root.named_modules()}
        self.dry = dry
        self.records = []

    def call(self, module, args):
        if self.dry and hasattr(module, "output_shape"):
            x = args[0]
            out = Tensor(np.zeros(module.output_shape(x.shape), dtype=x.dtype), dtype=x.dtype)
        else:
            out = module.forward(*args)
        self.records.append((self.names.get(id(module), type(module).__name__), module, [a.shape for a in args], out.shape))
        return out

    def __enter__(self):
        global _tracer
        if _tracer is not None:
            raise RuntimeError("nested tracing is not supported")
        _tracer = self
        return self

    def __exit__(self, *exc):
        global _tracer
        _tracer = None
        return False
