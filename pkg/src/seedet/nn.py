"""Parameter containers and layer wrappers over the tensor ops.

A Module tracks parameters (trainable Tensors), buffers (plain arrays such
as batch-norm running statistics) and child modules by attribute name, so
`named_parameters()` yields stable dotted paths for the optimizer and for
checkpoints.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Kaiming fan-in initialization for relu networks."""
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    # -- traversal --------------------------------------------------------

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    # -- state ------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing={missing}, unexpected={unexpected}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {arr.shape}")
            arr[...] = src.astype(arr.dtype, copy=False)

    def load_partial_state(self, state: dict[str, np.ndarray]) -> list[str]:
        """Copy every entry whose name and shape match; return the names copied."""
        own = self.state_dict()
        copied = []
        for name, arr in own.items():
            if name in state and np.asarray(state[name]).shape == arr.shape:
                arr[...] = np.asarray(state[name]).astype(arr.dtype, copy=False)
                copied.append(name)
        return copied

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Conv3d(Module):
    """3D convolution layer; bias is off by default (a following batch norm
    would absorb it)."""

    def __init__(self, cin, cout, k, *, stride=1, pad=0, bias=False, rng, dtype):
        super().__init__()
        self.stride = stride
        self.pad = pad
        fan_in = cin * k * k * k
        self.weight = Tensor(he_normal(rng, (cout, cin, k, k, k), fan_in, dtype), requires_grad=True)
        if bias:
            self.bias: Optional[Tensor] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class ConvTranspose3d(Module):
    def __init__(self, cin, cout, k, *, stride=1, pad=0, rng, dtype):
        super().__init__()
        self.stride = stride
        self.pad = pad
        # fan-in of the adjoint map: each output voxel sees cin * k^3 / stride^3
        fan_in = max(1, cin * k * k * k // (stride * stride * stride))
        self.weight = Tensor(he_normal(rng, (cin, cout, k, k, k), fan_in, dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3d_transpose(x, self.weight, stride=self.stride, pad=self.pad)


class BatchNorm3d(Module):
    def __init__(self, c, *, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.register_buffer("running_var", np.ones(c, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class Linear(Module):
    def __init__(self, cin, cout, *, rng, dtype):
        super().__init__()
        self.weight = Tensor(he_normal(rng, (cout, cin), cin, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)
