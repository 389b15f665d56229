"""Parameters, a small module system, and the conv/batch-norm layers."""
from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Parameter(Tensor):
    """A trainable tensor.  ``name`` is filled in by the owning registry."""

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Attribute-walking container, in the spirit of ``torch.nn.Module``.

    Parameters, buffers (plain numpy arrays registered via
    :meth:`register_buffer`) and child modules are discovered in attribute
    insertion order, giving dotted names such as ``nlce4.codebook``.
    """

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                name = prefix + key
                val.name = name
                yield name, val
        for key, child in self.children():
            yield from child.named_parameters(prefix + key + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in self._buffers.items():
            yield prefix + key, val
        for key, child in self.children():
            yield from child.named_buffers(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy values in place.  Returns the names that were loaded.

        With ``strict`` any missing, unexpected or mis-shaped entry raises a
        ``KeyError`` listing the differences.
        """
        targets: dict[str, np.ndarray] = {n: p.data for n, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        mismatched = sorted(
            n for n in set(targets) & set(state) if targets[n].shape != np.shape(state[n])
        )
        if strict and (missing or unexpected or mismatched):
            parts = []
            if missing:
                parts.append("missing: " + ", ".join(missing))
            if unexpected:
                parts.append("unexpected: " + ", ".join(unexpected))
            if mismatched:
                parts.append(
                    "shape mismatch: "
                    + ", ".join(f"{n} {targets[n].shape} vs {np.shape(state[n])}" for n in mismatched)
                )
            raise KeyError("state dict does not match model; " + "; ".join(parts))
        loaded = []
        for name, arr in targets.items():
            if name in state and name not in mismatched:
                arr[...] = state[name]
                loaded.append(name)
        return loaded

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int | None = None, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Parameter(kaiming(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    """Batch norm with momentum 0.1 and eps 1e-5."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ag.batchnorm2d(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class ConvBNReLU(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, relu: bool = True):
        super().__init__()
        self.conv = Conv2d(rng, in_ch, out_ch, kernel, stride=stride, bias=False)
        self.bn = BatchNorm2d(out_ch)
        self.relu = relu

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return ag.relu(y) if self.relu else y


def checksum(arrays: dict[str, np.ndarray]) -> str:
    """SHA-256 over names and raw float64 bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return h.hexdigest()
