"""Parameter containers and the basic layers the networks are built from."""

from __future__ import annotations

import math
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import ops
from .deform import deform_conv2d
from .tensor import DTYPE, Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal module tree; children and parameters are found by attribute scan.

    Attribute insertion order fixes parameter order, which the checkpoint
    format and the optimizer both rely on.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {arr.shape}")
            p.data = np.ascontiguousarray(arr, dtype=DTYPE).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def kaiming_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Conv2d(Module):
    def __init__(
        self,
        cin: int,
        cout: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: Optional[int] = None,
        dilation: int = 1,
        bias: bool = True,
        zero_init: bool = False,
    ):
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (kernel // 2) if padding is None else padding
        shape = (cout, cin, kernel, kernel)
        self.weight = Parameter(np.zeros(shape, DTYPE) if zero_init else kaiming_uniform(shape, rng))
        self.bias = Parameter(np.zeros(cout, DTYPE)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class DeformConv2d(Module):
    """Deformable 3x3 layer: an ordinary conv predicts the offsets from the input.

    The offset predictor starts at zero, so a fresh layer is exactly a plain
    convolution.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, kernel: int = 3, stride: int = 1, dilation: int = 1):
        self.kernel = kernel
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (kernel // 2)
        shape = (cout, cin, kernel, kernel)
        self.weight = Parameter(kaiming_uniform(shape, rng))
        self.bias = Parameter(np.zeros(cout, DTYPE))
        self.offset_predictor = Conv2d(
            cin, 2 * kernel * kernel, 3, rng, stride=stride, padding=1, zero_init=True
        )

    def forward(self, x: Tensor) -> Tensor:
        offsets = self.offset_predictor(x)
        return deform_conv2d(x, offsets, self.weight, self.bias, self.stride, self.padding, self.dilation)
