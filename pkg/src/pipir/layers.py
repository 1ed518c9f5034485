"""Parameter containers and the small layers shared by the backbone and PIP."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Attribute-ordered parameter tree.

    Parameters are ``Tensor`` attributes with ``requires_grad=True``; child
    modules and lists of modules are walked in assignment order, so parameter
    names and order are deterministic.
    """

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"state is missing parameters: {missing[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.data.dtype).copy()

    def astype_current(self) -> None:
        """Recast all parameters to the active precision."""
        for p in self.parameters():
            p.data = p.data.astype(ad.get_dtype())


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return param(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))


class Conv3x3(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1):
        self.weight = he_normal(rng, (cout, cin, 3, 3), cin * 9)
        self.bias = param(np.zeros(cout))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv3x3(x, self.weight, self.bias, stride=self.stride)


class Conv1x1(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = he_normal(rng, (cout, cin), cin)
        self.bias = param(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1x1(x, self.weight, self.bias)


class DWConv3x3(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.weight = he_normal(rng, (channels, 3, 3), 9)
        self.bias = param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dwconv3x3(x, self.weight, self.bias)


class LayerNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gamma, self.beta, self.eps)


class QKVChain(Module):
    """layernorm -> 1x1 conv -> 3x3 depth-wise conv."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.norm = LayerNorm2d(cin)
        self.proj = Conv1x1(cin, cout, rng)
        self.dw = DWConv3x3(cout, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.dw(self.proj(self.norm(x)))


class GDFN(Module):
    """Gated depth-wise conv feed-forward block with an internal residual.

    ``y = x + W_out(gelu(b1(LN(x))) * b2(LN(x)))`` where each branch is a
    1x1 expansion to ``expansion * c`` channels followed by a 3x3 depth-wise
    conv.
    """

    def __init__(self, channels: int, rng: np.random.Generator, expansion: int = 2):
        if expansion < 1:
            raise ad.ContractError("GDFN expansion factor must be >= 1")
        hidden = expansion * channels
        self.norm = LayerNorm2d(channels)
        self.in1 = Conv1x1(channels, hidden, rng)
        self.dw1 = DWConv3x3(hidden, rng)
        self.in2 = Conv1x1(channels, hidden, rng)
        self.dw2 = DWConv3x3(hidden, rng)
        self.out = Conv1x1(hidden, channels, rng)
        self.out.weight.data *= 0.1

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm(x)
        gate = ad.gelu(self.dw1(self.in1(h)))
        return ad.add(x, self.out(ad.mul(gate, self.dw2(self.in2(h)))))


class ConvBlock(Module):
    """Shape-preserving residual block: ``x + conv(gelu(conv(LN(x))))``."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.norm = LayerNorm2d(channels)
        self.conv1 = Conv3x3(channels, channels, rng)
        self.conv2 = Conv3x3(channels, channels, rng)
        self.conv2.weight.data *= 0.1

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(x, self.conv2(ad.gelu(self.conv1(self.norm(x)))))
