"""Parameter containers and the residual building blocks of both paths.

Parameters are declared as :class:`ParamSpec` records (name, shape, fan-in)
and materialized in declaration order by :func:`init_params`, so a given
seed always reproduces the same tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .conv import conv2d, depthwise_separable_conv, maxpool2d, upsample2d
from .errors import ShapeError
from .tensor import Tensor, concat, get_dtype, matmul, relu, sigmoid, softmax


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    fan_in: int  # 0 marks a bias (zero-initialized)
    gain: float = 1.0


class NetworkParams(dict):
    """Ordered ``name -> Tensor`` mapping of learnable leaves."""

    def subset(self, prefixes: Iterable[str]) -> "NetworkParams":
        prefixes = tuple(prefixes)
        return NetworkParams((k, v) for k, v in self.items() if k.startswith(prefixes))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def count(self) -> int:
        return int(sum(p.size for p in self.values()))

    def clone(self) -> "NetworkParams":
        return NetworkParams((k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in self.items())


def init_params(specs: Iterable[ParamSpec], rng: np.random.Generator) -> NetworkParams:
    """He-normal weights (std ``gain * sqrt(2/fan_in)``) and zero biases, in declaration order."""
    params = NetworkParams()
    dtype = get_dtype()
    for spec in specs:
        if spec.name in params:
            raise ValueError(f"duplicate parameter name {spec.name!r}")
        if spec.fan_in:
            data = rng.standard_normal(spec.shape) * (spec.gain * np.sqrt(2.0 / spec.fan_in))
        else:
            data = np.zeros(spec.shape)
        params[spec.name] = Tensor(data.astype(dtype), requires_grad=True, name=spec.name)
    return params


# -- declarations ---------------------------------------------------------------

# Last layer of a residual branch and the output heads start scaled down so
# stacked blocks without normalization keep activations O(1) at init.
RESIDUAL_GAIN = 0.1


def conv_specs(name: str, cin: int, cout: int, k: int, gain: float = 1.0) -> list[ParamSpec]:
    return [ParamSpec(f"{name}.weight", (cout, cin, k, k), cin * k * k, gain),
            ParamSpec(f"{name}.bias", (cout,), 0)]


def sep_conv_specs(name: str, cin: int, cout: int, k: int, gain: float = 1.0) -> list[ParamSpec]:
    return [ParamSpec(f"{name}.depth", (cin, 1, k, k), k * k),
            ParamSpec(f"{name}.point", (cout, cin, 1, 1), cin, gain),
            ParamSpec(f"{name}.bias", (cout,), 0)]


def dense_specs(name: str, n_in: int, n_out: int, gain: float = 1.0) -> list[ParamSpec]:
    return [ParamSpec(f"{name}.weight", (n_in, n_out), n_in, gain),
            ParamSpec(f"{name}.bias", (n_out,), 0)]


def sconv_block_specs(name: str, cin: int, cout: int, k: int, pool: bool) -> list[ParamSpec]:
    specs = sep_conv_specs(f"{name}.sconv1", cin, cout, k) + sep_conv_specs(f"{name}.sconv2", cout, cout, k, RESIDUAL_GAIN)
    if pool or cin != cout:
        specs += conv_specs(f"{name}.proj", cin, cout, 1)
    return specs


def unet_block_specs(name: str, cin: int, cout: int, k: int = 3) -> list[ParamSpec]:
    return conv_specs(f"{name}.conv1", cin, cout, k) + conv_specs(f"{name}.conv2", cout, cout, k, RESIDUAL_GAIN) \
        + conv_specs(f"{name}.proj", cin, cout, 1)


# -- forward blocks --------------------------------------------------------------

def residual_forward(x: Tensor, inner: Callable[[Tensor], Tensor],
                     projection: Callable[[Tensor], Tensor] | None = None,
                     activation: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """``activation(inner(x) + projection(x))`` with the identity as default projection."""
    fx = inner(x)
    short = projection(x) if projection is not None else x
    if fx.shape != short.shape:
        raise ShapeError(f"residual branch shape {fx.shape} != shortcut shape {short.shape}; a projection is needed")
    out = fx + short
    return activation(out) if activation is not None else out


def sep_conv(x: Tensor, p: NetworkParams, name: str) -> Tensor:
    return depthwise_separable_conv(x, p[f"{name}.depth"], p[f"{name}.point"], p[f"{name}.bias"])


def sconv_block(x: Tensor, p: NetworkParams, name: str, pool: bool) -> Tensor:
    """Residual [sep-conv, ReLU, sep-conv, (maxpool 2)] block with ReLU after the sum.

    Pooling blocks use a stride-2 1x1 projection on the shortcut; constant-shape
    blocks use the identity.
    """
    def inner(t):
        h = relu(sep_conv(t, p, f"{name}.sconv1"))
        h = sep_conv(h, p, f"{name}.sconv2")
        return maxpool2d(h, 2) if pool else h

    projection = None
    if f"{name}.proj.weight" in p:
        stride = 2 if pool else 1
        projection = lambda t: conv2d(t, p[f"{name}.proj.weight"], stride, "same", p[f"{name}.proj.bias"])  # noqa: E731
    return residual_forward(x, inner, projection, relu)


def unet_block(x: Tensor, p: NetworkParams, name: str) -> Tensor:
    """``relu(conv(relu(conv(x)))) + relu(conv1x1(x))``: activated residual plus activated projection."""
    def inner(t):
        h = relu(conv2d(t, p[f"{name}.conv1.weight"], 1, "same", p[f"{name}.conv1.bias"]))
        return relu(conv2d(h, p[f"{name}.conv2.weight"], 1, "same", p[f"{name}.conv2.bias"]))

    def projection(t):
        return relu(conv2d(t, p[f"{name}.proj.weight"], 1, "same", p[f"{name}.proj.bias"]))

    return residual_forward(x, inner, projection)


def unet_down(x: Tensor, p: NetworkParams, name: str, pool: bool = True) -> tuple[Tensor, Tensor | None]:
    """Encoder stage: ``skip`` at input resolution and ``down = maxpool(skip, 2)``."""
    if pool and (x.shape[2] % 2 or x.shape[3] % 2):
        raise ShapeError(f"unet_down needs even spatial extents, got {x.shape[2:]}")
    skip = unet_block(x, p, name)
    return skip, (maxpool2d(skip, 2) if pool else None)


def unet_up(down: Tensor, skip: Tensor, p: NetworkParams, name: str) -> Tensor:
    """Decoder stage: upsample by 2, concatenate the skip on channels, residual block."""
    up = upsample2d(down, 2)
    if up.shape[2:] != skip.shape[2:]:
        raise ShapeError(f"upsampled {up.shape[2:]} does not match skip {skip.shape[2:]}")
    return unet_block(concat([up, skip], axis=1), p, name)


_ACTIVATIONS = {None: None, "linear": None, "relu": relu, "sigmoid": sigmoid,
                "softmax": lambda t: softmax(t, axis=-1)}


def dense(x: Tensor, p: NetworkParams, name: str, activation: str | None = None) -> Tensor:
    w = p[f"{name}.weight"]
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense layer {name} expects (batch, {w.shape[0]}), got {x.shape}")
    y = matmul(x, w) + p[f"{name}.bias"]
    act = _ACTIVATIONS[activation]
    return act(y) if act is not None else y
