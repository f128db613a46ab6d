"""Trainable adaptation modules and their placement in a backbone.

``RepAdapter`` is the linear adapter ``x + s * up(down(x))`` with a dense
down-projection and a group-wise (block-diagonal) up-projection. Because it is
affine it can later be folded into the next frozen projection; see
:mod:`repadapter.reparam`. ``BaselineAdapter`` keeps a nonlinearity between the
two projections and therefore can never be folded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ACTIVATIONS, SITES, Backbone, ConvNet, Linear, Module, Param, VisionTransformer
from .tensor import ShapeError, Tensor

MERGEABLE_SITES = ("pre_attn", "pre_ffn")
VARIANTS = ("repadapter", "baseline", "parallel")


class ConfigError(ValueError):
    pass


class GroupwiseLinear(Module):
    """Block-diagonal linear map: ``k`` column chunks of the input, each mapped independently.

    ``weights[i]`` is ``(c/k) x (d/k)``; chunk ``i`` of the input lands in
    output span ``i``.
    """

    def __init__(self, weights: list[Tensor], bias: Tensor | None = None):
        if not weights:
            raise ShapeError("need at least one group")
        shape = weights[0].shape
        if any(w.shape != shape for w in weights):
            raise ShapeError("all group weights must share one shape")
        self.weights = [Param(w) for w in weights]
        self.bias = None if bias is None else Param(bias)
        if bias is not None and bias.shape != (self.d_out,):
            raise ShapeError(f"bias {bias.shape} does not match output width {self.d_out}")

    @classmethod
    def zeros(cls, c: int, d: int, k: int, bias: bool = False, dtype=np.float64) -> GroupwiseLinear:
        check_groups(c, d, k)
        w = [np.zeros((c // k, d // k), dtype=dtype) for _ in range(k)]
        return cls(w, np.zeros(d, dtype=dtype) if bias else None)

    @classmethod
    def init(cls, c: int, d: int, k: int, rng, std: float, bias: bool = False, dtype=np.float64):
        check_groups(c, d, k)
        w = [rng.normal(0, std, size=(c // k, d // k)).astype(dtype) for _ in range(k)]
        return cls(w, np.zeros(d, dtype=dtype) if bias else None)

    @property
    def groups(self) -> int:
        return len(self.weights)

    @property
    def d_in(self) -> int:
        return self.weights[0].value.shape[0] * self.groups

    @property
    def d_out(self) -> int:
        return self.weights[0].value.shape[1] * self.groups

    def vjp(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"input width {x.shape[-1]} != {self.d_in}")
        chunks = T.split(x, self.groups) if self.groups > 1 else [x]
        outs = [T.matmul(xc, w.value) for xc, w in zip(chunks, self.weights)]
        y = T.concat(outs) if self.groups > 1 else outs[0]
        if self.bias is not None:
            y = T.add(y, self.bias.value)

        def pullback(dy):
            if self.bias is not None:
                self.bias.accumulate(dy.reshape(-1, dy.shape[-1]).sum(axis=0))
            dys = np.split(dy, self.groups, axis=-1)
            dxs = []
            for xc, dyc, w in zip(chunks, dys, self.weights):
                if w.trainable:
                    w.accumulate(T.matmul(T.transpose(xc.reshape(-1, xc.shape[-1])),
                                          dyc.reshape(-1, dyc.shape[-1])))
                dxs.append(T.matmul(dyc, T.transpose(w.value)))
            return np.concatenate(dxs, axis=-1)

        return y, pullback


def check_groups(c: int, d: int, k: int) -> None:
    if k < 1:
        raise ConfigError(f"group count k={k} must be >= 1")
    if c % k:
        raise ConfigError(f"hidden width c={c} is not divisible by groups k={k}")
    if d % k:
        raise ConfigError(f"feature width d={d} is not divisible by groups k={k}")


class RepAdapter(Module):
    """Linear residual adapter ``x + s * up(down(x))``.

    ``down`` is a :class:`Linear` (or a :class:`GroupwiseLinear` for the
    full-sparse variant) and ``up`` a :class:`GroupwiseLinear`. The scale ``s``
    multiplies only the bottleneck branch.
    """

    linear = True

    def __init__(self, down: Module, up: GroupwiseLinear, scale: float = 1.0):
        if down.d_out != up.d_in or down.d_in != up.d_out:
            raise ShapeError("down/up projections do not form a d -> c -> d bottleneck")
        self.down = down
        self.up = up
        self.scale = float(scale)

    @property
    def width(self) -> int:
        return self.down.d_in

    @property
    def hidden(self) -> int:
        return self.down.d_out

    def branch_vjp(self, x):
        if x.shape[-1] != self.width:
            raise ShapeError(f"adapter width {self.width} does not match input {x.shape[-1]}")
        h, down_back = self.down.vjp(x)
        u, up_back = self.up.vjp(h)
        y = T.scale(u, self.scale)
        return y, lambda dy: down_back(up_back(dy * self.scale))

    def vjp(self, x):
        branch, back = self.branch_vjp(x)
        return T.add(x, branch), lambda dy: dy + back(dy)


class BaselineAdapter(Module):
    """Bottleneck adapter with a nonlinearity: ``x + s * up(act(down(x)))``."""

    linear = False

    def __init__(self, down: Linear, up: Module, activation: str = "gelu", scale: float = 1.0):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if down.d_out != up.d_in or down.d_in != up.d_out:
            raise ShapeError("down/up projections do not form a d -> c -> d bottleneck")
        self.down = down
        self.up = up
        self.activation = activation
        self.scale = float(scale)

    @property
    def width(self) -> int:
        return self.down.d_in

    @property
    def hidden(self) -> int:
        return self.down.d_out

    def branch_vjp(self, x):
        h, down_back = self.down.vjp(x)
        a, act_back = ACTIVATIONS[self.activation](h)
        u, up_back = self.up.vjp(a)
        y = T.scale(u, self.scale)
        return y, lambda dy: down_back(act_back(up_back(dy * self.scale)))

    def vjp(self, x):
        branch, back = self.branch_vjp(x)
        return T.add(x, branch), lambda dy: dy + back(dy)


@dataclass(frozen=True)
class PlacementSpec:
    site: str
    linear: bool

    def __post_init__(self):
        if self.site not in SITES + ("pre_conv",):
            raise ConfigError(f"unknown adapter site {self.site!r}")

    @property
    def mergeable(self) -> bool:
        return self.linear and self.site in MERGEABLE_SITES + ("pre_conv",)

    @classmethod
    def of(cls, site: str, adapter: Module) -> PlacementSpec:
        return cls(site, bool(getattr(adapter, "linear", False)))


@dataclass
class AdapterConfig:
    """Adapter hyper-parameters shared by every attachment site."""

    c: int = 8
    k: int = 2
    s: float = 1.0
    sites: tuple[str, ...] = ("pre_attn", "pre_ffn")
    bias: bool = False
    variant: str = "repadapter"
    full_sparse: bool = False
    activation: str = "gelu"
    init_std: float = 0.02
    up_init_std: float = 0.0

    def __post_init__(self):
        self.sites = tuple(self.sites)

    def validate(self, width: int | None = None) -> None:
        if self.c < 1:
            raise ConfigError(f"hidden width c={self.c} must be >= 1")
        if self.k < 1:
            raise ConfigError(f"group count k={self.k} must be >= 1")
        if self.c % self.k:
            raise ConfigError(f"hidden width c={self.c} is not divisible by groups k={self.k}")
        if width is not None and width % self.k:
            raise ConfigError(f"feature width d={width} is not divisible by groups k={self.k}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        for site in self.placement_sites():
            if site not in SITES + ("pre_conv",):
                raise ConfigError(f"unknown adapter site {site!r}")
        if len(set(self.placement_sites())) != len(self.placement_sites()):
            raise ConfigError("adapter sites must be distinct")

    def placement_sites(self) -> tuple[str, ...]:
        return ("parallel_ffn",) if self.variant == "parallel" else self.sites


def make_adapter(width: int, cfg: AdapterConfig, rng: np.random.Generator, dtype=np.float64) -> Module:
    """Build one adapter. Up-projection starts at zero so the adapter is initially the identity."""
    cfg.validate(width)
    c, k = cfg.c, cfg.k
    if cfg.full_sparse:
        down = GroupwiseLinear.init(width, c, k, rng, cfg.init_std, cfg.bias, dtype)
    else:
        down = Linear(rng.normal(0, cfg.init_std, size=(width, c)).astype(dtype),
                      np.zeros(c, dtype=dtype) if cfg.bias else None)
    if cfg.up_init_std > 0:
        up = GroupwiseLinear.init(c, width, k, rng, cfg.up_init_std, cfg.bias, dtype)
    else:
        up = GroupwiseLinear.zeros(c, width, k, cfg.bias, dtype)
    if cfg.variant == "baseline":
        if cfg.full_sparse:
            raise ConfigError("baseline adapter does not support full_sparse")
        return BaselineAdapter(down, up, cfg.activation, cfg.s)
    return RepAdapter(down, up, cfg.s)


def attach_adapters(model: Backbone, cfg: AdapterConfig, seed: int = 0) -> Backbone:
    """Insert one adapter per configured site into every block of ``model`` (in place)."""
    rng = np.random.default_rng(seed)
    dtype = model.dtype
    if isinstance(model, VisionTransformer):
        for block in model.blocks:
            for site in cfg.placement_sites():
                if site == "pre_conv":
                    raise ConfigError("site 'pre_conv' only applies to conv backbones")
                block.attach(site, make_adapter(model.width, cfg, rng, dtype))
    elif isinstance(model, ConvNet):
        if cfg.placement_sites() != ("pre_conv",):
            raise ConfigError("conv backbones take adapters only at site 'pre_conv'")
        for block in model.blocks:
            if block.adapter is not None:
                raise ConfigError("conv block already holds an adapter")
            block.adapter = make_adapter(block.conv.c_in, cfg, rng, dtype)
    else:
        raise TypeError(f"unsupported backbone {type(model).__name__}")
    return model


def adapter_params(cfg: AdapterConfig, width: int) -> int:
    """Exact parameter count of one adapter of width ``width``."""
    cfg.validate(width)
    c, k, d = cfg.c, cfg.k, width
    down = d * c // k if cfg.full_sparse else d * c
    up = c * d // k
    if cfg.bias:
        down += c
        up += d
    return down + up


def count_params(cfg: AdapterConfig, depth: int, width: int, n_classes: int = 0,
                 include_head: bool = False) -> int:
    """Trainable parameters of all adapters in a ``depth``-block backbone of width ``width``.

    The classifier head (``width * n_classes + n_classes``) is added only when
    ``include_head`` is set.
    """
    total = depth * len(cfg.placement_sites()) * adapter_params(cfg, width)
    if include_head:
        total += width * n_classes + n_classes
    return total


def format_millions(n: int) -> str:
    """Render a parameter count the way parameter tables do: two decimals of millions, truncated."""
    return f"{math.floor(n / 1e4) / 100:.2f}M"
