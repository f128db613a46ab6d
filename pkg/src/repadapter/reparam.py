"""Fold trained linear adapters into the frozen projections that consume them.

A linear adapter ``x + s * up(down(x))`` is one affine map
``x @ W_ada + b_ada`` with ``W_ada = I + s * W_d @ W_u`` and
``b_ada = s * (b_d @ W_u + b_u)``. Any affine map ``x @ W_0 + b_0`` fed by it
becomes ``x @ (W_ada @ W_0) + (b_ada @ W_0 + b_0)``. Group-wise up-projections
are first densified into their block-diagonal matrix.

Merge arithmetic runs in float64 and is cast back to the target dtype, so
float32 models lose no precision beyond the final rounding.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .adapters import BaselineAdapter, GroupwiseLinear, PlacementSpec, RepAdapter
from .nn import (Backbone, ConvBlock, ConvLayer, ConvNet, FeedForward, LayerNorm, Linear, Module,
                 MultiHeadAttention, PatchEmbed, VisionTransformer)
from .tensor import ShapeError, Tensor

PROBE_SEED = 42
PROBE_COUNT = 16


class NonMergeableError(ValueError):
    def __init__(self, message: str, sites: list[str] | None = None):
        super().__init__(message)
        self.sites = sites or []


@dataclass
class CollapsedAdapter:
    W: Tensor
    b: Tensor

    @property
    def width(self) -> int:
        return self.W.shape[0]

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.W, np.eye(self.width)) and not self.b.any())

    def has_bias(self) -> bool:
        return bool(self.b.any())

    def __call__(self, x: Tensor) -> Tensor:
        W, b = self.W.astype(x.dtype), self.b.astype(x.dtype)
        return T.add(T.matmul(x, W), b)


def densify(g: GroupwiseLinear) -> Linear:
    """Zero-pad the group blocks into one block-diagonal ``c x d`` matrix."""
    k = g.groups
    ci, co = g.weights[0].value.shape
    dense = np.zeros((g.d_in, g.d_out), dtype=g.weights[0].value.dtype)
    for i, w in enumerate(g.weights):
        dense[i * ci:(i + 1) * ci, i * co:(i + 1) * co] = w.value
    bias = None if g.bias is None else g.bias.value.copy()
    assert dense.shape == (ci * k, co * k)
    return Linear(dense, bias)


def _as_dense(m: Module) -> Linear:
    return densify(m) if isinstance(m, GroupwiseLinear) else m


def collapse_adapter(adapter: Module) -> CollapsedAdapter:
    """Reduce a linear adapter to a single affine map (returned in float64)."""
    if isinstance(adapter, BaselineAdapter) or not getattr(adapter, "linear", False):
        raise NonMergeableError("non-mergeable: nonlinear adapter cannot be collapsed")
    if not isinstance(adapter, RepAdapter):
        raise TypeError(f"cannot collapse {type(adapter).__name__}")
    down, up = _as_dense(adapter.down), _as_dense(adapter.up)
    Wd = down.weight.value.astype(np.float64)
    Wu = up.weight.value.astype(np.float64)
    s = adapter.scale
    d = Wd.shape[0]
    b = np.zeros(d)
    if down.bias is not None:
        b = b + T.matmul(down.bias.value.astype(np.float64)[None, :], Wu)[0]
    if up.bias is not None:
        b = b + up.bias.value.astype(np.float64)
    if s == 0.0:
        return CollapsedAdapter(np.eye(d), np.zeros(d))
    W = np.eye(d) + s * T.matmul(Wd, Wu)
    return CollapsedAdapter(W, s * b)


def merge_into_affine(ca: CollapsedAdapter, target: Linear) -> Linear:
    """Compose ``x -> x W_ada + b_ada`` with ``target``; returns a new map of the target's layout."""
    W0 = target.weight.value
    if W0.shape[0] != ca.width:
        raise ShapeError(f"collapsed adapter width {ca.width} does not match target input {W0.shape[0]}")
    if ca.is_identity():
        return copy.deepcopy(target)
    dtype = W0.dtype
    W0d = W0.astype(np.float64)
    W = T.matmul(ca.W, W0d)
    b = None
    if target.bias is not None or ca.has_bias():
        b = T.matmul(ca.b[None, :], W0d)[0]
        if target.bias is not None:
            b = b + target.bias.value.astype(np.float64)
        b = b.astype(dtype)
    return Linear(W.astype(dtype), b)


def merge_into_mha(ca: CollapsedAdapter, mha: MultiHeadAttention) -> MultiHeadAttention:
    """Fold the adapter into Q, K and V; the output projection is untouched."""
    if ca.width != mha.d:
        raise ShapeError(f"collapsed adapter width {ca.width} does not match attention width {mha.d}")
    return MultiHeadAttention(merge_into_affine(ca, mha.q), merge_into_affine(ca, mha.k),
                              merge_into_affine(ca, mha.v), copy.deepcopy(mha.out), mha.n_heads)


def merge_into_ffn(ca: CollapsedAdapter, ffn: FeedForward) -> FeedForward:
    return FeedForward(merge_into_affine(ca, ffn.fc1), copy.deepcopy(ffn.fc2))


def merge_into_conv(ca: CollapsedAdapter, conv: ConvLayer, allow_approximate: bool = False) -> ConvLayer:
    """Fold a per-pixel adapter into the following convolution.

    Each spatial tap of the kernel is contracted with ``W_ada`` along the input
    channel axis. The adapter bias becomes an output bias only where every tap
    reads a real pixel; zero-padded border taps never saw the shift, so a
    nonzero bias with ``padding > 0`` and ``K > 1`` is inexact at the border and
    is refused unless ``allow_approximate`` is set.
    """
    K = conv.kernel.value
    if ca.width != K.shape[1]:
        raise ShapeError(f"collapsed adapter width {ca.width} does not match conv c_in {K.shape[1]}")
    ksize = K.shape[2]
    if ca.has_bias() and conv.padding > 0 and ksize > 1 and not allow_approximate:
        raise NonMergeableError("non-mergeable: border bias mismatch (nonzero adapter bias with zero padding)")
    if ca.is_identity():
        return copy.deepcopy(conv)
    dtype = K.dtype
    Kd = K.astype(np.float64)
    # kernel'[o, i, u, v] = sum_j W_ada[i, j] kernel[o, j, u, v]
    taps = np.moveaxis(Kd, 1, -1)[..., None]                     # (o, u, v, j, 1)
    merged = np.moveaxis(T.matmul(ca.W, taps)[..., 0], -1, 1)  # (o, i, u, v)
    bias = None
    if conv.bias is not None or ca.has_bias():
        bias = np.einsum("j,ojuv->o", ca.b, Kd)
        if conv.bias is not None:
            bias = bias + conv.bias.value.astype(np.float64)
        bias = bias.astype(dtype)
    return ConvLayer(np.ascontiguousarray(merged.astype(dtype)), bias, conv.stride, conv.padding)


@dataclass
class MergedSite:
    block: int
    site: str
    target: str
    target_shape: list[int]


@dataclass
class MergeReport:
    sites: list[MergedSite] = field(default_factory=list)
    max_abs_err: float = 0.0
    max_rel_err: float = 0.0
    params_removed: int = 0
    params_before: int = 0
    params_after: int = 0
    structural_depth_before: int = 0
    structural_depth_after: int = 0
    ops_before: int = 0
    ops_after: int = 0
    approximate_sites: list[str] = field(default_factory=list)
    dtype: str = "float64"
    probes: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> MergeReport:
        data = dict(data)
        data["sites"] = [MergedSite(**s) for s in data.get("sites", [])]
        return cls(**data)

    def to_text(self) -> str:
        lines = [f"merged sites: {len(self.sites)}" + (" (0 sites)" if not self.sites else "")]
        for s in self.sites:
            lines.append(f"  block {s.block} {s.site} -> {s.target} {'x'.join(map(str, s.target_shape))}")
        lines += [
            f"max_abs_err: {self.max_abs_err:.3e}",
            f"max_rel_err: {self.max_rel_err:.3e}",
            f"params_removed: {self.params_removed}",
            f"params: {self.params_before} -> {self.params_after}",
            f"structural_depth: {self.structural_depth_before} -> {self.structural_depth_after}",
            f"ops: {self.ops_before} -> {self.ops_after}",
            f"dtype: {self.dtype}  probes: {self.probes}",
        ]
        if self.approximate_sites:
            lines.append("approximate (border error): " + ", ".join(self.approximate_sites))
        return "\n".join(lines) + "\n"


def structural_depth(model: Backbone) -> int:
    """Number of leaf operator modules on the forward path (adapters count as modules)."""
    def leaves(m) -> int:
        if isinstance(m, (Linear, GroupwiseLinear, ConvLayer)):
            return 1
        n = 0
        for name, v in vars(m).items():
            if name.startswith("_"):
                continue
            items = v.values() if isinstance(v, dict) else v if isinstance(v, list) else [v]
            n += sum(leaves(i) for i in items if isinstance(i, Module))
        if isinstance(m, (LayerNorm, PatchEmbed)):
            n += 1
        return n
    return leaves(model)


def op_count(model: Backbone, x: Tensor | None = None) -> int:
    """Primitive operators executed by one forward pass."""
    if x is None:
        x = np.zeros((1,) + model.input_shape(), dtype=model.dtype)
    with T.count_ops() as counter:
        model.forward(x)
    return counter.total


def probe_batch(model: Backbone, n: int = PROBE_COUNT, seed: int = PROBE_SEED) -> Tensor:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n,) + model.input_shape()).astype(model.dtype)


def compare_outputs(a: Tensor, b: Tensor) -> tuple[float, float]:
    """Max absolute error and max error relative to the largest reference magnitude."""
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    abs_err = float(np.max(np.abs(a64 - b64))) if a.size else 0.0
    scale = float(np.max(np.abs(a64))) if a.size else 0.0
    return abs_err, abs_err / scale if scale > 0 else abs_err


def check_mergeable(model: Backbone) -> None:
    bad = [f"block {i} {site} ({type(a).__name__})" for i, site, a in model.adapter_sites()
           if not PlacementSpec.of(site, a).mergeable]
    if bad:
        raise NonMergeableError("non-mergeable adapter sites: " + "; ".join(bad), bad)


def strip_adapters(model: Backbone) -> Backbone:
    """Copy of ``model`` with every adapter removed (the plain backbone)."""
    plain = copy.deepcopy(model)
    plain._pullback = None
    for block in plain.blocks:
        if isinstance(block, ConvBlock):
            block.adapter = None
        else:
            block.adapters = {}
    return plain


def merge_model(model: Backbone, probe: Tensor | None = None,
                allow_approximate: bool = False) -> tuple[Backbone, MergeReport]:
    """Fold every adapter of ``model`` into its downstream projection.

    Returns a new adapter-free model and a report measured on ``probe``
    (16 standard-normal inputs with seed 42 when omitted). ``model`` is left
    untouched.
    """
    check_mergeable(model)
    merged = copy.deepcopy(model)
    merged._pullback = None
    report = MergeReport(dtype=str(model.dtype))
    adapter_total = 0

    if isinstance(merged, VisionTransformer):
        for i, block in enumerate(merged.blocks):
            for site, adapter in list(block.adapters.items()):
                ca = collapse_adapter(adapter)
                adapter_total += adapter.n_params()
                if site == "pre_attn":
                    block.attn = merge_into_mha(ca, block.attn)
                    targets = [("attn.q", block.attn.q), ("attn.k", block.attn.k), ("attn.v", block.attn.v)]
                else:
                    block.ffn = merge_into_ffn(ca, block.ffn)
                    targets = [("ffn.fc1", block.ffn.fc1)]
                for name, lin in targets:
                    report.sites.append(MergedSite(i, site, name, list(lin.weight.value.shape)))
            block.adapters = {}
    elif isinstance(merged, ConvNet):
        for i, block in enumerate(merged.blocks):
            if block.adapter is None:
                continue
            ca = collapse_adapter(block.adapter)
            adapter_total += block.adapter.n_params()
            exact = not (ca.has_bias() and block.conv.padding > 0 and block.conv.kernel.value.shape[2] > 1)
            block.conv = merge_into_conv(ca, block.conv, allow_approximate)
            if not exact:
                report.approximate_sites.append(f"block {i} pre_conv")
            block.adapter = None
            report.sites.append(MergedSite(i, "pre_conv", "conv.kernel", list(block.conv.kernel.value.shape)))
    else:
        raise TypeError(f"unsupported backbone {type(model).__name__}")

    if probe is None:
        probe = probe_batch(model)
    report.probes = int(probe.shape[0])
    report.max_abs_err, report.max_rel_err = compare_outputs(model.forward(probe), merged.forward(probe))
    report.params_removed = adapter_total
    report.params_before = model.n_params()
    report.params_after = merged.n_params()
    report.structural_depth_before = structural_depth(model)
    report.structural_depth_after = structural_depth(merged)
    report.ops_before = op_count(model, probe[:1])
    report.ops_after = op_count(merged, probe[:1])
    return merged, report
