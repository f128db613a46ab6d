"""Frozen backbone blocks: affine maps, attention, FFN, ViT and conv blocks.

Every module exposes ``vjp(x) -> (y, pullback)``. ``pullback(dy)`` returns the
gradient with respect to ``x`` and accumulates parameter gradients into the
trainable :class:`Param` objects it closes over. ``forward`` is the same
computation with the pullback discarded, so training and inference share one
code path and one operator count.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator
import copy
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import tensor as T
from .tensor import ShapeError, Tensor

Pullback = Callable[[Tensor], Tensor]

SITES = ("pre_attn", "post_attn", "pre_ffn", "post_ffn", "parallel_ffn")


@dataclass(eq=False)
class Param:
    value: Tensor
    trainable: bool = True
    grad: Tensor | None = None

    def accumulate(self, g: Tensor) -> None:
        if not self.trainable:
            return
        g = g.reshape(self.value.shape)
        if self.grad is None:
            self.grad = g.astype(self.value.dtype, copy=True)
        else:
            self.grad += g


class Module:
    def vjp(self, x: Tensor) -> tuple[Tensor, Pullback]:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        return self.vjp(x)[0]

    __call__ = forward

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, prefix + name)

    def n_params(self) -> int:
        return sum(p.value.size for _, p in self.named_params())


def _walk(value, name: str) -> Iterator[tuple[str, Param]]:
    if isinstance(value, Param):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_params(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}.{key}")


def _flat(a: Tensor) -> Tensor:
    return a.reshape(-1, a.shape[-1])


class Linear(Module):
    """Affine map ``y = x W + b`` with ``W`` stored as ``d_in x d_out``."""

    def __init__(self, weight: Tensor, bias: Tensor | None = None):
        if weight.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got {weight.shape}")
        if bias is not None and bias.shape != (weight.shape[1],):
            raise ShapeError(f"bias {bias.shape} does not match weight {weight.shape}")
        self.weight = Param(weight)
        self.bias = None if bias is None else Param(bias)

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
             dtype=np.float64, std: float | None = None) -> Linear:
        std = 1.0 / math.sqrt(d_in) if std is None else std
        w = rng.normal(0.0, std, size=(d_in, d_out)).astype(dtype)
        b = rng.normal(0.0, 0.02, size=d_out).astype(dtype) if bias else None
        return cls(w, b)

    @property
    def d_in(self) -> int:
        return self.weight.value.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.value.shape[1]

    def vjp(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"input width {x.shape[-1]} != {self.d_in}")
        W = self.weight.value
        y = T.matmul(x, W)
        if self.bias is not None:
            y = T.add(y, self.bias.value)

        def pullback(dy):
            if self.weight.trainable:
                self.weight.accumulate(T.matmul(T.transpose(_flat(x)), _flat(dy)))
            if self.bias is not None and self.bias.trainable:
                self.bias.accumulate(_flat(dy).sum(axis=0))
            return T.matmul(dy, T.transpose(W))

        return y, pullback


class LayerNorm(Module):
    def __init__(self, gamma: Tensor, beta: Tensor, eps: float = 1e-6):
        self.gamma = Param(gamma)
        self.beta = Param(beta)
        self.eps = eps

    @classmethod
    def init(cls, d: int, dtype=np.float64, eps: float = 1e-6) -> LayerNorm:
        return cls(np.ones(d, dtype=dtype), np.zeros(d, dtype=dtype), eps)

    def vjp(self, x):
        g, b = self.gamma.value, self.beta.value
        y = T.layernorm(x, g, b, self.eps)

        def pullback(dy):
            mu = x.mean(axis=-1, keepdims=True)
            xc = x - mu
            inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
            xhat = xc * inv
            self.gamma.accumulate(_flat(dy * xhat).sum(axis=0))
            self.beta.accumulate(_flat(dy).sum(axis=0))
            dxhat = dy * g
            return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                          - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))

        return y, pullback


def gelu_vjp(x: Tensor) -> tuple[Tensor, Pullback]:
    y = T.gelu(x)

    def pullback(dy):
        cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (dy * (cdf + x * pdf)).astype(x.dtype, copy=False)

    return y, pullback


def relu_vjp(x: Tensor) -> tuple[Tensor, Pullback]:
    return T.relu(x), lambda dy: dy * (x > 0)


ACTIVATIONS = {"gelu": gelu_vjp, "relu": relu_vjp}


class MultiHeadAttention(Module):
    """Scaled dot-product attention with full ``d x d`` Q/K/V/O projections.

    Heads are obtained by reshaping the projected ``d``-wide activations, so a
    merge only ever rewrites the three input projections.
    """

    def __init__(self, q: Linear, k: Linear, v: Linear, out: Linear, n_heads: int):
        d = q.d_in
        if d % n_heads:
            raise ShapeError(f"width {d} not divisible by {n_heads} heads")
        for m in (q, k, v, out):
            if (m.d_in, m.d_out) != (d, d):
                raise ShapeError("attention projections must all be d x d")
        self.q, self.k, self.v, self.out = q, k, v, out
        self.n_heads = n_heads

    @classmethod
    def init(cls, d: int, n_heads: int, rng, dtype=np.float64, bias: bool = True):
        return cls(*(Linear.init(d, d, rng, bias, dtype) for _ in range(4)), n_heads=n_heads)

    @property
    def d(self) -> int:
        return self.q.d_in

    def _heads(self, a):
        *lead, n, d = a.shape
        a = T.reshape(a, (*lead, n, self.n_heads, d // self.n_heads))
        return np.swapaxes(a, -2, -3)

    def _unheads(self, a):
        a = np.swapaxes(a, -2, -3)
        *lead, n, h, dk = a.shape
        return T.reshape(a, (*lead, n, h * dk))

    def vjp(self, x):
        if x.ndim < 2 or x.shape[-1] != self.d:
            raise ShapeError(f"attention expects (..., n, {self.d}) input, got {x.shape}")
        dk = self.d // self.n_heads
        q, q_back = self.q.vjp(x)
        k, k_back = self.k.vjp(x)
        v, v_back = self.v.vjp(x)
        qh, kh, vh = self._heads(q), self._heads(k), self._heads(v)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dk))
        attn = T.softmax_rows(scores)
        ctx = self._unheads(T.matmul(attn, vh))
        y, out_back = self.out.vjp(ctx)

        def pullback(dy):
            dctx = self._heads(out_back(dy))
            dattn = T.matmul(dctx, T.transpose(vh))
            dvh = T.matmul(T.transpose(attn), dctx)
            dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            dscores = dscores / math.sqrt(dk)
            dqh = T.matmul(dscores, kh)
            dkh = T.matmul(T.transpose(dscores), qh)
            return (q_back(self._unheads(dqh)) + k_back(self._unheads(dkh))
                    + v_back(self._unheads(dvh)))

        return y, pullback

    def attention_weights(self, x: Tensor) -> Tensor:
        dk = self.d // self.n_heads
        qh, kh = self._heads(self.q(x)), self._heads(self.k(x))
        return T.softmax_rows(T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dk)))


class FeedForward(Module):
    def __init__(self, fc1: Linear, fc2: Linear):
        if fc1.d_out != fc2.d_in or fc1.d_in != fc2.d_out:
            raise ShapeError("fc1/fc2 shapes are inconsistent")
        self.fc1, self.fc2 = fc1, fc2

    @classmethod
    def init(cls, d: int, rng, hidden: int | None = None, dtype=np.float64):
        hidden = 4 * d if hidden is None else hidden
        return cls(Linear.init(d, hidden, rng, True, dtype), Linear.init(hidden, d, rng, True, dtype))

    def vjp(self, x):
        h, b1 = self.fc1.vjp(x)
        a, act_back = gelu_vjp(h)
        y, b2 = self.fc2.vjp(a)
        return y, lambda dy: b1(act_back(b2(dy)))


class ViTBlock(Module):
    """Pre-norm transformer block with optional adapters at five sites.

    ``pre_attn`` / ``pre_ffn`` wrap the normalised input of MHA / FFN,
    ``post_attn`` / ``post_ffn`` wrap their outputs inside the residual, and
    ``parallel_ffn`` adds the adapter's bottleneck branch, fed by the block's
    intermediate residual stream, next to the FFN.
    """

    def __init__(self, ln1: LayerNorm, attn: MultiHeadAttention, ln2: LayerNorm,
                 ffn: FeedForward, adapters: dict | None = None):
        self.ln1, self.attn, self.ln2, self.ffn = ln1, attn, ln2, ffn
        self.adapters: dict[str, Module] = {}
        for site, adapter in (adapters or {}).items():
            self.attach(site, adapter)

    @classmethod
    def init(cls, d: int, n_heads: int, rng, hidden: int | None = None, dtype=np.float64, eps=1e-6):
        return cls(LayerNorm.init(d, dtype, eps), MultiHeadAttention.init(d, n_heads, rng, dtype),
                   LayerNorm.init(d, dtype, eps), FeedForward.init(d, rng, hidden, dtype))

    def attach(self, site: str, adapter: Module) -> None:
        if site not in SITES:
            raise ValueError(f"unknown adapter site {site!r}; expected one of {SITES}")
        if site in self.adapters:
            raise ValueError(f"site {site!r} already holds an adapter")
        self.adapters[site] = adapter

    def vjp(self, x):
        A = self.adapters
        h, ln1_back = self.ln1.vjp(x)
        pre_a, pre_a_back = (A["pre_attn"].vjp(h) if "pre_attn" in A else (h, None))
        a, attn_back = self.attn.vjp(pre_a)
        post_a, post_a_back = (A["post_attn"].vjp(a) if "post_attn" in A else (a, None))
        x1 = T.add(x, post_a)

        h2, ln2_back = self.ln2.vjp(x1)
        pre_f, pre_f_back = (A["pre_ffn"].vjp(h2) if "pre_ffn" in A else (h2, None))
        f, ffn_back = self.ffn.vjp(pre_f)
        post_f, post_f_back = (A["post_ffn"].vjp(f) if "post_ffn" in A else (f, None))
        par_back = None
        if "parallel_ffn" in A:
            branch, par_back = A["parallel_ffn"].branch_vjp(x1)
            post_f = T.add(post_f, branch)
        y = T.add(x1, post_f)

        def pullback(dy):
            df = post_f_back(dy) if post_f_back else dy
            dpre_f = ffn_back(df)
            dh2 = pre_f_back(dpre_f) if pre_f_back else dpre_f
            dx1 = dy + ln2_back(dh2)
            if par_back is not None:
                dx1 = dx1 + par_back(dy)
            da = post_a_back(dx1) if post_a_back else dx1
            dpre_a = attn_back(da)
            dh = pre_a_back(dpre_a) if pre_a_back else dpre_a
            return dx1 + ln1_back(dh)

        return y, pullback


class PatchEmbed(Module):
    """Split ``(C, H, W)`` images into flattened patches, project, prepend cls, add positions."""

    def __init__(self, proj: Linear, cls_token: Tensor, pos: Tensor, patch: int, channels: int):
        if proj.d_in != channels * patch * patch:
            raise ShapeError("projection input width must equal channels * patch * patch")
        self.proj = proj
        self.cls_token = Param(cls_token)
        self.pos = Param(pos)
        self.patch = patch
        self.channels = channels

    @classmethod
    def init(cls, image_size: int, patch: int, channels: int, d: int, rng, dtype=np.float64):
        if image_size % patch:
            raise ShapeError("image size must be a multiple of the patch size")
        n = (image_size // patch) ** 2
        proj = Linear.init(channels * patch * patch, d, rng, True, dtype)
        cls_tok = rng.normal(0, 0.02, size=(1, d)).astype(dtype)
        pos = rng.normal(0, 0.02, size=(n + 1, d)).astype(dtype)
        return cls(proj, cls_tok, pos, patch, channels)

    def patchify(self, images: Tensor) -> Tensor:
        *lead, c, h, w = images.shape
        p = self.patch
        if c != self.channels or h % p or w % p:
            raise ShapeError(f"image shape {images.shape} incompatible with patch {p}, channels {self.channels}")
        L = len(lead)
        a = images.reshape(*lead, c, h // p, p, w // p, p)
        a = a.transpose(*range(L), L + 1, L + 3, L, L + 2, L + 4)
        a = a.reshape(*lead, (h // p) * (w // p), c * p * p)
        T._record("patchify")
        return np.ascontiguousarray(a)

    def vjp(self, images):
        patches = self.patchify(images)
        z, proj_back = self.proj.vjp(patches)
        cls_tok = np.broadcast_to(self.cls_token.value, z.shape[:-2] + (1, z.shape[-1]))
        tokens = T.add(T.concat([cls_tok, z], axis=-2), self.pos.value)
        if tokens.shape[-2] != self.pos.value.shape[0]:
            raise ShapeError("token count does not match positional table")

        def pullback(dy):
            self.pos.accumulate(dy.reshape(-1, *dy.shape[-2:]).sum(axis=0))
            self.cls_token.accumulate(dy[..., :1, :].reshape(-1, dy.shape[-1]).sum(axis=0))
            proj_back(dy[..., 1:, :])
            return None

        return tokens, pullback


@dataclass
class _ConvGeom:
    ho: int
    wo: int


class ConvLayer(Module):
    """2-D cross-correlation with zero padding; kernel is ``c_out x c_in x K x K``."""

    def __init__(self, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0):
        if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
            raise ShapeError(f"kernel must be c_out x c_in x K x K, got {kernel.shape}")
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        self.kernel = Param(kernel)
        self.bias = None if bias is None else Param(bias)
        self.stride = stride
        self.padding = padding

    @classmethod
    def init(cls, c_in: int, c_out: int, k: int, rng, stride=1, padding=0, bias=True, dtype=np.float64):
        std = 1.0 / math.sqrt(c_in * k * k)
        kernel = rng.normal(0, std, size=(c_out, c_in, k, k)).astype(dtype)
        b = rng.normal(0, 0.02, size=c_out).astype(dtype) if bias else None
        return cls(kernel, b, stride, padding)

    @property
    def c_in(self) -> int:
        return self.kernel.value.shape[1]

    @property
    def c_out(self) -> int:
        return self.kernel.value.shape[0]

    def out_size(self, h: int, w: int) -> _ConvGeom:
        K, p, s = self.kernel.value.shape[2], self.padding, self.stride
        if h + 2 * p < K or w + 2 * p < K:
            raise ShapeError(f"kernel {K} larger than padded input {h + 2 * p}x{w + 2 * p}")
        return _ConvGeom((h + 2 * p - K) // s + 1, (w + 2 * p - K) // s + 1)

    def _im2col(self, x: Tensor, g: _ConvGeom) -> Tensor:
        K, p, s = self.kernel.value.shape[2], self.padding, self.stride
        xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]) if p else x
        lead, c = x.shape[:-3], x.shape[-3]
        cols = np.empty(lead + (c, K, K, g.ho, g.wo), dtype=x.dtype)
        for u in range(K):
            for v in range(K):
                cols[..., u, v, :, :] = xp[..., u:u + s * g.ho:s, v:v + s * g.wo:s]
        cols = np.moveaxis(cols.reshape(lead + (c * K * K, g.ho * g.wo)), -1, -2)
        T._record("im2col")
        return np.ascontiguousarray(cols)

    def _col2im(self, dcols: Tensor, shape, g: _ConvGeom) -> Tensor:
        K, p, s = self.kernel.value.shape[2], self.padding, self.stride
        *lead, c, h, w = shape
        d = np.moveaxis(dcols, -1, -2).reshape(*lead, c, K, K, g.ho, g.wo)
        dxp = np.zeros((*lead, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
        for u in range(K):
            for v in range(K):
                dxp[..., u:u + s * g.ho:s, v:v + s * g.wo:s] += d[..., u, v, :, :]
        return dxp[..., p:p + h, p:p + w] if p else dxp

    def vjp(self, x):
        if x.ndim < 3 or x.shape[-3] != self.c_in:
            raise ShapeError(f"conv expects (..., {self.c_in}, H, W) input, got {x.shape}")
        g = self.out_size(*x.shape[-2:])
        cols = self._im2col(x, g)
        wmat = T.transpose(T.reshape(self.kernel.value, (self.c_out, -1)))
        y = T.matmul(cols, wmat)
        if self.bias is not None:
            y = T.add(y, self.bias.value)
        y = T.reshape(T.transpose(y), x.shape[:-3] + (self.c_out, g.ho, g.wo))

        def pullback(dy):
            dyf = np.swapaxes(dy.reshape(dy.shape[:-2] + (-1,)), -1, -2)
            if self.kernel.trainable:
                dw = T.matmul(T.transpose(_flat(cols)), _flat(dyf))
                self.kernel.accumulate(dw.T)
            if self.bias is not None:
                self.bias.accumulate(_flat(dyf).sum(axis=0))
            dcols = T.matmul(dyf, T.transpose(wmat))
            return self._col2im(dcols, x.shape, g)

        return y, pullback


def channels_last(x: Tensor) -> Tensor:
    T._record("transpose")
    return np.moveaxis(x, -3, -1)


def channels_first(x: Tensor) -> Tensor:
    T._record("transpose")
    return np.moveaxis(x, -1, -3)


class ConvBlock(Module):
    """``[adapter per pixel] -> conv -> activation``."""

    def __init__(self, conv: ConvLayer, adapter: Module | None = None, activation: str | None = "gelu"):
        self.conv = conv
        self.adapter = adapter
        self.activation = activation

    def vjp(self, x):
        back_adapter = None
        if self.adapter is not None:
            z, back_adapter = self.adapter.vjp(channels_last(x))
            x = channels_first(z)
        y, conv_back = self.conv.vjp(x)
        act_back = None
        if self.activation is not None:
            y, act_back = ACTIVATIONS[self.activation](y)

        def pullback(dy):
            if act_back is not None:
                dy = act_back(dy)
            dx = conv_back(dy)
            if back_adapter is not None:
                dx = np.moveaxis(back_adapter(np.moveaxis(dx, -3, -1)), -1, -3)
            return dx

        return y, pullback


class Backbone(Module):
    """Shared plumbing for the two model families: training hooks and metadata."""

    kind = "base"

    def forward_train(self, x: Tensor) -> Tensor:
        y, self._pullback = self.vjp(x)
        return y

    def backward(self, dy: Tensor) -> None:
        pullback = getattr(self, "_pullback", None)
        if pullback is None:
            raise RuntimeError("backward called before forward_train")
        self._pullback = None
        pullback(dy)

    @property
    def dtype(self) -> np.dtype:
        return next(self.named_params())[1].value.dtype

    def adapter_sites(self) -> list[tuple[int, str, Module]]:
        raise NotImplementedError

    def input_shape(self) -> tuple[int, ...]:
        raise NotImplementedError


class VisionTransformer(Backbone):
    kind = "vit"

    def __init__(self, embed: PatchEmbed, blocks: list[ViTBlock], norm: LayerNorm, head: Linear,
                 image_size: int):
        self.embed = embed
        self.blocks = list(blocks)
        self.norm = norm
        self.head = head
        self.image_size = image_size

    @classmethod
    def init(cls, *, image_size=8, patch=4, channels=3, width=32, depth=2, heads=4, mlp_hidden=None,
             n_classes=4, seed=0, dtype=np.float64, eps=1e-6) -> VisionTransformer:
        rng = np.random.default_rng(seed)
        embed = PatchEmbed.init(image_size, patch, channels, width, rng, dtype)
        blocks = [ViTBlock.init(width, heads, rng, mlp_hidden, dtype, eps) for _ in range(depth)]
        return cls(embed, blocks, LayerNorm.init(width, dtype, eps),
                   Linear.init(width, n_classes, rng, True, dtype), image_size)

    @property
    def width(self) -> int:
        return self.head.d_in

    def input_shape(self):
        return (self.embed.channels, self.image_size, self.image_size)

    def adapter_sites(self):
        return [(i, site, a) for i, b in enumerate(self.blocks) for site, a in b.adapters.items()]

    def features_vjp(self, x):
        tokens, embed_back = self.embed.vjp(x)
        backs = []
        for block in self.blocks:
            tokens, back = block.vjp(tokens)
            backs.append(back)
        normed, norm_back = self.norm.vjp(tokens)
        cls_feat = normed[..., 0, :]
        T._record("select")

        def pullback(dfeat):
            d = np.zeros_like(normed)
            d[..., 0, :] = dfeat
            d = norm_back(d)
            for back in reversed(backs):
                d = back(d)
            return embed_back(d)

        return cls_feat, pullback

    def features(self, x):
        return self.features_vjp(x)[0]

    def vjp(self, x):
        feat, feat_back = self.features_vjp(x)
        logits, head_back = self.head.vjp(feat)
        return logits, lambda dy: feat_back(head_back(dy))


class ConvNet(Backbone):
    """Stack of conv blocks, global average pool and a linear head."""

    kind = "conv"

    def __init__(self, blocks: list[ConvBlock], head: Linear, image_size: int, channels: int):
        self.blocks = list(blocks)
        self.head = head
        self.image_size = image_size
        self.channels = channels

    @classmethod
    def init(cls, *, image_size=8, channels=3, widths=(8, 8), kernel=3, padding=1, n_classes=4,
             seed=0, dtype=np.float64) -> ConvNet:
        rng = np.random.default_rng(seed)
        blocks, c = [], channels
        for w in widths:
            blocks.append(ConvBlock(ConvLayer.init(c, w, kernel, rng, 1, padding, True, dtype)))
            c = w
        return cls(blocks, Linear.init(c, n_classes, rng, True, dtype), image_size, channels)

    def input_shape(self):
        return (self.channels, self.image_size, self.image_size)

    def adapter_sites(self):
        return [(i, "pre_conv", b.adapter) for i, b in enumerate(self.blocks) if b.adapter is not None]

    def features_vjp(self, x):
        backs = []
        for block in self.blocks:
            x, back = block.vjp(x)
            backs.append(back)
        pooled = T.mean_axes(x, (-2, -1))
        shape = x.shape

        def pullback(dfeat):
            d = np.broadcast_to(dfeat[..., None, None] / (shape[-1] * shape[-2]), shape).copy()
            for back in reversed(backs):
                d = back(d)
            return d

        return pooled, pullback

    def features(self, x):
        return self.features_vjp(x)[0]

    def vjp(self, x):
        feat, feat_back = self.features_vjp(x)
        logits, head_back = self.head.vjp(feat)
        return logits, lambda dy: feat_back(head_back(dy))


def cast(model: Module, dtype) -> Module:
    """Deep copy of ``model`` with every parameter converted to ``dtype``."""
    out = copy.deepcopy(model)
    out._pullback = None
    for _, p in out.named_params():
        p.value = p.value.astype(dtype)
        p.grad = None
    return out
