"""Binary checkpoint format and model (de)serialisation.

Layout, all integers little-endian::

    b"SREP"  version:u16  count:u32
    count x { name_len:u16  name:utf-8  dtype:u8 (0=f32, 1=f64)  rank:u8
              dims:u32[rank]  data:little-endian row-major }

Architecture hyper-parameters travel as rank-0 ``float64`` entries under
``meta.``; everything else is a parameter tensor keyed by its dotted path.
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .adapters import BaselineAdapter, GroupwiseLinear, RepAdapter
from .nn import (ConvBlock, ConvLayer, ConvNet, FeedForward, LayerNorm, Linear, Module,
                 MultiHeadAttention, PatchEmbed, VisionTransformer, ViTBlock, Backbone)

MAGIC = b"SREP"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_ACTS = {None: -1, "gelu": 0, "relu": 1}
_ACT_NAMES = {v: k for k, v in _ACTS.items()}


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", _CODES[dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 10:
        raise CheckpointError(f"{path}: corrupt checkpoint (header truncated)")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            dtype = _DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(buf):
                raise CheckpointError(f"{path}: truncated data for {name}")
            out[name] = np.frombuffer(buf, dtype=dtype, count=size // dtype.itemsize,
                                      offset=pos).reshape(dims).astype(dtype.newbyteorder("="))
            pos += size
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def _meta(v) -> np.ndarray:
    return np.array(float(v), dtype=np.float64)


def model_state(model: Backbone) -> dict[str, np.ndarray]:
    """Flatten a model into checkpoint entries (metadata first, then parameters)."""
    meta: dict[str, np.ndarray] = {}
    if isinstance(model, VisionTransformer):
        meta["meta.arch"] = _meta(0)
        meta["meta.image_size"] = _meta(model.image_size)
        meta["meta.patch"] = _meta(model.embed.patch)
        meta["meta.channels"] = _meta(model.embed.channels)
        meta["meta.heads"] = _meta(model.blocks[0].attn.n_heads if model.blocks else 1)
        meta["meta.eps"] = _meta(model.norm.eps)
        for i, block in enumerate(model.blocks):
            for site, adapter in block.adapters.items():
                _adapter_meta(meta, f"blocks.{i}.adapters.{site}", adapter)
    elif isinstance(model, ConvNet):
        meta["meta.arch"] = _meta(1)
        meta["meta.image_size"] = _meta(model.image_size)
        meta["meta.channels"] = _meta(model.channels)
        for i, block in enumerate(model.blocks):
            meta[f"meta.blocks.{i}.stride"] = _meta(block.conv.stride)
            meta[f"meta.blocks.{i}.padding"] = _meta(block.conv.padding)
            meta[f"meta.blocks.{i}.activation"] = _meta(_ACTS[block.activation])
            if block.adapter is not None:
                _adapter_meta(meta, f"blocks.{i}.adapter", block.adapter)
    else:
        raise TypeError(f"unsupported model {type(model).__name__}")
    params = {name: p.value for name, p in model.named_params()}
    return {**meta, **params}


def _adapter_meta(meta, path, adapter) -> None:
    meta[f"meta.{path}.kind"] = _meta(0 if isinstance(adapter, RepAdapter) else 1)
    meta[f"meta.{path}.scale"] = _meta(adapter.scale)
    if isinstance(adapter, BaselineAdapter):
        meta[f"meta.{path}.activation"] = _meta(_ACTS[adapter.activation])


def _int(state, key) -> int:
    if key not in state:
        raise CheckpointError(f"missing entry {key}")
    return int(state[key])


def _linear(state, prefix) -> Linear:
    if f"{prefix}.weight" not in state:
        raise CheckpointError(f"missing entry {prefix}.weight")
    return Linear(state[f"{prefix}.weight"].copy(), _opt(state, f"{prefix}.bias"))


def _opt(state, key):
    return state[key].copy() if key in state else None


def _proj(state, prefix) -> Module:
    if f"{prefix}.weight" in state:
        return _linear(state, prefix)
    weights, j = [], 0
    while f"{prefix}.weights.{j}" in state:
        weights.append(state[f"{prefix}.weights.{j}"].copy())
        j += 1
    if not weights:
        raise CheckpointError(f"missing projection {prefix}")
    return GroupwiseLinear(weights, _opt(state, f"{prefix}.bias"))


def _adapter(state, path) -> Module:
    kind = _int(state, f"meta.{path}.kind")
    scale = float(state[f"meta.{path}.scale"])
    down, up = _proj(state, f"{path}.down"), _proj(state, f"{path}.up")
    if kind == 0:
        return RepAdapter(down, up, scale)
    act = _ACT_NAMES[_int(state, f"meta.{path}.activation")]
    return BaselineAdapter(down, up, act, scale)


def _layernorm(state, prefix, eps) -> LayerNorm:
    return LayerNorm(state[f"{prefix}.gamma"].copy(), state[f"{prefix}.beta"].copy(), eps)


def model_from_state(state: Mapping[str, np.ndarray]) -> Backbone:
    arch = _int(state, "meta.arch")
    if arch == 0:
        eps = float(state["meta.eps"])
        heads = _int(state, "meta.heads")
        channels, patch = _int(state, "meta.channels"), _int(state, "meta.patch")
        embed = PatchEmbed(_linear(state, "embed.proj"), state["embed.cls_token"].copy(),
                           state["embed.pos"].copy(), patch, channels)
        blocks, i = [], 0
        while f"blocks.{i}.ln1.gamma" in state:
            p = f"blocks.{i}"
            attn = MultiHeadAttention(*(_linear(state, f"{p}.attn.{n}") for n in ("q", "k", "v", "out")),
                                      n_heads=heads)
            ffn = FeedForward(_linear(state, f"{p}.ffn.fc1"), _linear(state, f"{p}.ffn.fc2"))
            adapters = {}
            for key in state:
                head = f"meta.{p}.adapters."
                if key.startswith(head) and key.endswith(".kind"):
                    site = key[len(head):-len(".kind")]
                    adapters[site] = _adapter(state, f"{p}.adapters.{site}")
            blocks.append(ViTBlock(_layernorm(state, f"{p}.ln1", eps), attn,
                                   _layernorm(state, f"{p}.ln2", eps), ffn, adapters))
            i += 1
        return VisionTransformer(embed, blocks, _layernorm(state, "norm", eps), _linear(state, "head"),
                                 _int(state, "meta.image_size"))
    if arch == 1:
        blocks, i = [], 0
        while f"blocks.{i}.conv.kernel" in state:
            p = f"blocks.{i}"
            conv = ConvLayer(state[f"{p}.conv.kernel"].copy(), _opt(state, f"{p}.conv.bias"),
                             _int(state, f"meta.{p}.stride"), _int(state, f"meta.{p}.padding"))
            adapter = _adapter(state, f"{p}.adapter") if f"meta.{p}.adapter.kind" in state else None
            blocks.append(ConvBlock(conv, adapter, _ACT_NAMES[_int(state, f"meta.{p}.activation")]))
            i += 1
        return ConvNet(blocks, _linear(state, "head"), _int(state, "meta.image_size"),
                       _int(state, "meta.channels"))
    raise CheckpointError(f"unknown architecture code {arch}")


def save_model(path: str | Path, model: Backbone) -> None:
    save_tensors(path, model_state(model))


def load_model(path: str | Path) -> Backbone:
    return model_from_state(load_tensors(path))
