"""INI-style run configuration.

Sections and keys (all optional, defaults shown by ``DEFAULTS``)::

    [model]    arch, image_size, patch, channels, width, depth, heads,
               mlp_hidden, conv_widths, kernel, padding, n_classes, dtype, seed
    [adapter]  enabled, c, k, s, sites, bias, variant, full_sparse,
               activation, seed
    [task]     clusters_per_class, radius, spread, noise, n_train, n_val, seed
    [train]    epochs, batch_size, lr, seed, mode, max_steps
    [ablate]   axes, groups, dims, positions, variants, ref_depth,
               ref_width, train

List values are comma-separated. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig, ConfigError, attach_adapters
from .nn import Backbone, ConvNet, VisionTransformer
from .train import SyntheticTask, TrainConfig

DEFAULTS: dict[str, dict[str, str]] = {
    "model": {
        "arch": "vit", "image_size": "8", "patch": "4", "channels": "3", "width": "128",
        "depth": "2", "heads": "4", "mlp_hidden": "0", "conv_widths": "8,8", "kernel": "3",
        "padding": "1", "n_classes": "2", "dtype": "float64", "seed": "0",
    },
    "adapter": {
        "enabled": "true", "c": "8", "k": "2", "s": "1.0", "sites": "pre_attn,pre_ffn",
        "bias": "false", "variant": "repadapter", "full_sparse": "false", "activation": "gelu",
        "seed": "0",
    },
    "task": {
        "clusters_per_class": "2", "radius": "3.0", "spread": "0.5", "noise": "0.3",
        "n_train": "512", "n_val": "256", "seed": "0",
    },
    "train": {
        "epochs": "10", "batch_size": "32", "lr": "1e-3", "seed": "0", "mode": "petl",
        "max_steps": "0",
    },
    "ablate": {
        "axes": "groups,dims,positions,variants", "groups": "1,2,4,8", "dims": "4,8,12,16",
        "positions": "pre_attn,post_attn,pre_ffn,post_ffn",
        "variants": "default,with_act,parallel,full_sparse", "ref_depth": "12",
        "ref_width": "768", "train": "true",
    },
}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    adapter_enabled: bool = True
    adapter_seed: int = 0
    task: SyntheticTask = field(default_factory=SyntheticTask)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.model["width"]

    def build_model(self) -> Backbone:
        m = self.model
        dtype = np.dtype(m["dtype"])
        if m["arch"] == "vit":
            model = VisionTransformer.init(
                image_size=m["image_size"], patch=m["patch"], channels=m["channels"],
                width=m["width"], depth=m["depth"], heads=m["heads"],
                mlp_hidden=m["mlp_hidden"] or None, n_classes=m["n_classes"], seed=m["seed"], dtype=dtype)
        else:
            model = ConvNet.init(image_size=m["image_size"], channels=m["channels"],
                                 widths=tuple(m["conv_widths"]), kernel=m["kernel"], padding=m["padding"],
                                 n_classes=m["n_classes"], seed=m["seed"], dtype=dtype)
        if self.adapter_enabled:
            attach_adapters(model, self.adapter, self.adapter_seed)
        return model


def _ints(value: str) -> list[int]:
    return [int(v) for v in value.split(",") if v.strip()]


def _strs(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _get(section, key, kind):
    raw = section[key]
    try:
        if kind is bool:
            return section.getboolean(key)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key} = {raw!r}: {exc}") from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.read_dict(DEFAULTS)
    user = configparser.ConfigParser()
    try:
        user.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for sec in user.sections():
        if sec not in DEFAULTS:
            raise ConfigError(f"unknown section [{sec}]")
        for key, value in user[sec].items():
            if key not in DEFAULTS[sec]:
                raise ConfigError(f"unknown key [{sec}] {key}")
            parser[sec][key] = value

    m = parser["model"]
    model = {k: _get(m, k, int) for k in ("image_size", "patch", "channels", "width", "depth",
                                         "heads", "mlp_hidden", "kernel", "padding", "n_classes", "seed")}
    model["arch"] = m["arch"].strip()
    model["dtype"] = m["dtype"].strip()
    model["conv_widths"] = _ints(m["conv_widths"])
    if model["arch"] not in ("vit", "conv"):
        raise ConfigError(f"[model] arch must be 'vit' or 'conv', got {model['arch']!r}")
    if model["dtype"] not in ("float32", "float64"):
        raise ConfigError(f"[model] dtype must be float32 or float64, got {model['dtype']!r}")
    if model["arch"] == "vit":
        if model["width"] % model["heads"]:
            raise ConfigError(f"[model] width={model['width']} is not divisible by heads={model['heads']}")
        if model["image_size"] % model["patch"]:
            raise ConfigError("[model] image_size must be a multiple of patch")

    a = parser["adapter"]
    sites = _strs(a["sites"])
    if model["arch"] == "conv" and a["sites"] == DEFAULTS["adapter"]["sites"]:
        sites = ["pre_conv"]
    adapter = AdapterConfig(c=_get(a, "c", int), k=_get(a, "k", int), s=_get(a, "s", float),
                            sites=tuple(sites), bias=_get(a, "bias", bool), variant=a["variant"].strip(),
                            full_sparse=_get(a, "full_sparse", bool), activation=a["activation"].strip())
    enabled = _get(a, "enabled", bool)
    if enabled:
        widths = [model["width"]] if model["arch"] == "vit" else [model["channels"], *model["conv_widths"][:-1]]
        for w in widths:
            adapter.validate(w)

    t = parser["task"]
    task = SyntheticTask(n_classes=model["n_classes"], clusters_per_class=_get(t, "clusters_per_class", int),
                         image_size=model["image_size"], channels=model["channels"],
                         radius=_get(t, "radius", float), spread=_get(t, "spread", float),
                         noise=_get(t, "noise", float), n_train=_get(t, "n_train", int),
                         n_val=_get(t, "n_val", int), seed=_get(t, "seed", int))

    tr = parser["train"]
    max_steps = _get(tr, "max_steps", int)
    train = TrainConfig(epochs=_get(tr, "epochs", int), batch_size=_get(tr, "batch_size", int),
                        lr=_get(tr, "lr", float), seed=_get(tr, "seed", int), mode=tr["mode"].strip(),
                        max_steps=max_steps or None)
    if train.mode not in ("petl", "head", "full"):
        raise ConfigError(f"[train] mode must be petl, head or full, got {train.mode!r}")

    ab = parser["ablate"]
    ablate = {"axes": _strs(ab["axes"]), "groups": _ints(ab["groups"]), "dims": _ints(ab["dims"]),
              "positions": _strs(ab["positions"]), "variants": _strs(ab["variants"]),
              "ref_depth": _get(ab, "ref_depth", int), "ref_width": _get(ab, "ref_width", int),
              "train": _get(ab, "train", bool)}
    return RunConfig(model, adapter, enabled, _get(a, "seed", int), task, train, ablate)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    return parse_config(path.read_text())
