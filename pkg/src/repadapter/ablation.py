"""Ablation sweeps over group count, hidden width, placement and adapter variant.

Every row carries two parameter counts: the adapters of the small model that
is actually trained on the synthetic task, and the same adapter configuration
evaluated on a reference geometry (12 blocks of width 768 by default) for
comparison with published parameter tables.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

from .adapters import AdapterConfig, ConfigError, count_params, format_millions
from .config import RunConfig
from .train import train_adapters, is_adapter_param

AXES = ("groups", "dims", "positions", "variants")

BASE = AdapterConfig(c=8, k=2, sites=("pre_attn",))


@dataclass
class AblationRow:
    axis: str
    setting: str
    params: int
    ref_params: int
    val_acc: float | None

    @property
    def ref_millions(self) -> str:
        return format_millions(self.ref_params)


def settings(axis: str, spec: dict, base: AdapterConfig) -> list[tuple[str, AdapterConfig]]:
    if axis == "groups":
        return [(f"k={k}", replace(base, k=k)) for k in spec["groups"]]
    if axis == "dims":
        return [(f"c={c}", replace(base, c=c)) for c in spec["dims"]]
    if axis == "positions":
        return [(site, replace(base, sites=(site,))) for site in spec["positions"]]
    if axis == "variants":
        out = []
        for name in spec["variants"]:
            if name == "default":
                out.append((name, base))
            elif name == "with_act":
                out.append((name, replace(base, variant="baseline")))
            elif name == "parallel":
                out.append((name, replace(base, variant="parallel")))
            elif name == "full_sparse":
                out.append((name, replace(base, full_sparse=True)))
            else:
                raise ConfigError(f"unknown ablation variant {name!r}")
        return out
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {AXES}")


def run_ablation(cfg: RunConfig, train: bool | None = None, base: AdapterConfig = BASE) -> list[AblationRow]:
    if cfg.model["arch"] != "vit":
        raise ConfigError("ablation sweeps run on the vit backbone only")
    spec = cfg.ablate
    train = spec["train"] if train is None else train
    base = replace(base, s=cfg.adapter.s, bias=cfg.adapter.bias, activation=cfg.adapter.activation)
    rows = []
    for axis in spec["axes"]:
        for label, acfg in settings(axis, spec, base):
            acfg.validate(cfg.width)
            run = copy.deepcopy(cfg)
            run.adapter, run.adapter_enabled = acfg, True
            model = run.build_model()
            actual = sum(p.value.size for n, p in model.named_params() if is_adapter_param(n))
            expected = count_params(acfg, cfg.model["depth"], cfg.width)
            if actual != expected:
                raise AssertionError(f"{label}: built {actual} adapter params, count_params says {expected}")
            acc = None
            if train:
                _, records = train_adapters(model, run.task, replace(run.train, mode="petl"))
                acc = records[-1].val_acc if records else None
            rows.append(AblationRow(axis, label, actual,
                                    count_params(acfg, spec["ref_depth"], spec["ref_width"]), acc))
    return rows


def format_rows(rows: list[AblationRow]) -> str:
    out = [f"{'axis':<10}{'setting':<14}{'params':>8}{'ref params':>12}{'ref (M)':>9}{'val acc':>9}"]
    for r in rows:
        acc = "-" if r.val_acc is None else f"{r.val_acc:.3f}"
        out.append(f"{r.axis:<10}{r.setting:<14}{r.params:>8}{r.ref_params:>12}{r.ref_millions:>9}{acc:>9}")
    return "\n".join(out) + "\n"
