import sys

import numpy as np
import pytest

from repadapter.adapters import AdapterConfig, attach_adapters
from repadapter.nn import ConvNet, VisionTransformer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_vit(width=32, depth=2, heads=4, seed=0, dtype=np.float64, **kw):
    return VisionTransformer.init(image_size=8, patch=4, channels=3, width=width, depth=depth,
                                  heads=heads, n_classes=3, seed=seed, dtype=dtype, **kw)


def vit_with_adapters(sites=("pre_attn", "pre_ffn"), s=1.0, c=8, k=2, bias=False, seed=0,
                      dtype=np.float64, up_std=0.05, **kw):
    m = tiny_vit(seed=seed, dtype=dtype, **kw)
    cfg = AdapterConfig(c=c, k=k, s=s, sites=tuple(sites), bias=bias, up_init_std=up_std)
    return attach_adapters(m, cfg, seed=seed + 1)


def conv_with_adapters(c=4, k=1, bias=False, padding=1, seed=0, up_std=0.05):
    m = ConvNet.init(image_size=6, channels=4, widths=(4, 4), kernel=3, padding=padding, n_classes=3,
                     seed=seed)
    cfg = AdapterConfig(c=c, k=k, sites=("pre_conv",), bias=bias, up_init_std=up_std)
    attach_adapters(m, cfg, seed=seed + 1)
    if bias:
        for block in m.blocks:
            block.adapter.up.bias.value[:] = np.random.default_rng(seed).normal(0, 0.1, block.conv.c_in)
    return m


def randomize_biases(model, seed=0, std=0.1):
    rng = np.random.default_rng(seed)
    for name, p in model.named_params():
        if name.endswith("bias") and (".adapters." in name or ".adapter." in name):
            p.value[:] = rng.normal(0, std, p.value.shape)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
