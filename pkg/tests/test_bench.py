import numpy as np
import pytest

from repadapter.adapters import AdapterConfig, attach_adapters
from repadapter.bench import BenchResult, bench, format_table
from repadapter.reparam import merge_model, op_count, strip_adapters

from conftest import tiny_vit, vit_with_adapters


@pytest.fixture(scope="module")
def variants():
    model = vit_with_adapters()
    return {"plain": strip_adapters(model), "adapter": model, "merged": merge_model(model)[0]}


def test_op_counts(variants):
    counts = {n: op_count(m) for n, m in variants.items()}
    assert counts["merged"] == counts["plain"] < counts["adapter"]


@pytest.mark.parametrize("cfg", [AdapterConfig(sites=("post_attn", "post_ffn")), AdapterConfig(variant="parallel"),
                                 AdapterConfig(variant="baseline")])
def test_unmerged_variants_cost_more(cfg):
    assert op_count(attach_adapters(tiny_vit(), cfg)) > op_count(tiny_vit())


def test_op_count_independent_of_batch(variants):
    m = variants["adapter"]
    x = np.zeros((5,) + m.input_shape())
    assert op_count(m, x) == op_count(m, x[:1])


def test_results_and_directions(variants):
    results = bench(variants, batches=(1, 4, 16), reps=30, warmup=3)
    assert len(results) == 9
    assert all(r.reps == 30 and r.threads == 1 and r.p10_ms <= r.median_ms <= r.p90_ms for r in results)
    by = {(r.variant, r.batch): r for r in results}
    for name in variants:
        tp = [by[name, b].throughput for b in (1, 4, 16)]
        assert tp[0] < tp[1] < tp[2], (name, tp)
    assert by["adapter", 16].median_ms >= by["plain", 16].median_ms


def test_minimum_reps(variants):
    with pytest.raises(ValueError):
        bench(variants, reps=29)


def test_table_lists_every_result():
    rows = [BenchResult("plain", 1, 2.0, 1.5, 2.5, 30, 61, 1), BenchResult("merged", 4, 4.0, 3.0, 5.0, 30, 61, 1)]
    table = format_table(rows)
    assert table.count("\n") == 4 and "merged" in table
    assert rows[1].throughput == pytest.approx(1000.0)
