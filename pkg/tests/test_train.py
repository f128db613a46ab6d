import json

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from repadapter.adapters import AdapterConfig, attach_adapters
from repadapter.nn import ConvNet, Linear, VisionTransformer
from repadapter.train import (Adam, ParamStore, SyntheticTask, TrainConfig, backbone_checksum, loss_and_grads, mse,
                              softmax_cross_entropy, train_adapters)

from conftest import randomize_biases, tiny_vit
from oracles import fd_gradcheck


def gradcheck_vit(mode, sites=("pre_attn", "pre_ffn"), **cfg_kw):
    m = VisionTransformer.init(image_size=4, patch=2, channels=1, width=8, depth=1, heads=2, n_classes=3, seed=3)
    attach_adapters(m, AdapterConfig(c=4, k=2, s=0.7, sites=sites, bias=True, up_init_std=0.3, init_std=0.3,
                                     **cfg_kw), seed=4)
    randomize_biases(m, seed=5)
    rng = np.random.default_rng(6)
    return m, ParamStore(m, mode), rng.standard_normal((3, 1, 4, 4)), rng.integers(0, 3, 3)


class TestGradients:
    def test_petl_adapter_and_head(self):
        m, store, x, y = gradcheck_vit("petl")
        errors = fd_gradcheck(m, store, x, y, softmax_cross_entropy)
        names = set(errors)
        assert {"blocks.0.adapters.pre_attn.down.weight", "blocks.0.adapters.pre_attn.down.bias",
                "blocks.0.adapters.pre_attn.up.weights.0", "blocks.0.adapters.pre_attn.up.weights.1",
                "blocks.0.adapters.pre_ffn.up.bias", "head.weight", "head.bias"} <= names
        assert max(errors.values()) <= 1e-4, errors

    def test_full_vit(self):
        m, store, x, y = gradcheck_vit("full")
        errors = fd_gradcheck(m, store, x, y, softmax_cross_entropy)
        for part in ("embed.proj.weight", "embed.cls_token", "embed.pos", "blocks.0.ln1.gamma",
                     "blocks.0.attn.q.weight", "blocks.0.attn.k.bias", "blocks.0.ffn.fc1.weight", "norm.beta"):
            assert part in errors
        assert max(errors.values()) <= 1e-4, errors

    @pytest.mark.parametrize("kw", [dict(sites=("post_attn", "post_ffn")), dict(variant="parallel"),
                                    dict(variant="baseline"), dict(full_sparse=True)])
    def test_other_wirings(self, kw):
        m, store, x, y = gradcheck_vit("petl", **kw)
        errors = fd_gradcheck(m, store, x, y, softmax_cross_entropy)
        assert max(errors.values()) <= 1e-4, errors

    def test_full_conv(self):
        m = ConvNet.init(image_size=5, channels=2, widths=(4, 4), kernel=3, padding=1, n_classes=3, seed=2)
        attach_adapters(m, AdapterConfig(c=2, k=2, sites=("pre_conv",), bias=True, up_init_std=0.3), seed=1)
        randomize_biases(m, seed=2)
        rng = np.random.default_rng(0)
        store = ParamStore(m, "full")
        errors = fd_gradcheck(m, store, rng.standard_normal((2, 2, 5, 5)), rng.integers(0, 3, 2),
                              softmax_cross_entropy)
        assert "blocks.1.conv.kernel" in errors and "blocks.0.adapter.up.weights.1" in errors
        assert max(errors.values()) <= 1e-4, errors

    def test_single_token_query_key_get_zero_grad(self, rng):
        from repadapter.nn import MultiHeadAttention
        mha = MultiHeadAttention.init(4, 2, rng)
        y, back = mha.vjp(rng.standard_normal((2, 1, 4)))
        back(rng.standard_normal(y.shape))
        assert not mha.q.weight.grad.any() and not mha.k.weight.grad.any()
        assert mha.v.weight.grad.any()

    def test_mse_closed_form(self, rng):
        lin = Linear(rng.standard_normal((3, 2)))
        x, target = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
        pred, back = lin.vjp(x)
        back(mse(pred, target)[1])
        expected = 2 * x.T @ (x @ lin.weight.value - target) / 5
        np.testing.assert_allclose(lin.weight.grad, expected, rtol=1e-13, atol=1e-14)

    def test_cross_entropy_oracle(self, rng):
        logits, labels = rng.standard_normal((4, 3)), np.array([0, 2, 1, 1])
        loss, grad = softmax_cross_entropy(logits, labels)
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        assert loss == pytest.approx(-np.log(p[np.arange(4), labels]).mean(), rel=1e-14)
        onehot = np.eye(3)[labels]
        np.testing.assert_allclose(grad, (p - onehot) / 4, atol=1e-15)

    def test_backward_before_forward(self):
        with pytest.raises(RuntimeError, match="before forward"):
            tiny_vit().backward(np.zeros((1, 3)))

    def test_frozen_params_get_no_grad(self):
        m = attach_adapters(tiny_vit(), AdapterConfig(up_init_std=0.1))
        store = ParamStore(m, "petl")
        rng = np.random.default_rng(0)
        loss_and_grads(m, store, rng.standard_normal((2, 3, 8, 8)), np.array([0, 1]))
        assert all(p.grad is None for p in store.frozen().values())
        assert all(p.grad is not None for p in store.trainable().values())


def petl_model(width=32, seed=0):
    m = VisionTransformer.init(image_size=8, patch=4, channels=3, width=width, depth=2, heads=4, n_classes=2,
                               seed=seed)
    return attach_adapters(m, AdapterConfig(c=8, k=2), seed=seed + 1)


class TestTraining:
    def test_zero_steps_leaves_model_unchanged(self):
        m = petl_model()
        before = {n: p.value.copy() for n, p in m.named_params()}
        train_adapters(m, SyntheticTask(n_train=64, n_val=32), TrainConfig(epochs=0))
        assert all(np.array_equal(before[n], p.value) for n, p in m.named_params())

    def test_deterministic(self):
        task = SyntheticTask(n_train=96, n_val=32)
        cfg = TrainConfig(epochs=2, batch_size=16)
        _, r1 = train_adapters(petl_model(), task, cfg)
        _, r2 = train_adapters(petl_model(), task, cfg)
        assert r1 == r2

    def test_backbone_frozen_and_metrics_written(self, tmp_path):
        m = petl_model()
        before = backbone_checksum(m)
        path = tmp_path / "metrics.jsonl"
        _, records = train_adapters(m, SyntheticTask(n_train=64, n_val=32), TrainConfig(epochs=2), path)
        assert backbone_checksum(m) == before
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert [set(r) for r in lines] == [{"epoch", "step", "loss", "train_acc", "val_acc"}] * 2
        assert lines[-1]["val_acc"] == records[-1].val_acc

    def test_adapters_move(self):
        m = petl_model()
        train_adapters(m, SyntheticTask(n_train=64, n_val=32), TrainConfig(epochs=1))
        assert any(p.value.any() for n, p in m.named_params() if n.endswith("up.weights.0"))

    def test_petl_without_adapters_rejected(self):
        with pytest.raises(ValueError, match="no trainable adapter parameters"):
            train_adapters(tiny_vit(), SyntheticTask(n_train=8, n_val=8), TrainConfig(epochs=1))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ParamStore(tiny_vit(), "everything")

    def test_trainable_fraction_below_two_percent(self):
        store = ParamStore(petl_model(width=128), "petl")
        assert store.n_trainable() / store.n_total() < 0.02

    def test_head_only_solves_linear_task(self):
        task = SyntheticTask(clusters_per_class=1, radius=6.0, noise=0.1, n_train=512, n_val=128, seed=0)
        (xtr, ytr), _ = task.split()
        m = petl_model()
        oracle = LogisticRegression(max_iter=2000).fit(m.features(xtr), ytr)
        assert oracle.score(m.features(xtr), ytr) >= 0.99
        _, records = train_adapters(m, task, TrainConfig(epochs=100, max_steps=200, mode="head"))
        assert records[-1].step <= 200
        assert records[-1].train_acc >= 0.99

    def test_synthetic_task_is_not_linearly_separable(self):
        (xtr, ytr), (xva, yva) = SyntheticTask(n_train=512, n_val=512).split()
        clf = LogisticRegression(max_iter=2000).fit(xtr.reshape(len(xtr), -1), ytr)
        assert clf.score(xva.reshape(len(xva), -1), yva) < 0.65

    def test_adam_first_step_is_lr_sized(self):
        lin = tiny_vit()
        store = ParamStore(lin, "head")
        w = store.params["head.weight"]
        w.grad = np.full_like(w.value, 3.0)
        before = w.value.copy()
        Adam(store, lr=1e-3).step()
        np.testing.assert_allclose(before - w.value, 1e-3, rtol=1e-6)
