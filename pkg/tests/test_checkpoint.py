import numpy as np
import pytest

from repadapter.adapters import AdapterConfig, attach_adapters
from repadapter.checkpoint import CheckpointError, load_model, load_tensors, save_model, save_tensors
from repadapter.nn import ConvNet, cast
from repadapter.reparam import merge_model, probe_batch

from conftest import conv_with_adapters, tiny_vit, vit_with_adapters


def test_byte_layout_by_hand(tmp_path):
    path = tmp_path / "t.srep"
    save_tensors(path, {"ab": np.array([[1.0, -2.0]], dtype=np.float32)})
    expected = (b"SREP" + bytes([1, 0]) + bytes([1, 0, 0, 0])       # version 1, one entry
                + bytes([2, 0]) + b"ab" + bytes([0, 2])              # name, f32, rank 2
                + bytes([1, 0, 0, 0, 2, 0, 0, 0])                    # dims 1 x 2
                + bytes.fromhex("0000803f") + bytes.fromhex("000000c0"))
    assert path.read_bytes() == expected


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_round_trip_is_bitwise(tmp_path, rng, dtype):
    tensors = {"scalar": np.array(3.5, dtype=dtype), "w": rng.standard_normal((3, 4, 2)).astype(dtype),
               "nan": np.array([np.nan, -0.0, np.inf], dtype=dtype), "empty": np.zeros((0, 3), dtype=dtype)}
    save_tensors(tmp_path / "a", tensors)
    back = load_tensors(tmp_path / "a")
    assert list(back) == list(tensors)
    for name in tensors:
        assert back[name].dtype == tensors[name].dtype and back[name].tobytes() == tensors[name].tobytes()


def model_cases():
    yield "vit", vit_with_adapters(bias=True)
    yield "vit-post", attach_adapters(tiny_vit(), AdapterConfig(sites=("post_attn", "post_ffn"), up_init_std=0.1))
    yield "vit-baseline", attach_adapters(tiny_vit(), AdapterConfig(variant="baseline", activation="relu"))
    yield "vit-parallel", attach_adapters(tiny_vit(), AdapterConfig(variant="parallel", full_sparse=True))
    yield "conv", conv_with_adapters(k=2, bias=True)
    yield "conv-plain", ConvNet.init(image_size=6, channels=2, widths=(3, 5), kernel=3, padding=0, seed=1)
    yield "merged", merge_model(vit_with_adapters())[0]


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("name,model", list(model_cases()), ids=lambda v: v if isinstance(v, str) else "")
def test_model_save_load_save_is_byte_identical(tmp_path, name, model, dtype):
    model = cast(model, dtype)
    save_model(tmp_path / "a", model)
    loaded = load_model(tmp_path / "a")
    save_model(tmp_path / "b", loaded)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    x = probe_batch(model, 3, seed=0)
    assert np.array_equal(model.forward(x), loaded.forward(x))
    assert type(loaded) is type(model) and loaded.dtype == dtype
    assert [(i, s, type(a)) for i, s, a in loaded.adapter_sites()] == \
        [(i, s, type(a)) for i, s, a in model.adapter_sites()]


def test_merged_checkpoint_has_no_adapter_tensors(tmp_path):
    save_model(tmp_path / "m", merge_model(vit_with_adapters())[0])
    assert not any("adapter" in n for n in load_tensors(tmp_path / "m"))


@pytest.mark.parametrize("mutate,message", [
    (lambda b: b"XXXX" + b[4:], "bad magic"),
    (lambda b: b[:4] + bytes([2, 0]) + b[6:], "unsupported checkpoint version 2"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing bytes"),
    (lambda b: b[:7], "corrupt"),
])
def test_malformed_files_rejected(tmp_path, mutate, message):
    save_tensors(tmp_path / "ok", {"w": np.ones((2, 2))})
    (tmp_path / "bad").write_bytes(mutate((tmp_path / "ok").read_bytes()))
    with pytest.raises(CheckpointError, match=message):
        load_tensors(tmp_path / "bad")


def test_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError):
        save_tensors(tmp_path / "x", {"i": np.arange(3)})


def test_missing_metadata(tmp_path):
    save_tensors(tmp_path / "x", {"w": np.ones(2)})
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "x")
