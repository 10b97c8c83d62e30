import dataclasses
import json

import pytest
from hypothesis import given, strategies as st

from headoffload.errors import InvalidSpec, ParseError
from headoffload.workload import (GIB, PROFILE_DIR_ENV, HardwareSpec, ModelSpec, Policy,
                                  PolicyKind, builtin_models, builtin_profiles, get_model,
                                  get_profile, load_hardware_spec, load_model_spec, save_spec)

LLAMA3_8B = dict(name="llama3-8b", num_layers=32, num_q_heads=32, num_kv_heads=8, head_dim=128,
                 hidden_dim=4096, intermediate_dim=14336, vocab_size=128256, dtype_bytes=2, batch=1)


def write(tmp_path, data, name="spec.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def test_llama3_8b_file_accepted(tmp_path):
    m = load_model_spec(write(tmp_path, LLAMA3_8B))
    assert m == get_model("llama3-8b")
    assert m.kv_dim == 1024 and m.q_per_kv == 4


def test_llama3_70b_constants(llama70b):
    assert (llama70b.num_layers, llama70b.num_q_heads, llama70b.num_kv_heads) == (80, 64, 8)
    assert (llama70b.hidden_dim, llama70b.intermediate_dim) == (8192, 28672)


def test_inconsistent_head_dim_names_field(tmp_path):
    with pytest.raises(InvalidSpec) as err:
        load_model_spec(write(tmp_path, dict(LLAMA3_8B, head_dim=100)))
    assert err.value.field == "hidden_dim"


@pytest.mark.parametrize("field,value", [("num_kv_heads", 5), ("dtype_bytes", 3),
                                         ("num_layers", 0), ("vocab_size", 1.5)])
def test_invalid_model_fields(tmp_path, field, value):
    with pytest.raises(InvalidSpec) as err:
        load_model_spec(write(tmp_path, dict(LLAMA3_8B, **{field: value})))
    assert err.value.field == field


def test_unknown_and_missing_fields(tmp_path):
    with pytest.raises(InvalidSpec) as err:
        load_model_spec(write(tmp_path, dict(LLAMA3_8B, rope_theta=5e5)))
    assert err.value.field == "rope_theta"
    data = dict(LLAMA3_8B)
    del data["head_dim"]
    with pytest.raises(InvalidSpec) as err:
        load_model_spec(write(tmp_path, data))
    assert err.value.field == "head_dim"


def test_batch_defaults_to_one(tmp_path):
    data = dict(LLAMA3_8B)
    del data["batch"]
    assert load_model_spec(write(tmp_path, data)).batch == 1


@pytest.mark.parametrize("text", ["{not json", "[1, 2]", ""])
def test_malformed_file(tmp_path, text):
    path = tmp_path / "bad.json"
    path.write_text(text)
    with pytest.raises(ParseError):
        load_model_spec(path)


def test_missing_file(tmp_path):
    with pytest.raises(ParseError):
        load_hardware_spec(tmp_path / "absent.json")


def test_builtin_profiles(profile_a, profile_b):
    assert len(builtin_profiles()) >= 2
    for hw in builtin_profiles():
        hw.validate()
    assert profile_a.peak_flops == 165e12
    assert profile_a.link_bw_large == 25e9 and profile_a.link_bw_small == 13e9
    assert profile_a.device_capacity == 24 * GIB
    assert profile_b.peak_flops == 312e12 and profile_b.mem_bw == 1.4e12
    assert profile_b.link_bw_small == 23e9


@pytest.mark.parametrize("field,value", [("mem_bw", 0), ("link_bw_small", 30e9),
                                         ("link_bw_large", 2e12), ("device_count", 0)])
def test_invalid_hardware(profile_a, field, value):
    with pytest.raises(InvalidSpec) as err:
        dataclasses.replace(profile_a, **{field: value}).validate()
    assert err.value.field == field


def test_builtin_models_are_valid():
    names = set(builtin_models())
    assert {"llama3-8b", "llama3-70b", "llama2-7b", "mistral-7b", "qwen2-7b", "gemma2-9b",
            "toy"} <= names


def test_profile_dir_env(tmp_path, monkeypatch, profile_a):
    custom = dataclasses.replace(profile_a, name="lab", device_capacity=48 * GIB)
    save_spec(custom, tmp_path / "lab.json")
    monkeypatch.setenv(PROFILE_DIR_ENV, str(tmp_path))
    assert get_profile("lab") == custom
    with pytest.raises(ParseError):
        get_profile("nowhere")


@pytest.mark.parametrize("text,kind,g", [
    ("standard", PolicyKind.STANDARD, None), ("chunked", PolicyKind.CHUNKED_PREFILL, None),
    ("kvquant4", PolicyKind.KV_QUANT4, None), ("layer", PolicyKind.LAYER_OFFLOAD, None),
    ("headinfer", PolicyKind.HEAD_OFFLOAD, 1), ("head:4", PolicyKind.HEAD_OFFLOAD, 4),
    ("adaptive", PolicyKind.ADAPTIVE, None),
])
def test_policy_parse(text, kind, g):
    p = Policy.parse(text)
    assert p.kind is kind and p.heads_per_group == g


@pytest.mark.parametrize("text", ["head:0", "head:x", "quant8", ""])
def test_policy_parse_rejects(text):
    with pytest.raises(ValueError):
        Policy.parse(text)


def test_group_must_divide_kv_heads(llama8b):
    Policy.head_offload(4).validate(llama8b)
    with pytest.raises(InvalidSpec):
        Policy.head_offload(3).validate(llama8b)


dims = st.integers(1, 64)


@st.composite
def model_specs(draw):
    kv = draw(st.integers(1, 8))
    heads = kv * draw(st.integers(1, 8))
    head_dim = draw(dims)
    return ModelSpec(draw(st.text("abcxyz-0123", min_size=1, max_size=12)),
                     draw(st.integers(1, 128)), heads, kv, head_dim, heads * head_dim,
                     draw(st.integers(1, 1 << 16)), draw(st.integers(1, 1 << 18)),
                     draw(st.sampled_from([1, 2, 4])), draw(st.integers(1, 8)))


@given(model_specs())
def test_model_round_trip(tmp_path_factory, m):
    path = tmp_path_factory.mktemp("rt") / "m.json"
    save_spec(m.validate(), path)
    assert load_model_spec(path) == m


@given(st.floats(1e9, 1e15), st.floats(1.0, 100.0), st.floats(0.01, 1.0),
       st.integers(1, 1 << 40), st.integers(1, 8))
def test_hardware_round_trip(tmp_path_factory, peak, ratio, small, cap, count):
    large = 1e12 / ratio
    hw = HardwareSpec("hw", peak, 1e12, large, large * small, cap, cap * 4, count).validate()
    path = tmp_path_factory.mktemp("rt") / "h.json"
    save_spec(hw, path)
    assert load_hardware_spec(path) == hw
