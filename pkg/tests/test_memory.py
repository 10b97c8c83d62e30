import dataclasses

import pytest
from hypothesis import given, strategies as st

from headoffload.errors import Infeasible, UnresolvedPolicy
from headoffload.memory import (REPORT_COLUMNS, activation_bytes, fits, footprint, kv_cache_bytes,
                                kv_on_device_bytes, max_context, parameter_count, weight_bytes)
from headoffload.workload import GIB, TABLE_POLICIES, ModelSpec, Policy

STANDARD, CHUNKED, QUANT, LAYER, HEAD1 = TABLE_POLICIES
MI = 1 << 20


def enumerate_params(m):
    """Oracle: list every weight matrix by shape and add up element counts."""
    shapes = [(m.vocab_size, m.hidden_dim), (m.hidden_dim, m.vocab_size)]
    for _ in range(m.num_layers):
        shapes += [(m.hidden_dim, m.num_q_heads * m.head_dim),        # q
                   (m.hidden_dim, m.num_kv_heads * m.head_dim),       # k
                   (m.hidden_dim, m.num_kv_heads * m.head_dim),       # v
                   (m.num_q_heads * m.head_dim, m.hidden_dim),        # o
                   (m.hidden_dim, m.intermediate_dim),                # gate
                   (m.hidden_dim, m.intermediate_dim),                # up
                   (m.intermediate_dim, m.hidden_dim)]                # down
    return sum(r * c for r, c in shapes)


def bisect_max_context(m, hw, policy, chunk, reserve=0):
    """Oracle: largest S accepted by a direct footprint check, found by bisection."""

    def ok(S):
        rep = footprint(m, hw, policy, S, chunk if policy.chunked else None)
        if rep.weights + rep.kv_on_device + rep.activation + reserve > hw.device_capacity:
            return False
        return not (policy.offloads and rep.kv_total > hw.host_capacity)

    lo, hi = 0, 1 << 40
    while hi - lo > 1:
        mid = (lo + hi) // 2
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo


def test_parameter_count(llama8b, llama70b):
    assert parameter_count(llama8b) == enumerate_params(llama8b) == 8_029_995_008
    assert parameter_count(llama70b) == enumerate_params(llama70b)
    assert parameter_count(llama70b) == pytest.approx(70.6e9, rel=0.01)


def test_weight_bytes(llama8b):
    assert weight_bytes(llama8b) / GIB == pytest.approx(15.08, rel=0.02)
    empty = ModelSpec("empty", 0, 1, 1, 1, 1, 1, 0, 2)
    assert weight_bytes(empty) == 0


def test_kv_cache_bytes(llama8b):
    assert kv_cache_bytes(llama8b, MI) == 128 * GIB
    assert kv_cache_bytes(llama8b, 0) == 0
    assert kv_cache_bytes(llama8b, 45 * 1024) / GIB == pytest.approx(5.63, abs=0.005)


def test_activation_bytes(llama8b):
    assert activation_bytes(llama8b, MI) == 64 * GIB
    assert activation_bytes(llama8b, 10 * 1024) / GIB == 0.625
    assert activation_bytes(llama8b, 0) == 0


def test_kv_on_device(llama8b):
    assert kv_on_device_bytes(llama8b, LAYER, MI) == 8 * GIB
    assert kv_on_device_bytes(llama8b, HEAD1, MI) == 1 * GIB
    assert kv_on_device_bytes(llama8b, HEAD1, 4_096_000) / GIB == pytest.approx(3.906, abs=5e-4)
    assert kv_on_device_bytes(llama8b, QUANT, MI) == 32 * GIB
    with pytest.raises(UnresolvedPolicy):
        kv_on_device_bytes(llama8b, Policy.adaptive(), MI)


def test_footprint_examples(llama8b, profile_a):
    assert footprint(llama8b, profile_a, STANDARD, MI).total_on_device / GIB == pytest.approx(207, rel=0.02)
    rep = footprint(llama8b, profile_a, HEAD1, MI, 10 * 1024)
    assert rep.total_on_device / GIB == pytest.approx(16.7, rel=0.02)
    assert rep.kv_total == 128 * GIB
    rep = footprint(llama8b, profile_a, STANDARD, 25 * 1024)
    assert rep.kv_on_device / GIB == pytest.approx(3.13, abs=0.005)
    assert rep.activation / GIB == pytest.approx(1.56, abs=0.005)
    assert rep.total_on_device / GIB == pytest.approx(19.77, rel=0.02)


def test_report_row_order(llama8b, profile_a):
    row = footprint(llama8b, profile_a, CHUNKED, MI, 10240).row()
    assert tuple(row) == REPORT_COLUMNS
    assert row["policy"] == "chunked-prefill" and row["activation"] == 0.625


def test_pipeline_split_halves_weights_and_kv(llama70b, profile_b):
    two = dataclasses.replace(profile_b, device_count=2)
    one = footprint(llama70b, profile_b, STANDARD, 4096)
    split = footprint(llama70b, two, STANDARD, 4096)
    assert split.weights * 2 == one.weights
    assert split.kv_on_device * 2 == one.kv_on_device


# frozen from bisect_max_context at chunk 10K, reserve 0, profile-a (24 GiB / 512 GiB)
FROZEN_MAX = {"standard": 49386, "chunked-prefill": 68960, "kv-quant4": 98773,
              "layer-offload": 131697, "head-offload:1": 4194304}


@pytest.mark.parametrize("policy", TABLE_POLICIES, ids=lambda p: p.label)
def test_max_context_matches_bisection(llama8b, profile_a, policy):
    chunk = 10 * 1024
    got = max_context(llama8b, profile_a, policy, chunk if policy.chunked else None)
    assert got == bisect_max_context(llama8b, profile_a, policy, chunk)
    assert got == FROZEN_MAX[policy.label]


def test_max_context_host_bound(llama8b, profile_a):
    assert max_context(llama8b, profile_a, HEAD1, 10240) == 512 * GIB // 131072 == 4194304


def test_max_context_with_reserve(llama8b, profile_a):
    reserve = int(4.7 * GIB)
    got = max_context(llama8b, profile_a, STANDARD, reserve=reserve)
    assert got == bisect_max_context(llama8b, profile_a, STANDARD, None, reserve) == 23718


@pytest.mark.parametrize("policy", TABLE_POLICIES, ids=lambda p: p.label)
def test_max_context_infeasible(llama8b, profile_a, policy):
    with pytest.raises(Infeasible):
        max_context(llama8b, profile_a, policy, 10240, reserve=profile_a.device_capacity)


def test_max_context_rejects_adaptive(llama8b, profile_a):
    with pytest.raises(UnresolvedPolicy):
        max_context(llama8b, profile_a, Policy.adaptive(), 10240)


# -- properties --------------------------------------------------------------

contexts = st.integers(0, 1 << 24)
policies = st.sampled_from(list(TABLE_POLICIES) + [Policy.head_offload(g) for g in (2, 4, 8)])


@given(contexts)
def test_kv_linear(S):
    from headoffload.workload import get_model
    m = get_model("llama3-8b")
    assert kv_cache_bytes(m, 2 * S) == 2 * kv_cache_bytes(m, S)


@given(policies, st.integers(1, 1 << 24))
def test_device_kv_never_exceeds_total(policy, S):
    from headoffload.workload import get_model, get_profile
    rep = footprint(get_model("llama3-8b"), get_profile("profile-a"), policy, S, 10240)
    assert rep.kv_on_device <= rep.kv_total
    if not policy.offloads:
        assert rep.kv_on_device == rep.kv_total
    assert rep.total_on_device == rep.weights + rep.kv_on_device + rep.activation


@given(st.integers(1, 1 << 24))
def test_head_groups_monotone_and_layer_equivalent(S):
    from headoffload.workload import get_model
    m = get_model("llama3-8b")
    sizes = [kv_on_device_bytes(m, Policy.head_offload(g), S) for g in (1, 2, 4, 8)]
    assert sizes == sorted(sizes)
    assert sizes[-1] == kv_on_device_bytes(m, LAYER, S)


@given(policies, st.sampled_from([1024, 4096, 10240]), st.integers(0, 8 * GIB))
def test_max_context_consistency(policy, chunk, reserve):
    from headoffload.workload import get_model, get_profile
    m, hw = get_model("llama3-8b"), get_profile("profile-a")
    use_chunk = chunk if policy.chunked else None
    try:
        S = max_context(m, hw, policy, use_chunk, reserve)
    except Infeasible:
        assert not fits(m, hw, policy, 1, use_chunk, reserve)
        return
    assert fits(m, hw, policy, S, use_chunk, reserve)
    assert not fits(m, hw, policy, S + 1, use_chunk, reserve)
