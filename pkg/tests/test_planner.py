import dataclasses

import pytest
from hypothesis import given, strategies as st

from headoffload.errors import Infeasible
from headoffload.memory import fits, footprint, weight_bytes
from headoffload.planner import (DEFAULT_RESERVE, plan, resolve_policy, select_chunk,
                                 select_groups)
from headoffload.workload import Policy, PolicyKind, get_model, get_profile


def groups(m, hw, S):
    return m.num_kv_heads // select_groups(m, hw, S)


def test_chunk_selection(llama8b, llama70b, profile_a):
    assert select_chunk(llama8b, profile_a) == 10240
    assert select_chunk(llama70b, profile_a) <= 5120
    assert select_chunk(llama8b, profile_a, 512) == 512
    assert select_chunk(llama8b, profile_a) % 1024 == 0


@pytest.mark.parametrize("S,expected", [(100_000, 1), (600_000, 2), (3_000_000, 8)])
def test_group_schedule_examples(llama8b, profile_a, S, expected):
    assert groups(llama8b, profile_a, S) == expected


def test_groups_infeasible(llama8b, profile_a):
    with pytest.raises(Infeasible):
        select_groups(llama8b, profile_a, 8_000_000)


def test_plan_at_one_million(llama8b, profile_a):
    p = plan(llama8b, profile_a, 1 << 20)
    assert p.chunk == 10240 and p.groups == 4 and p.heads_per_group == 2
    assert p.feasibility.total_on_device + DEFAULT_RESERVE <= profile_a.device_capacity
    assert p.feasibility == footprint(llama8b, profile_a, p.policy, 1 << 20, 10240)


def test_plan_single_token(llama8b, profile_a):
    p = plan(llama8b, profile_a, 1)
    assert (p.chunk, p.groups) == (1, 1)


def test_plan_without_room(llama8b, profile_a):
    tight = dataclasses.replace(profile_a, device_capacity=weight_bytes(llama8b))
    with pytest.raises(Infeasible):
        plan(llama8b, tight, 1024, reserve=0)


def test_resolve_policy(llama8b, profile_a):
    concrete = Policy.layer_offload()
    assert resolve_policy(concrete, llama8b, profile_a, 10) is concrete
    resolved = resolve_policy(Policy.adaptive(), llama8b, profile_a, 1 << 20)
    assert resolved.kind is PolicyKind.HEAD_OFFLOAD and resolved.heads_per_group == 2


@given(st.integers(1, 3_800_000), st.integers(1, 500_000))
def test_groups_monotone(S, extra):
    m, hw = get_model("llama3-8b"), get_profile("profile-a")
    g = select_groups(m, hw, S)
    try:
        assert select_groups(m, hw, S + extra) <= g
    except Infeasible:
        pass


@given(st.integers(1, 3_800_000), st.sampled_from(["llama3-8b", "mistral-7b", "qwen2-7b"]))
def test_plan_is_feasible(S, name):
    m, hw = get_model(name), get_profile("profile-a")
    try:
        p = plan(m, hw, S)
    except Infeasible:
        return
    assert m.num_kv_heads % p.heads_per_group == 0
    assert fits(m, hw, p.policy, S, p.chunk, DEFAULT_RESERVE)
    assert p.chunk == min(select_chunk(m, hw), S)
