"""Chunk-size and head-group planning from the roofline and the memory budget."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import Infeasible
from .memory import MemoryReport, fits, footprint
from .roofline import turning_point
from .workload import GIB, HardwareSpec, ModelSpec, Policy, PolicyKind

#: Margin between the offload turning point and the chosen prefill chunk.
CHUNK_SAFETY = 5
CHUNK_QUANTUM = 1024

#: Device memory held back for framework overhead when choosing head groups.
#: With it the Llama-3-8B group thresholds land near 500K / 1M / 2M / 4M tokens.
DEFAULT_RESERVE = int(4.7 * GIB)


def select_chunk(m: ModelSpec, hw: HardwareSpec, S: int | None = None) -> int:
    """Prefill chunk: a few multiples of the turning point, on a 1024-token grid.

    The turning point is first rounded up to the grid, then scaled by
    :data:`CHUNK_SAFETY`; the result is capped at ``S`` when one is given.
    """
    base = math.ceil(turning_point(m, hw) / CHUNK_QUANTUM) * CHUNK_QUANTUM
    chunk = max(base * CHUNK_SAFETY, CHUNK_QUANTUM)
    if S is not None:
        chunk = min(chunk, max(S, 1))
    return chunk


def _divisors_desc(n: int) -> list[int]:
    return [g for g in range(n, 0, -1) if n % g == 0]


def select_groups(m: ModelSpec, hw: HardwareSpec, S: int, reserve: int = DEFAULT_RESERVE,
                  chunk: int | None = None) -> int:
    """Largest heads-per-group ``g`` (fewest groups) whose footprint fits.

    ``g`` always divides the kv-head count. Raises :class:`Infeasible` when
    even single-head groups do not fit.
    """
    if S < 1:
        raise ValueError("context must be >= 1")
    if chunk is None:
        chunk = select_chunk(m, hw, S)
    for g in _divisors_desc(m.num_kv_heads):
        if fits(m, hw, Policy.head_offload(g), S, chunk, reserve):
            return g
    raise Infeasible(f"{m.name}: context {S} does not fit even with single-head groups")


@dataclass(frozen=True)
class Plan:
    context: int
    chunk: int
    heads_per_group: int
    groups: int
    policy: Policy
    reserve: int
    feasibility: MemoryReport

    def to_dict(self) -> dict:
        rep = self.feasibility
        return {
            "context": self.context,
            "chunk": self.chunk,
            "heads_per_group": self.heads_per_group,
            "groups": self.groups,
            "policy": self.policy.label,
            "reserve_gib": self.reserve / GIB,
            "weights_gib": rep.weights / GIB,
            "kv_on_device_gib": rep.kv_on_device / GIB,
            "activation_gib": rep.activation / GIB,
            "total_on_device_gib": rep.total_on_device / GIB,
            "kv_total_gib": rep.kv_total / GIB,
        }


def plan(m: ModelSpec, hw: HardwareSpec, S: int, reserve: int = DEFAULT_RESERVE) -> Plan:
    chunk = select_chunk(m, hw, S)
    g = select_groups(m, hw, S, reserve, chunk)
    policy = Policy.head_offload(g)
    rep = footprint(m, hw, policy, S, chunk)
    if rep.total_on_device + reserve > hw.device_capacity:
        raise Infeasible("planned footprint exceeds the device budget")
    return Plan(S, chunk, g, m.num_kv_heads // g, policy, reserve, rep)


def resolve_policy(policy: Policy, m: ModelSpec, hw: HardwareSpec, S: int,
                   reserve: int = DEFAULT_RESERVE) -> Policy:
    """Concrete policy for ``S`` tokens; only the adaptive policy changes."""
    if policy.kind is not PolicyKind.ADAPTIVE:
        return policy
    return Policy.head_offload(select_groups(m, hw, S, reserve))
