"""Attention FLOP/byte counts, roofline classification and phase-time estimates.

Counting conventions (kept so the per-layer numbers line up with the
published roofline tables):

* causal masking is ignored, so prefill attention over ``S`` tokens costs
  ``4 * S * S * hidden_dim`` FLOPs per layer;
* decode traffic is counted at full hidden width, which makes decode
  arithmetic intensity exactly 1;
* a head-wise kernel over ``g`` kv-heads scales ops and bytes by
  ``g / num_kv_heads``, leaving the intensity unchanged.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from .errors import UnresolvedPolicy
from .memory import kv_cache_bytes, parameter_count, weight_bytes
from .workload import HardwareSpec, ModelSpec, Policy, PolicyKind


class Phase(enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"


class Bound(enum.Enum):
    COMPUTE = "compute"
    MEMORY = "memory"


def _kernel_scale(m: ModelSpec, kernel_heads: int | None) -> float:
    if kernel_heads is None:
        return 1.0
    return kernel_heads / m.num_kv_heads


def attention_ops(m: ModelSpec, phase: Phase, S: int, kernel_heads: int | None = None,
                  new_tokens: int | None = None) -> float:
    """Per-layer attention FLOPs (score and value matmuls over all query heads).

    ``new_tokens`` generalizes prefill to a chunk of queries attending to ``S``
    cached positions; by default the whole context is the query block.
    """
    if phase is Phase.PREFILL:
        queries = S if new_tokens is None else new_tokens
        ops = 4 * queries * S * m.hidden_dim
    else:
        ops = 4 * S * m.hidden_dim
    return ops * m.batch * _kernel_scale(m, kernel_heads)


def attention_bytes(m: ModelSpec, phase: Phase, S: int, offload: bool,
                    kernel_heads: int | None = None) -> float:
    """Per-layer attention memory traffic.

    With ``offload`` only the KV stream counts (that is what crosses the link).
    """
    w = m.dtype_bytes * m.batch
    if phase is Phase.PREFILL:
        kv = 2 * S * m.kv_dim * w
        total = kv if offload else 2 * S * m.hidden_dim * w + kv
    else:
        total = 2 * S * m.hidden_dim * w
    return total * _kernel_scale(m, kernel_heads)


def effective_bandwidth(hw: HardwareSpec, phase: Phase, offload: bool) -> float:
    if not offload:
        return hw.mem_bw
    return hw.link_bw_large if phase is Phase.PREFILL else hw.link_bw_small


@dataclass(frozen=True)
class RooflinePoint:
    phase: Phase
    kernel_heads: int | None  # None: whole layer
    offload: bool
    S: int
    ops: float
    bytes_moved: float
    arithmetic_intensity: float
    attainable: float
    bound: Bound

    @property
    def kernel(self) -> str:
        return "full-layer" if self.kernel_heads is None else f"head-wise:{self.kernel_heads}"


def classify(m: ModelSpec, hw: HardwareSpec, phase: Phase, S: int, offload: bool,
             kernel_heads: int | None = None) -> RooflinePoint:
    ops = attention_ops(m, phase, S, kernel_heads)
    moved = attention_bytes(m, phase, S, offload, kernel_heads)
    ai = ops / moved
    roof = ai * effective_bandwidth(hw, phase, offload)
    attainable = min(hw.peak_flops, roof)
    bound = Bound.COMPUTE if roof >= hw.peak_flops else Bound.MEMORY
    return RooflinePoint(phase, kernel_heads, offload, S, ops, moved, ai, attainable, bound)


TABLE_CONTEXTS = (1024, 10 * 1024, 100 * 1024)

TABLE_COLUMNS = ("operator", "phase", "S", "ops", "memory", "ai", "flops", "bound",
                 "offload_memory", "offload_ai", "offload_flops", "offload_bound")


def roofline_table(m: ModelSpec, hw: HardwareSpec, contexts=TABLE_CONTEXTS) -> list[dict]:
    """Rows laid out like the per-layer attention comparison tables.

    Head-wise rows use a single kv-head per kernel.
    """
    rows = []
    for phase in (Phase.PREFILL, Phase.DECODE):
        for kernel_heads, name in ((None, "flashattention"), (1, "head-wise")):
            for S in contexts:
                reg = classify(m, hw, phase, S, False, kernel_heads)
                off = classify(m, hw, phase, S, True, kernel_heads)
                rows.append({
                    "operator": f"{name} ({S // 1024}k)",
                    "phase": phase.value,
                    "S": S,
                    "ops": reg.ops,
                    "memory": reg.bytes_moved,
                    "ai": reg.arithmetic_intensity,
                    "flops": reg.attainable,
                    "bound": reg.bound.value,
                    "offload_memory": off.bytes_moved,
                    "offload_ai": off.arithmetic_intensity,
                    "offload_flops": off.attainable,
                    "offload_bound": off.bound.value,
                })
    return rows


def turning_point(m: ModelSpec, hw: HardwareSpec) -> int:
    """Smallest prefill chunk at which offloaded attention is compute-bound."""
    # intensity of offloaded prefill is 2*S*D / (D_kv * dtype)
    slope = 2 * m.hidden_dim / (m.kv_dim * m.dtype_bytes)
    s = max(1, math.ceil(hw.peak_flops / (slope * hw.link_bw_large)))

    def compute_bound(n: int) -> bool:
        return classify(m, hw, Phase.PREFILL, n, True).bound is Bound.COMPUTE

    while s > 1 and compute_bound(s - 1):
        s -= 1
    while not compute_bound(s):
        s += 1
    return s


# -- whole-model time estimates ---------------------------------------------


@dataclass(frozen=True)
class StepCost:
    """Seconds spent on each resource for one prefill chunk or decode step."""

    compute: float
    device_memory: float
    link: float

    @property
    def time(self) -> float:
        return max(self.compute, self.device_memory, self.link)


def _kv_scale(policy: Policy) -> float:
    return 0.25 if policy.kind is PolicyKind.KV_QUANT4 else 1.0


def prefill_chunk_cost(m: ModelSpec, hw: HardwareSpec, policy: Policy, prefix: int,
                       new: int) -> StepCost:
    ctx = prefix + new
    w = m.dtype_bytes * m.batch
    ops = (m.num_layers * attention_ops(m, Phase.PREFILL, ctx, new_tokens=new)
           + 2 * parameter_count(m) * new * m.batch)
    hbm = weight_bytes(m) + m.num_layers * (
        2 * new * m.hidden_dim * w + 2 * ctx * m.kv_dim * w * _kv_scale(policy))
    link = 0.0
    if policy.offloads:
        prefetch = kv_cache_bytes(m, prefix) / hw.link_bw_large
        evict = kv_cache_bytes(m, new) / hw.link_bw_large
        link = max(prefetch, evict)
    return StepCost(ops / hw.peak_flops, hbm / hw.mem_bw, link)


def decode_step_cost(m: ModelSpec, hw: HardwareSpec, policy: Policy, S: int) -> StepCost:
    """One generated token with ``S`` tokens already cached."""
    ctx = S + 1
    ops = (m.num_layers * attention_ops(m, Phase.DECODE, ctx)
           + 2 * parameter_count(m) * m.batch)
    hbm = weight_bytes(m) + kv_cache_bytes(m, ctx) * _kv_scale(policy)
    link = 0.0
    if policy.offloads:
        prefetch = kv_cache_bytes(m, S) / hw.link_bw_large
        evict = kv_cache_bytes(m, 1) / hw.link_bw_small
        link = max(prefetch, evict)
    return StepCost(ops / hw.peak_flops, hbm / hw.mem_bw, link)


def phase_time(m: ModelSpec, hw: HardwareSpec, phase: Phase, policy: Policy, S: int,
               chunk: int | None = None) -> float:
    """Whole-model time: prefill of ``S`` tokens, or one decode step at context ``S``.

    Each chunk or step costs the max of compute, device-memory and link time;
    prefill sums that over chunks while the attended context grows.
    """
    if policy.kind is PolicyKind.ADAPTIVE:
        raise UnresolvedPolicy("adaptive policy must be resolved before timing")
    if phase is Phase.DECODE:
        return decode_step_cost(m, hw, policy, S).time
    if S <= 0:
        return 0.0
    step = min(chunk, S) if (policy.chunked and chunk) else S
    total = 0.0
    for prefix in range(0, S, step):
        total += prefill_chunk_cost(m, hw, policy, prefix, min(step, S - prefix)).time
    return total
