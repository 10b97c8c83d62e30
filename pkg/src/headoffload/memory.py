"""Closed-form memory accounting per policy and the max-context solver."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import Infeasible, UnresolvedPolicy
from .workload import GIB, HardwareSpec, ModelSpec, Policy, PolicyKind

#: Staging factor for offload policies: two alternating buffers hold the
#: group being computed and the group being prefetched.
PING_PONG = 2

#: Column order shared by the CSV and JSON serializations.
REPORT_COLUMNS = ("policy", "S", "chunk", "weights", "kv_on_device", "activation",
                  "total", "kv_total")


@dataclass(frozen=True)
class MemoryReport:
    policy: Policy
    context: int
    chunk: int
    weights: int
    kv_on_device: int
    activation: int
    kv_total: int

    @property
    def total_on_device(self) -> int:
        return self.weights + self.kv_on_device + self.activation

    def row(self, unit: int = GIB) -> dict:
        """Flat record in :data:`REPORT_COLUMNS` order, byte fields scaled by ``unit``."""
        return {
            "policy": self.policy.label,
            "S": self.context,
            "chunk": self.chunk,
            "weights": self.weights / unit,
            "kv_on_device": self.kv_on_device / unit,
            "activation": self.activation / unit,
            "total": self.total_on_device / unit,
            "kv_total": self.kv_total / unit,
        }


def parameter_count(m: ModelSpec) -> int:
    """Untied embedding and LM head, GQA attention projections, gated MLP.

    Norm weights are ignored.
    """
    d, kv, i = m.hidden_dim, m.kv_dim, m.intermediate_dim
    per_layer = d * d + 2 * d * kv + d * d + 3 * d * i
    return 2 * m.vocab_size * d + m.num_layers * per_layer


def weight_bytes(m: ModelSpec) -> int:
    return parameter_count(m) * m.dtype_bytes


def kv_cache_bytes(m: ModelSpec, S: int) -> int:
    return 2 * m.batch * m.num_layers * S * m.kv_dim * m.dtype_bytes


def activation_bytes(m: ModelSpec, resident_tokens: int) -> int:
    return (m.hidden_dim + 2 * m.intermediate_dim) * resident_tokens * m.dtype_bytes * m.batch


def _check_resolved(policy: Policy) -> None:
    if policy.kind is PolicyKind.ADAPTIVE:
        raise UnresolvedPolicy("adaptive policy must be resolved to a concrete one first")


# Per-token rates as exact fractions; footprint and the solver share them.

def _kv_device_rate(m: ModelSpec, policy: Policy, device_count: int = 1) -> Fraction:
    _check_resolved(policy)
    full = Fraction(kv_cache_bytes(m, 1))
    if policy.kind in (PolicyKind.STANDARD, PolicyKind.CHUNKED_PREFILL):
        return full / device_count
    if policy.kind is PolicyKind.KV_QUANT4:
        return full / 4 / device_count
    policy.validate(m)
    width = Fraction(m.kv_dim * policy.group_heads(m), m.num_kv_heads)
    return PING_PONG * 2 * m.batch * width * m.dtype_bytes


def _kv_total_rate(m: ModelSpec, policy: Policy, device_count: int = 1) -> Fraction:
    full = Fraction(kv_cache_bytes(m, 1), device_count)
    return full / 4 if policy.kind is PolicyKind.KV_QUANT4 else full


def _act_rate(m: ModelSpec) -> int:
    return activation_bytes(m, 1)


def _ceil(x: Fraction) -> int:
    return -((-x.numerator) // x.denominator)


def kv_on_device_bytes(m: ModelSpec, policy: Policy, S: int) -> int:
    return _ceil(_kv_device_rate(m, policy) * S)


def resident_tokens(policy: Policy, S: int, chunk: int) -> int:
    return min(chunk, S) if policy.chunked else S


def footprint(m: ModelSpec, hw: HardwareSpec, policy: Policy, S: int,
              chunk: int | None = None) -> MemoryReport:
    """On-device memory at context ``S``; weights and KV split across pipeline stages."""
    _check_resolved(policy)
    dc = hw.device_count
    chunk = S if chunk is None else chunk
    return MemoryReport(
        policy=policy,
        context=S,
        chunk=chunk,
        weights=_ceil(Fraction(weight_bytes(m), dc)),
        kv_on_device=_ceil(_kv_device_rate(m, policy, dc) * S),
        activation=activation_bytes(m, resident_tokens(policy, S, chunk)),
        kv_total=_ceil(_kv_total_rate(m, policy, dc) * S),
    )


def fits(m: ModelSpec, hw: HardwareSpec, policy: Policy, S: int, chunk: int | None,
         reserve: int = 0) -> bool:
    rep = footprint(m, hw, policy, S, chunk)
    if rep.total_on_device + reserve > hw.device_capacity:
        return False
    return not (policy.offloads and rep.kv_total > hw.host_capacity)


def max_context(m: ModelSpec, hw: HardwareSpec, policy: Policy, chunk: int | None = None,
                reserve: int = 0) -> int:
    """Largest context whose footprint fits device (and, when offloading, host) memory.

    ``chunk=None`` means unchunked processing. Solved in closed form from the
    per-token rates; a final step-wise adjustment absorbs byte rounding.
    """
    _check_resolved(policy)
    dc = hw.device_count
    fixed = Fraction(weight_bytes(m), dc) + reserve
    budget = hw.device_capacity - fixed
    if budget <= 0:
        raise Infeasible(
            f"weights ({float(fixed - reserve) / GIB:.2f} GiB) plus reserve exceed the device"
        )
    kv_rate = _kv_device_rate(m, policy, dc)
    act = _act_rate(m)
    if policy.chunked and chunk is not None:
        s = (budget - act * chunk) / kv_rate
        if s < chunk:
            s = budget / (kv_rate + act)
    else:
        s = budget / (kv_rate + act)
    best = int(s)
    if policy.offloads:
        best = min(best, int(Fraction(hw.host_capacity) / _kv_total_rate(m, policy, dc)))

    while best >= 1 and not fits(m, hw, policy, best, chunk, reserve):
        best -= 1
    while fits(m, hw, policy, best + 1, chunk, reserve):
        best += 1
    if best < 1:
        raise Infeasible(f"{policy.label}: no context length fits within the budget")
    return best
