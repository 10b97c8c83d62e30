"""Head-wise offloaded execution with a simulated clock.

The runtime pre-allocates a device arena (weights, activation workspace, two
ping-pong KV slots) and a host arena (KV of every offloaded head-group), then
runs prefill chunks and decode steps as sweeps over (layer, head-group) units.
Every sweep is laid onto a :class:`SimTimeline`; when the model is small
enough the same sweep is also executed numerically, either sequentially
(``simulated``) or with real prefetch and evict worker threads
(``overlapped``). Numeric results do not depend on the mode.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..engine import (DTYPE, HeadKvCache, MiniEngine, attention_head, full_attention_layer,
                      project_qkv, split_heads)
from ..errors import CapacityExceeded, UnresolvedPolicy
from ..memory import footprint, parameter_count
from ..roofline import Phase, attention_ops
from ..workload import HardwareSpec, ModelSpec, Policy, PolicyKind
from .arena import Arena, Tier
from .pipeline import SLOTS, SlotGuard, Unit, check_pingpong, schedule_sweep
from .timeline import SimTimeline

#: Above this many KV-cache bytes the runtime only schedules, it does not compute.
NUMERIC_LIMIT = 64 << 20

TOLERANCE = 1e-5


class Mode(enum.Enum):
    SIMULATED = "simulated"
    OVERLAPPED = "overlapped"


@dataclass(frozen=True)
class _Slot:
    layer: int
    group: int
    heads: slice
    slot: int | None  # None: group stays resident on the device


class OffloadRuntime:
    def __init__(self, m: ModelSpec, hw: HardwareSpec, policy: Policy, capacity: int,
                 chunk: int | None = None, mode: Mode | str = Mode.SIMULATED, seed: int = 0,
                 numeric: bool | None = None, resident_units: int = 0,
                 cross_layer_prefetch: bool = True):
        if policy.kind is PolicyKind.ADAPTIVE:
            raise UnresolvedPolicy("resolve the adaptive policy (planner) before running it")
        policy.validate(m)
        self.model, self.hw, self.policy = m, hw, policy
        self.mode = Mode(mode)
        self.capacity = capacity
        self.chunk = chunk if policy.chunked else None
        self.cross_layer_prefetch = cross_layer_prefetch
        self.group_heads = policy.group_heads(m)
        self.groups_per_layer = m.num_kv_heads // self.group_heads
        self.S = 0

        order = [(l, j) for l in range(m.num_layers) for j in range(self.groups_per_layer)]
        if not policy.offloads:
            resident_units = len(order)
        self.resident_units = min(resident_units, len(order))
        self.plan: list[_Slot] = []
        n_off = 0
        for idx, (l, j) in enumerate(order):
            heads = slice(j * self.group_heads, (j + 1) * self.group_heads)
            if idx < self.resident_units:
                self.plan.append(_Slot(l, j, heads, None))
            else:
                self.plan.append(_Slot(l, j, heads, n_off % SLOTS))
                n_off += 1
        self.offloaded_units = n_off

        self._allocate()
        if numeric is None:
            numeric = 2 * m.num_layers * capacity * m.kv_dim * 4 <= NUMERIC_LIMIT
        self.numeric = numeric
        self.guard = SlotGuard()
        self.hidden = np.zeros(m.hidden_dim, DTYPE)
        if numeric:
            self.engine = MiniEngine(m, seed)
            self.device_cache = HeadKvCache.for_model(m, capacity)
            self.host_cache = HeadKvCache.for_model(m, capacity)
            shape = (SLOTS, self.group_heads, capacity, m.head_dim)
            self.slot_k, self.slot_v = np.zeros(shape, DTYPE), np.zeros(shape, DTYPE)
            stage = (SLOTS, self.group_heads, max(1, self.chunk or capacity), m.head_dim)
            self.stage_k, self.stage_v = np.zeros(stage, DTYPE), np.zeros(stage, DTYPE)

    # -- memory ------------------------------------------------------------

    def _unit_kv_bytes(self, tokens: int) -> int:
        m = self.model
        return 2 * m.batch * tokens * m.head_dim * self.group_heads * m.dtype_bytes

    def _allocate(self) -> None:
        """Reserve everything up front; raises CapacityExceeded if the policy does not fit."""
        m, hw, cap = self.model, self.hw, self.capacity
        rep = footprint(m, hw, self.policy, cap, self.chunk)
        self.device = Arena(Tier.DEVICE, hw.device_capacity)
        self.host = Arena(Tier.HOST, hw.host_capacity)
        self.device.alloc(rep.weights, "weights")
        self.device.alloc(rep.activation, "activation")
        if self.policy.offloads:
            for _ in range(SLOTS):
                self.device.alloc(rep.kv_on_device // SLOTS, "kv-pingpong")
            if self.resident_units:
                self.device.alloc(self.resident_units * self._unit_kv_bytes(cap), "kv-resident")
            self.host.alloc(self.offloaded_units * self._unit_kv_bytes(cap), "kv-host")
        else:
            self.device.alloc(rep.kv_on_device, "kv-resident")
        self.device.check()
        self.host.check()

    @property
    def offload_fraction(self) -> float:
        """Share of all (layer, group) KV blocks kept on the device between uses."""
        return self.resident_units / len(self.plan)

    def host_kv_bytes(self) -> int:
        if not self.numeric:
            return self.offloaded_units * self._unit_kv_bytes(self.S)
        total = 0
        for u in self.plan:
            if u.slot is not None:
                tokens = self.host_cache.lengths[u.layer, u.heads]
                total += int(tokens.sum()) * 2 * self.model.head_dim * self.model.dtype_bytes
        return total * self.model.batch

    # -- timing ------------------------------------------------------------

    def _units(self, phase: Phase, prefix: int, n: int, tag: str) -> list[Unit]:
        m, hw = self.model, self.hw
        ctx = prefix + n
        frac = self.group_heads / m.num_kv_heads
        layer_params = (parameter_count(m) - 2 * m.vocab_size * m.hidden_dim) / m.num_layers
        if phase is Phase.PREFILL:
            attn = attention_ops(m, phase, ctx, self.group_heads, new_tokens=n)
        else:
            attn = attention_ops(m, phase, ctx, self.group_heads)
        flops = attn + 2 * layer_params * n * m.batch * frac
        kv_scale = 0.25 if self.policy.kind is PolicyKind.KV_QUANT4 else 1.0
        w = m.dtype_bytes * m.batch
        dev_bytes = ((2 * n * m.hidden_dim + 2 * ctx * m.kv_dim * kv_scale) * w
                     + layer_params * m.dtype_bytes) * frac
        compute = max(flops / hw.peak_flops, dev_bytes / hw.mem_bw)
        evict_bw = hw.link_bw_large if phase is Phase.PREFILL else hw.link_bw_small
        return [
            Unit(f"{tag}/l{u.layer}/g{u.group}", compute, flops,
                 self._unit_kv_bytes(prefix), self._unit_kv_bytes(n), u.slot,
                 hw.link_bw_large, evict_bw)
            for u in self.plan
        ]

    def _schedule(self, tl: SimTimeline, units: list[Unit], t: float) -> float:
        if self.cross_layer_prefetch:
            t = schedule_sweep(tl, units, t)
        else:
            per = self.groups_per_layer
            for i in range(0, len(units), per):
                t = schedule_sweep(tl, units[i:i + per], t)
        self.device.check()
        return t

    # -- numerics ----------------------------------------------------------

    def _prefetch(self, u: _Slot, prefix: int) -> None:
        with self.guard.access(("kv", u.slot), True, f"prefetch l{u.layer}g{u.group}"):
            self.slot_k[u.slot, :, :prefix] = self.host_cache.keys[u.layer, u.heads, :prefix]
            self.slot_v[u.slot, :, :prefix] = self.host_cache.values[u.layer, u.heads, :prefix]

    def _evict(self, u: _Slot, prefix: int, n: int) -> None:
        with self.guard.access(("stage", u.slot), False, f"evict l{u.layer}g{u.group}"):
            end = prefix + n
            self.host_cache.keys[u.layer, u.heads, prefix:end] = self.stage_k[u.slot, :, :n]
            self.host_cache.values[u.layer, u.heads, prefix:end] = self.stage_v[u.slot, :, :n]
            self.host_cache.lengths[u.layer, u.heads] = end

    def _compute(self, u: _Slot, layer_state: dict, prefix: int, n: int) -> None:
        m = self.model
        ctx = prefix + n
        k_new = layer_state["k"][u.heads]
        v_new = layer_state["v"][u.heads]
        q = layer_state["q"]
        out = layer_state["out"]
        d_h, per_kv = m.head_dim, m.q_per_kv

        if u.slot is None:
            cache = self.device_cache
            for i, head in enumerate(range(u.heads.start, u.heads.stop)):
                n_old = cache.lengths[u.layer, head]
                cache.keys[u.layer, head, n_old:n_old + n] = k_new[i]
                cache.values[u.layer, head, n_old:n_old + n] = v_new[i]
                cache.lengths[u.layer, head] = n_old + n
            k_all, v_all = cache.layer_blocks(u.layer, u.heads)
            q_cols = slice(u.heads.start * per_kv * d_h, u.heads.stop * per_kv * d_h)
            out[:, q_cols] = full_attention_layer(q[:, q_cols], k_all, v_all, prefix)
            return

        who = f"compute l{u.layer}g{u.group}"
        with self.guard.access(("kv", u.slot), True, who), \
                self.guard.access(("stage", u.slot), True, who):
            self.slot_k[u.slot, :, prefix:ctx] = k_new
            self.slot_v[u.slot, :, prefix:ctx] = v_new
            self.stage_k[u.slot, :, :n] = k_new
            self.stage_v[u.slot, :, :n] = v_new
            for i, kv_head in enumerate(range(u.heads.start, u.heads.stop)):
                k_blk = self.slot_k[u.slot, i, :ctx]
                v_blk = self.slot_v[u.slot, i, :ctx]
                for qh in range(kv_head * per_kv, (kv_head + 1) * per_kv):
                    cols = slice(qh * d_h, (qh + 1) * d_h)
                    out[:, cols] = attention_head(q[:, cols], k_blk, v_blk, prefix)

    def _execute(self, x: np.ndarray, prefix: int) -> np.ndarray:
        m, w = self.model, self.engine.weights
        n = x.shape[0]
        h = x
        state: dict = {}
        last_of_layer = {}
        for i, u in enumerate(self.plan):
            last_of_layer[u.layer] = i

        def begin_layer(layer: int) -> None:
            q, k, v = project_qkv(m, w, h, layer)
            state.clear()
            state.update(q=q, k=split_heads(k, m.head_dim), v=split_heads(v, m.head_dim),
                         out=np.zeros((n, m.hidden_dim), DTYPE))

        overlapped = self.mode is Mode.OVERLAPPED and self.policy.offloads
        if overlapped:
            prefetch_lane = ThreadPoolExecutor(1, thread_name_prefix="prefetch")
            evict_lane = ThreadPoolExecutor(1, thread_name_prefix="evict")
        offloaded = [i for i, u in enumerate(self.plan) if u.slot is not None]
        next_off = {a: b for a, b in zip(offloaded, offloaded[1:])}
        prefetched: dict = {}
        evicting: dict = {}
        try:
            if overlapped and offloaded:
                prefetched[offloaded[0]] = prefetch_lane.submit(
                    self._prefetch, self.plan[offloaded[0]], prefix)
            for i, u in enumerate(self.plan):
                if i == 0 or self.plan[i - 1].layer != u.layer:
                    begin_layer(u.layer)
                if u.slot is not None:
                    if overlapped:
                        j = next_off.get(i)
                        if j is not None:
                            prefetched[j] = prefetch_lane.submit(self._prefetch, self.plan[j], prefix)
                        prefetched.pop(i).result()
                        # the staging slot was last read by the eviction two units back
                        for k in [k for k in evicting if self.plan[k].slot == u.slot]:
                            evicting.pop(k).result()
                    else:
                        self._prefetch(u, prefix)
                self._compute(u, state, prefix, n)
                if u.slot is not None:
                    if overlapped:
                        evicting[i] = evict_lane.submit(self._evict, u, prefix, n)
                    else:
                        self._evict(u, prefix, n)
                if last_of_layer[u.layer] == i:
                    h = h + state["out"] @ w.wo[u.layer]
            for fut in list(prefetched.values()) + list(evicting.values()):
                fut.result()
        finally:
            if overlapped:
                prefetch_lane.shutdown(wait=True)
                evict_lane.shutdown(wait=True)
        return h

    # -- phases ------------------------------------------------------------

    def _advance(self, tl: SimTimeline, phase: Phase, n: int, t: float, tag: str):
        if self.S + n > self.capacity:
            raise CapacityExceeded(f"{self.S} + {n} tokens exceed capacity {self.capacity}")
        prefix = self.S
        t = self._schedule(tl, self._units(phase, prefix, n, tag), t)
        out = None
        if self.numeric:
            out = self._execute(self.engine.embed(prefix, n), prefix)
        self.S += n
        return t, out

    def prefill(self, S: int) -> tuple[np.ndarray | None, SimTimeline]:
        """Process ``S`` new tokens; returns per-position outputs and the timeline."""
        tl = SimTimeline()
        step = self.chunk or max(S, 1)
        outs, t = [], 0.0
        for c, start in enumerate(range(0, S, step)):
            t, out = self._advance(tl, Phase.PREFILL, min(step, S - start), t, f"c{c}")
            if out is not None:
                outs.append(out)
        tl.peak_device_bytes = self.device.peak
        check_pingpong(tl)
        if not self.numeric:
            return None, tl
        hidden = np.concatenate(outs) if outs else np.zeros((0, self.model.hidden_dim), DTYPE)
        if len(hidden):
            self.hidden = hidden[-1]
        return hidden, tl

    def decode(self, steps: int) -> tuple[np.ndarray | None, SimTimeline]:
        if steps and self.S == 0:
            raise ValueError("decode requires a prefilled cache")
        tl = SimTimeline()
        outs, t = [], 0.0
        for step in range(steps):
            t, out = self._advance(tl, Phase.DECODE, 1, t, f"t{step}")
            if out is not None:
                outs.append(out[-1])
        tl.peak_device_bytes = self.device.peak
        check_pingpong(tl)
        if not self.numeric:
            return None, tl
        return (np.stack(outs) if outs else np.zeros((0, self.model.hidden_dim), DTYPE)), tl


def run_prefill(m: ModelSpec, hw: HardwareSpec, policy: Policy, S: int, chunk: int | None,
                mode: Mode | str = Mode.SIMULATED, seed: int = 0, decode_steps: int = 0,
                **kwargs) -> tuple[OffloadRuntime, SimTimeline]:
    """Build a runtime sized for ``S + decode_steps`` tokens and prefill it."""
    rt = OffloadRuntime(m, hw, policy, S + decode_steps, chunk, mode, seed, **kwargs)
    rt.last_prefill, tl = rt.prefill(S)
    return rt, tl


def run_decode(rt: OffloadRuntime, steps: int):
    return rt.decode(steps)


@dataclass
class EquivalenceReport:
    deviations: dict[str, float] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def max_deviation(self) -> float:
        return max(self.deviations.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_dev={self.max_deviation:.3e} (tolerance {self.tolerance:.0e})"


def corrupt_byte(arr: np.ndarray, index: tuple) -> None:
    """Flip the sign bit of one float32 element in place."""
    flat = arr.reshape(-1).view(np.uint8)
    pos = np.ravel_multi_index(index, arr.shape) * arr.itemsize + arr.itemsize - 1
    flat[pos] ^= 0x80


def verify_equivalence(m: ModelSpec, S: int, chunk: int, policies, seed: int = 0,
                       decode_steps: int = 4, hw: HardwareSpec | None = None,
                       mode: Mode | str = Mode.SIMULATED,
                       inject_fault: bool = False) -> EquivalenceReport:
    """Run each policy on one seed and compare every output against Standard.

    Compared outputs are all prefill positions plus ``decode_steps`` decoded
    tokens. ``inject_fault`` flips one cached byte of every non-reference run
    after prefill (negative control).
    """
    from ..workload import get_profile

    hw = hw or get_profile("toy")
    reference = Policy.standard()

    def run(policy: Policy, fault: bool):
        rt, _ = run_prefill(m, hw, policy, S, chunk, mode, seed, decode_steps, numeric=True)
        if fault:
            cache = rt.host_cache if policy.offloads else rt.device_cache
            corrupt_byte(cache.values, (m.num_layers - 1, 0, 0, 0))
        dec, _ = rt.decode(decode_steps)
        return np.concatenate([rt.last_prefill, dec])

    base = run(reference, False)
    report = EquivalenceReport()
    for policy in policies:
        if policy == reference and not inject_fault:
            report.deviations[policy.label] = 0.0
            continue
        out = run(policy, inject_fault)
        report.deviations[policy.label] = float(np.max(np.abs(out - base))) if out.size else 0.0
    return report
