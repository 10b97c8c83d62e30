"""Depth-two prefetch/compute/evict pipeline over ping-pong staging slots.

A sweep is a sequence of units (one head-group of one layer each). While unit
``i`` computes, unit ``i+1`` is prefetched into the other slot and unit
``i-1``'s new KV rows are evicted from its staging slot. Steps advance in lock
step, so a sweep lasts::

    fill + sum_i max(compute_i, prefetch_{i+1}, evict_{i-1}) + drain

with ``fill`` the first prefetch and ``drain`` the last eviction.
"""

from __future__ import annotations

import threading
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass

from .timeline import Direction, SimTimeline, Stream

SLOTS = 2


class PingPongViolation(RuntimeError):
    """A staging slot was reused before its previous user signalled completion."""


@dataclass(frozen=True)
class Unit:
    label: str
    compute: float  # seconds
    flops: float = 0.0
    prefetch_bytes: int = 0
    evict_bytes: int = 0
    slot: int | None = None  # None: resident on device, no transfers
    prefetch_bw: float = 1.0
    evict_bw: float = 1.0


def schedule_sweep(tl: SimTimeline, units: list[Unit], start: float = 0.0) -> float:
    """Lay ``units`` onto the timeline from ``start``; returns the sweep's end time."""
    if not units:
        return start

    def prefetch(u: Unit, at: float) -> float:
        if u.slot is None or u.prefetch_bytes == 0:
            return at
        return tl.schedule_transfer(Direction.HOST_TO_DEVICE, u.prefetch_bytes, at,
                                    u.prefetch_bw, u.label, u.slot).end

    def evict(u: Unit, at: float) -> float:
        if u.slot is None or u.evict_bytes == 0:
            return at
        return tl.schedule_transfer(Direction.DEVICE_TO_HOST, u.evict_bytes, at,
                                    u.evict_bw, u.label, u.slot).end

    t = prefetch(units[0], start)
    for i, u in enumerate(units):
        ends = [tl.add_compute(u.label, t, u.compute, u.flops, u.slot).end]
        if i + 1 < len(units):
            ends.append(prefetch(units[i + 1], t))
        if i > 0:
            ends.append(evict(units[i - 1], t))
        t = max(ends)
    return evict(units[-1], t)


def sweep_bound(units: list[Unit]) -> float:
    """Closed-form duration of :func:`schedule_sweep` for the same units."""
    if not units:
        return 0.0

    def p(u):
        return u.prefetch_bytes / u.prefetch_bw if u.slot is not None else 0.0

    def e(u):
        return u.evict_bytes / u.evict_bw if u.slot is not None else 0.0

    body = 0.0
    for i, u in enumerate(units):
        nxt = p(units[i + 1]) if i + 1 < len(units) else 0.0
        prev = e(units[i - 1]) if i > 0 else 0.0
        body += max(u.compute, nxt, prev)
    return p(units[0]) + body + e(units[-1])


def check_pingpong(tl: SimTimeline) -> None:
    """Assert slot safety and hand-off order on a finished timeline.

    Per unit: compute starts after its prefetch ends and its eviction starts
    after compute ends. Per staging buffer: no write overlaps any other access
    (compute appends the new rows, so it writes both of its unit's buffers).
    """
    by_label: dict[str, dict] = defaultdict(dict)
    accesses: dict[tuple, list] = defaultdict(list)
    for c in tl.compute:
        if c.slot is None:
            continue
        by_label[c.label]["compute"] = c
        accesses[("kv", c.slot)].append((c.start, c.end, True, c.label))
        accesses[("stage", c.slot)].append((c.start, c.end, True, c.label))
    for t in tl.transfers:
        if t.stream is Stream.PREFETCH:
            by_label[t.label]["prefetch"] = t
            accesses[("kv", t.slot)].append((t.start, t.end, True, t.label))
        else:
            by_label[t.label]["evict"] = t
            accesses[("stage", t.slot)].append((t.start, t.end, False, t.label))

    for label, ev in by_label.items():
        c = ev.get("compute")
        if c is None:
            raise PingPongViolation(f"{label}: transfer without compute")
        if "prefetch" in ev and c.start < ev["prefetch"].end:
            raise PingPongViolation(f"{label}: compute starts before its prefetch completes")
        if "evict" in ev and ev["evict"].start < c.end:
            raise PingPongViolation(f"{label}: eviction starts before compute completes")

    for buf, items in accesses.items():
        items.sort(key=lambda a: (a[0], a[1]))
        end_any = end_write = float("-inf")
        for start, end, write, label in items:
            limit = end_any if write else end_write
            if start < limit:
                raise PingPongViolation(f"{label}: slot {buf} reused while still in use")
            end_any = max(end_any, end)
            if write:
                end_write = max(end_write, end)


class SlotGuard:
    """Run-time reader/writer check on staging buffers, shared by all lanes."""

    def __init__(self):
        self._lock = threading.Lock()
        self._readers: dict = defaultdict(int)
        self._writing: set = set()
        self.log: list[tuple] = []

    @contextmanager
    def access(self, buf, write: bool, who: str):
        with self._lock:
            if buf in self._writing or (write and self._readers[buf]):
                raise PingPongViolation(f"{who}: {buf} is still in use")
            if write:
                self._writing.add(buf)
            else:
                self._readers[buf] += 1
            self.log.append(("begin", buf, write, who))
        try:
            yield
        finally:
            with self._lock:
                if write:
                    self._writing.discard(buf)
                else:
                    self._readers[buf] -= 1
                self.log.append(("end", buf, write, who))
