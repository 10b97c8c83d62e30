"""Simulated-time ledger of compute intervals and link transfers."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field


class Direction(enum.Enum):
    HOST_TO_DEVICE = "h2d"
    DEVICE_TO_HOST = "d2h"


class Stream(enum.Enum):
    COMPUTE = "compute"
    PREFETCH = "prefetch"
    EVICT = "evict"


STREAM_OF = {Direction.HOST_TO_DEVICE: Stream.PREFETCH, Direction.DEVICE_TO_HOST: Stream.EVICT}
_ORDER = {Stream.COMPUTE: 0, Stream.PREFETCH: 1, Stream.EVICT: 2}


@dataclass(frozen=True)
class ComputeInterval:
    label: str
    start: float
    end: float
    flops: float = 0.0
    slot: int | None = None
    stream = Stream.COMPUTE


@dataclass(frozen=True)
class TransferEvent:
    direction: Direction
    bytes: int
    start: float
    end: float
    label: str = ""
    slot: int | None = None

    @property
    def stream(self) -> Stream:
        return STREAM_OF[self.direction]


def _union(intervals):
    merged = []
    for a, b in sorted(intervals):
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return merged


def _length(merged) -> float:
    return sum(b - a for a, b in merged)


def _intersection(xs, ys) -> float:
    total, i, j = 0.0, 0, 0
    while i < len(xs) and j < len(ys):
        lo = max(xs[i][0], ys[j][0])
        hi = min(xs[i][1], ys[j][1])
        if hi > lo:
            total += hi - lo
        if xs[i][1] < ys[j][1]:
            i += 1
        else:
            j += 1
    return total


@dataclass
class SimTimeline:
    compute: list[ComputeInterval] = field(default_factory=list)
    transfers: list[TransferEvent] = field(default_factory=list)
    peak_device_bytes: int = 0
    _stream_end: dict = field(default_factory=lambda: {Stream.PREFETCH: 0.0, Stream.EVICT: 0.0})

    def add_compute(self, label: str, start: float, duration: float, flops: float = 0.0,
                    slot: int | None = None) -> ComputeInterval:
        iv = ComputeInterval(label, start, start + duration, flops, slot)
        self.compute.append(iv)
        return iv

    def schedule_transfer(self, direction: Direction, nbytes: int, not_before: float,
                          bandwidth: float, label: str = "", slot: int | None = None) -> TransferEvent:
        """Queue a transfer on its direction's stream; streams never overlap themselves."""
        if nbytes < 0:
            raise ValueError("transfer size must be >= 0")
        stream = STREAM_OF[direction]
        start = max(not_before, self._stream_end[stream])
        ev = TransferEvent(direction, nbytes, start, start + nbytes / bandwidth, label, slot)
        self._stream_end[stream] = ev.end
        self.transfers.append(ev)
        return ev

    @property
    def makespan(self) -> float:
        ends = [e.end for e in self.compute] + [e.end for e in self.transfers]
        return max(ends, default=0.0)

    def busy(self, stream: Stream) -> float:
        if stream is Stream.COMPUTE:
            return sum(e.end - e.start for e in self.compute)
        return sum(e.end - e.start for e in self.transfers if e.stream is stream)

    @property
    def overlap_fraction(self) -> float:
        """Share of link-busy time hidden under compute (1.0 with no transfers)."""
        xfer = _union((e.start, e.end) for e in self.transfers)
        span = _length(xfer)
        if span == 0:
            return 1.0
        comp = _union((e.start, e.end) for e in self.compute)
        return min(1.0, _intersection(comp, xfer) / span)

    def events(self) -> list[dict]:
        rows = []
        for e in self.compute:
            rows.append({"kind": "compute", "stream": "compute", "label": e.label,
                         "start": e.start, "end": e.end, "flops": e.flops})
        for e in self.transfers:
            rows.append({"kind": "transfer", "stream": e.stream.value, "label": e.label,
                         "direction": e.direction.value, "start": e.start, "end": e.end,
                         "bytes": e.bytes})
        order = {s.value: i for s, i in _ORDER.items()}
        rows.sort(key=lambda r: (r["start"], order[r["stream"]], r["end"]))
        return rows

    def summary(self) -> dict:
        return {"makespan": self.makespan, "overlap_fraction": self.overlap_fraction,
                "peak_device_bytes": self.peak_device_bytes,
                "compute_events": len(self.compute), "transfer_events": len(self.transfers)}

    def to_json(self) -> str:
        return json.dumps(self.events())
