"""Offload runtime: arenas, simulated timeline, ping-pong pipeline and executor."""

from .arena import Arena, Tier
from .executor import (EquivalenceReport, Mode, OffloadRuntime, run_decode, run_prefill,
                       verify_equivalence)
from .pipeline import PingPongViolation, SlotGuard, Unit, check_pingpong, schedule_sweep, sweep_bound
from .timeline import Direction, SimTimeline, Stream, TransferEvent

__all__ = [
    "Arena", "Tier", "EquivalenceReport", "Mode", "OffloadRuntime", "run_decode", "run_prefill",
    "verify_equivalence", "PingPongViolation", "SlotGuard", "Unit", "check_pingpong",
    "schedule_sweep", "sweep_bound", "Direction", "SimTimeline", "Stream", "TransferEvent",
]
