"""Capacity-enforced byte arenas for the device and host tiers."""

from __future__ import annotations

import enum
import itertools

from ..errors import CapacityExceeded


class Tier(enum.Enum):
    DEVICE = "device"
    HOST = "host"


class Arena:
    """Bookkeeping-only allocator: tracks sizes and owners, never lends memory."""

    def __init__(self, tier: Tier, capacity: int):
        self.tier = tier
        self.capacity = capacity
        self.used = 0
        self.peak = 0
        self.allocations: dict[int, tuple[int, str]] = {}
        self._handles = itertools.count(1)

    def alloc(self, nbytes: int, tag: str) -> int:
        if nbytes < 0:
            raise ValueError("allocation size must be >= 0")
        if self.used + nbytes > self.capacity:
            raise CapacityExceeded(
                f"{self.tier.value} arena: {tag} needs {nbytes} bytes, "
                f"{self.capacity - self.used} of {self.capacity} free"
            )
        handle = next(self._handles)
        self.allocations[handle] = (nbytes, tag)
        self.used += nbytes
        self.peak = max(self.peak, self.used)
        return handle

    def free(self, handle: int) -> None:
        try:
            nbytes, _ = self.allocations.pop(handle)
        except KeyError:
            raise KeyError(f"{self.tier.value} arena: unknown handle {handle}") from None
        self.used -= nbytes

    def bytes_tagged(self, tag: str) -> int:
        return sum(n for n, t in self.allocations.values() if t == tag)

    def check(self) -> None:
        assert self.used == sum(n for n, _ in self.allocations.values())
        assert 0 <= self.used <= self.capacity, (self.used, self.capacity)
