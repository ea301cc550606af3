"""Central packet buffer.

All header and payload memory for packets moving through a node's stack is
provisioned here.  Packets are represented as chains of "snips": one
buffer-resident segment per protocol layer (link header, IPv6 header, UDP
header, payload ...), linked outermost-first.  Because headers are prepended
as fresh snips, payload bytes written once by the application stay in place
until the device driver serializes the frame -- the buffer is what makes the
copy-twice data path possible.

Two interchangeable backends satisfy the same contract: a statically sized
arena with a first-fit free list (the constrained-device model) and a
dynamic backend that allocates from the host heap under the same byte cap.

Allocations carry a priority class.  A configurable reserve (default 25% of
capacity) is off limits to ``SEND_APP`` allocations so that inbound frames
and control traffic can always make progress while applications are
back-pressured; nothing ever blocks waiting for memory.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass

ALIGN = 4
SNIP_OVERHEAD = 16  # declared per-snip metadata cost, counted in `used`
MIN_ARENA_CAPACITY = 256


class ProtocolType(enum.IntEnum):
    UNDEF = 0
    LINK = 1
    SIXLOWPAN = 2
    IPV6 = 3
    UDP = 4
    APP = 5


class AllocPriority(enum.IntEnum):
    """Allocation classes, ordered: CONTROL > RECEIVE > SEND_APP."""

    SEND_APP = 0
    RECEIVE = 1
    CONTROL = 2


class Backend(enum.Enum):
    STATIC_ARENA = "static_arena"
    DYNAMIC = "dynamic"


class BufferError_(Exception):
    """Base class for packet buffer errors."""


class CapacityTooSmall(BufferError_):
    pass


class NoBufferSpace(BufferError_):
    """Allocation denied; the caller must back-pressure, never block."""


class InvalidSize(BufferError_):
    pass


class ReleaseUnheld(BufferError_):
    """users was already 0 -- a programming error, surfaced loudly."""


def _aligned(size: int) -> int:
    return (size + ALIGN - 1) & ~(ALIGN - 1)


def _block_cost(size: int) -> int:
    return SNIP_OVERHEAD + _aligned(size)


class Snip:
    """One buffer-resident segment of a packet.

    ``data`` is writable while the snip is exclusively held.  ``next`` points
    toward the payload end of the chain.
    """

    __slots__ = ("data", "size", "proto", "users", "next", "_buf", "_offset")

    def __init__(self, data, size, proto, buf, offset=None):
        self.data = data
        self.size = size
        self.proto = proto
        self.users = 1
        self.next: Snip | None = None
        self._buf = buf
        self._offset = offset

    def __iter__(self):
        snip = self
        seen = 0
        while snip is not None:
            yield snip
            snip = snip.next
            seen += 1
            if seen > 1 << 16:  # chains are finite by invariant
                raise RuntimeError("snip chain cycle")

    def __repr__(self):
        return (f"<Snip proto={self.proto.name} size={self.size} "
                f"users={self.users}>")


@dataclass
class PacketChain:
    """A packet: chain of snips, outermost header first."""

    head: Snip

    @property
    def total_size(self) -> int:
        return sum(s.size for s in self.head)

    def to_bytes(self) -> bytes:
        """Serialize the chain contents.  Not a counted payload copy by
        itself; call sites tag the movement via metrics."""
        return b"".join(bytes(s.data[: s.size]) for s in self.head)

    def __len__(self):
        return self.total_size


@dataclass
class BufferStats:
    capacity: int
    used: int
    peak: int
    largest_free_block: int
    failed_allocs: dict[AllocPriority, int]

    @property
    def fragmentation_ratio(self) -> float:
        free = self.capacity - self.used
        if free == 0:
            return 0.0
        return 1.0 - self.largest_free_block / free


class PacketBuffer:
    """Shared contract of both backends.  Internally synchronized."""

    def __init__(self, capacity: int, reserve_frac: float = 0.25):
        self.capacity = capacity
        self.reserve = int(capacity * reserve_frac)
        self._lock = threading.RLock()
        self.used = 0
        self.peak = 0
        self.failed_allocs = {p: 0 for p in AllocPriority}

    # -- backend hooks --------------------------------------------------
    def _acquire(self, cost: int):
        """Return backend-specific placement or None if no room."""
        raise NotImplementedError

    def _release_block(self, snip: Snip, cost: int):
        raise NotImplementedError

    def _largest_free_block(self) -> int:
        raise NotImplementedError

    # -- public operations ----------------------------------------------
    def alloc_snip(self, payload=None, size=None, proto=ProtocolType.UNDEF,
                   prio=AllocPriority.SEND_APP) -> Snip:
        if payload is not None:
            size = len(payload)
        if size is None or size <= 0:
            raise InvalidSize(f"snip size must be > 0, got {size}")
        cost = _block_cost(size)
        with self._lock:
            cap = self.capacity
            if prio == AllocPriority.SEND_APP:
                cap -= self.reserve
            if self.used + cost > cap:
                self.failed_allocs[prio] += 1
                raise NoBufferSpace(
                    f"{size} B at {prio.name}: used={self.used}/{self.capacity}")
            placement = self._acquire(cost)
            if placement is None:  # arena fragmentation
                self.failed_allocs[prio] += 1
                raise NoBufferSpace(
                    f"{size} B at {prio.name}: no contiguous block")
            self.used += cost
            self.peak = max(self.peak, self.used)
            snip = self._make_snip(placement, size, proto)
        if payload is not None:
            snip.data[:size] = payload
        return snip

    def _make_snip(self, placement, size, proto) -> Snip:
        raise NotImplementedError

    def hold(self, snip: Snip) -> None:
        """Add one holder to every snip in the chain."""
        with self._lock:
            for s in snip:
                if s.users == 0:
                    raise ReleaseUnheld("hold on freed snip")
                s.users += 1

    def release(self, snip: Snip) -> None:
        """Drop one holder from every snip in the chain; at 0 the memory
        returns to the arena."""
        with self._lock:
            chain = list(snip)
            for s in chain:
                if s.users == 0:
                    raise ReleaseUnheld("release on freed snip")
            for s in chain:
                s.users -= 1
                if s.users == 0:
                    cost = _block_cost(s.size)
                    self._release_block(s, cost)
                    self.used -= cost

    def prepend_header(self, pkt: PacketChain, header_size: int,
                       proto=ProtocolType.UNDEF,
                       prio=AllocPriority.SEND_APP) -> PacketChain:
        """Grow the chain head-ward without touching payload snips.

        On failure the original chain is left intact.  A shared head
        (users > 1) is never mutated; only the new snip's link points at it.
        """
        if header_size <= 0:
            raise InvalidSize("header size must be > 0")
        snip = self.alloc_snip(size=header_size, proto=proto, prio=prio)
        snip.next = pkt.head
        return PacketChain(snip)

    def stats(self) -> BufferStats:
        with self._lock:
            return BufferStats(
                capacity=self.capacity,
                used=self.used,
                peak=self.peak,
                largest_free_block=self._largest_free_block(),
                failed_allocs=dict(self.failed_allocs),
            )


class ArenaBuffer(PacketBuffer):
    """First-fit allocator over a statically sized arena.

    Free blocks coalesce immediately on release; snip data starts
    ``SNIP_OVERHEAD`` bytes into its block and stays 4-byte aligned.
    """

    def __init__(self, capacity, reserve_frac=0.25):
        if capacity < MIN_ARENA_CAPACITY:
            raise CapacityTooSmall(
                f"arena needs >= {MIN_ARENA_CAPACITY} B, got {capacity}")
        super().__init__(capacity, reserve_frac)
        self._arena = bytearray(capacity)
        self._free: list[list[int]] = [[0, capacity]]  # [offset, length]

    def _acquire(self, cost):
        for i, (off, length) in enumerate(self._free):
            if length >= cost:
                if length == cost:
                    del self._free[i]
                else:
                    self._free[i] = [off + cost, length - cost]
                return off
        return None

    def _release_block(self, snip, cost):
        off = snip._offset
        self._insert_free(off, cost)

    def _insert_free(self, off, length):
        free = self._free
        lo = 0
        while lo < len(free) and free[lo][0] < off:
            lo += 1
        free.insert(lo, [off, length])
        # coalesce with successor then predecessor
        if lo + 1 < len(free) and free[lo][0] + free[lo][1] == free[lo + 1][0]:
            free[lo][1] += free[lo + 1][1]
            del free[lo + 1]
        if lo > 0 and free[lo - 1][0] + free[lo - 1][1] == free[lo][0]:
            free[lo - 1][1] += free[lo][1]
            del free[lo]

    def _largest_free_block(self):
        return max((length for _, length in self._free), default=0)

    def _make_snip(self, placement, size, proto):
        start = placement + SNIP_OVERHEAD
        view = memoryview(self._arena)[start:start + size]
        return Snip(view, size, proto, self, offset=placement)

    def free_list(self):
        """Snapshot of (offset, length) free blocks, for oracle checks."""
        with self._lock:
            return [tuple(b) for b in self._free]


class DynamicBuffer(PacketBuffer):
    """Heap-backed backend under the same byte cap and accounting rules."""

    def _acquire(self, cost):
        return cost  # accounting alone; no placement

    def _release_block(self, snip, cost):
        pass

    def _largest_free_block(self):
        return self.capacity - self.used

    def _make_snip(self, placement, size, proto):
        return Snip(bytearray(size), size, proto, self)


def buffer_create(capacity: int, backend: Backend = Backend.STATIC_ARENA,
                  reserve_frac: float = 0.25) -> PacketBuffer:
    if backend == Backend.STATIC_ARENA:
        return ArenaBuffer(capacity, reserve_frac)
    return DynamicBuffer(capacity, reserve_frac)
