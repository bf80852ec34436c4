"""Deterministic discrete-event engine: clock, scheduler, and bottleneck links.

Time is integer microseconds throughout; the clock never uses floats, so
identical (config, seed) inputs replay to bit-identical event traces.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass
from enum import Enum
from random import Random
from typing import Callable, Optional

MTU_BYTES = 1500

US_PER_S = 1_000_000


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def serialization_us(size_bytes: int, rate_bps: int) -> int:
    """Wire time of a packet, rounded up so modeled rate never exceeds nominal."""
    return ceil_div(size_bytes * 8 * US_PER_S, rate_bps)


class PacketKind(Enum):
    HANDSHAKE = "handshake"
    DATA = "data"
    ACK = "ack"
    TOKEN = "token"


@dataclass(slots=True)
class Packet:
    """Unit of simulated transmission.

    size_bytes is the wire size (capped at MTU); payload_bytes is the
    application bytes carried, zero for control packets.
    """

    id: int
    flow_id: int
    kind: PacketKind
    size_bytes: int
    payload_bytes: int = 0
    offset: int = 0
    pn: int = -1
    ack: object = None
    blob: bytes = b""
    enqueue_time_us: int = -1
    deliver_time_us: int = -1

    def __post_init__(self) -> None:
        if not 1 <= self.size_bytes <= MTU_BYTES:
            raise ValueError(f"packet size {self.size_bytes} outside 1..{MTU_BYTES}")


class SimClock:
    """Monotonically non-decreasing simulated time in microseconds."""

    __slots__ = ("now_us",)

    def __init__(self) -> None:
        self.now_us = 0

    @property
    def now_s(self) -> float:
        return self.now_us / US_PER_S


class EventHandle:
    __slots__ = ("fire_at_us", "cancelled")

    def __init__(self, fire_at_us: int) -> None:
        self.fire_at_us = fire_at_us
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class TraceLog:
    """Append-only log of link-level events, serializable for byte comparison."""

    __slots__ = ("records",)

    def __init__(self) -> None:
        self.records: list[tuple[int, int, str, str, int, int]] = []

    def add(self, t_us: int, flow_id: int, event: str, kind: str, pn: int, size: int) -> None:
        self.records.append((t_us, flow_id, event, kind, pn, size))

    def lines(self) -> list[str]:
        return [f"{t},{f},{e},{k},{pn},{sz}" for t, f, e, k, pn, sz in self.records]

    def to_bytes(self) -> bytes:
        return ("\n".join(self.lines()) + "\n").encode()


class Simulation:
    """Single-threaded event loop.

    Events fire in (fire_at_us, seq) order; seq is a scheduling counter, so
    ties execute FIFO. A whole Simulation owns its state and may be moved
    between threads, but is never shared.
    """

    def __init__(self, seed: int = 0) -> None:
        self.clock = SimClock()
        self.seed = seed
        self.trace: Optional[TraceLog] = None
        self._heap: list[tuple[int, int, EventHandle, Callable[[], None]]] = []
        self._seq = 0

    def rng(self, name: str) -> Random:
        # string seeding is stable across processes, unlike hash()
        return Random(f"{self.seed}/{name}")

    def schedule(self, delay_us: int, action: Callable[[], None]) -> EventHandle:
        if delay_us < 0:
            raise ValueError("cannot schedule into the past")
        return self.schedule_at(self.clock.now_us + delay_us, action)

    def schedule_at(self, t_us: int, action: Callable[[], None]) -> EventHandle:
        if t_us < self.clock.now_us:
            raise ValueError("cannot schedule into the past")
        handle = EventHandle(t_us)
        heapq.heappush(self._heap, (t_us, self._seq, handle, action))
        self._seq += 1
        return handle

    def run_until(self, t_end_us: int) -> int:
        """Process every event with fire_at <= t_end_us; advance clock to t_end_us.

        Returns the number of events processed (cancelled ones excluded).
        """
        if t_end_us < self.clock.now_us:
            raise ValueError("t_end before current time")
        heap = self._heap
        clock = self.clock
        processed = 0
        while heap and heap[0][0] <= t_end_us:
            t_us, _, handle, action = heapq.heappop(heap)
            if handle.cancelled:
                continue
            clock.now_us = t_us
            action()
            processed += 1
        if t_end_us > clock.now_us:
            clock.now_us = t_end_us
        return processed

    def pending_events(self) -> int:
        return sum(1 for _, _, h, _ in self._heap if not h.cancelled)


@dataclass(slots=True)
class LinkConfig:
    """One direction of a bottleneck: fixed rate, fixed propagation, drop-tail queue.

    queue_capacity_pkts counts packets waiting behind the one in service.
    jitter_max_us, when nonzero, adds a uniform random service-time extension
    per packet (never reorders; loss stays queue-overflow only).
    """

    rate_bps: int
    one_way_delay_us: int
    queue_capacity_pkts: int
    jitter_max_us: int = 0

    def __post_init__(self) -> None:
        if self.rate_bps <= 0:
            raise ValueError("rate_bps must be > 0")
        if self.one_way_delay_us < 0:
            raise ValueError("one_way_delay_us must be >= 0")
        if self.queue_capacity_pkts < 1:
            raise ValueError("queue_capacity_pkts must be >= 1")

    def serialization_us(self, size_bytes: int) -> int:
        return serialization_us(size_bytes, self.rate_bps)


def bdp_packets(rate_bps: int, rtt_us: int, mtu_bytes: int = MTU_BYTES) -> int:
    """Bandwidth-delay product in MTU-sized packets, rounded up (min 1)."""
    bdp_bytes = ceil_div(rate_bps * rtt_us, 8 * US_PER_S)
    return max(1, ceil_div(bdp_bytes, mtu_bytes))


class Link:
    """FIFO drop-tail link: serialization at rate_bps, then fixed propagation.

    Deliveries preserve offer order; a packet offered to a full queue is
    dropped with no other side effect.
    """

    __slots__ = (
        "sim", "cfg", "name", "receive",
        "busy_until_us", "_completions", "_rng",
        "offered", "delivered", "dropped",
    )

    def __init__(self, sim: Simulation, cfg: LinkConfig, name: str) -> None:
        self.sim = sim
        self.cfg = cfg
        self.name = name
        self.receive: Optional[Callable[[Packet], None]] = None
        self.busy_until_us = 0
        # completion times of accepted packets not yet fully serialized
        self._completions: deque[int] = deque()
        self._rng = sim.rng(f"link/{name}") if cfg.jitter_max_us > 0 else None
        self.offered = 0
        self.delivered = 0
        self.dropped = 0

    def attach(self, receive: Callable[[Packet], None]) -> None:
        self.receive = receive

    def queue_depth(self, now_us: int) -> int:
        """Packets waiting (excludes the one currently serializing)."""
        comp = self._completions
        while comp and comp[0] <= now_us:
            comp.popleft()
        in_service = 1 if self.busy_until_us > now_us else 0
        return len(comp) - in_service

    def offer(self, pkt: Packet) -> bool:
        """Accept a packet for transmission, or drop it. Returns acceptance."""
        now = self.sim.clock.now_us
        self.offered += 1
        trace = self.sim.trace
        if trace is not None:
            trace.add(now, pkt.flow_id, "send", pkt.kind.value, pkt.pn, pkt.size_bytes)
        if self.queue_depth(now) >= self.cfg.queue_capacity_pkts:
            self.dropped += 1
            pkt.enqueue_time_us = now
            if trace is not None:
                trace.add(now, pkt.flow_id, "drop", pkt.kind.value, pkt.pn, pkt.size_bytes)
            return False
        ser = self.cfg.serialization_us(pkt.size_bytes)
        if self._rng is not None:
            ser += self._rng.randint(0, self.cfg.jitter_max_us)
        start = self.busy_until_us if self.busy_until_us > now else now
        done = start + ser
        self.busy_until_us = done
        self._completions.append(done)
        pkt.enqueue_time_us = now
        pkt.deliver_time_us = done + self.cfg.one_way_delay_us
        self.sim.schedule_at(pkt.deliver_time_us, _Delivery(self, pkt))
        return True

    def _deliver(self, pkt: Packet) -> None:
        self.delivered += 1
        trace = self.sim.trace
        if trace is not None:
            trace.add(pkt.deliver_time_us, pkt.flow_id, "deliver",
                      pkt.kind.value, pkt.pn, pkt.size_bytes)
        if self.receive is not None:
            self.receive(pkt)


class _Delivery:
    """Bound delivery action; cheaper than a closure per packet."""

    __slots__ = ("link", "pkt")

    def __init__(self, link: Link, pkt: Packet) -> None:
        self.link = link
        self.pkt = pkt

    def __call__(self) -> None:
        self.link._deliver(self.pkt)
