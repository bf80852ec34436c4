"""Reliable in-order byte-stream transport between two simulated endpoints.

One Flow owns a client endpoint (sends the request, receives data, acks)
and a server endpoint (serves the requested bytes under congestion control
and pacing). The handshake is modeled purely as latency: a configurable
number of round trips before application data may enter the network, or
zero when resuming.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .congestion import (
    Algorithm,
    INITIAL_WINDOW_BYTES,
    MIN_WINDOW_BYTES,
    MSS_BYTES,
    SSTHRESH_INFINITE,
    UNPACED_RATE_BPS,
    make_controller,
)
from .simnet import Link, Packet, PacketKind, Simulation, US_PER_S, ceil_div

HEADER_BYTES = 40
HANDSHAKE_WIRE_BYTES = 1200  # first flights are padded, so their size never leaks intent
REQUEST_PAYLOAD_BYTES = 64
ACK_WIRE_BYTES = 40

PACKET_LOSS_THRESHOLD = 3
MAX_ACK_RANGES = 32
INITIAL_TIMER_US = 1_000_000
MIN_TIMER_US = 1_000


class ConnState(Enum):
    IDLE = "idle"
    HANDSHAKING = "handshaking"
    ESTABLISHED = "established"
    CLOSED = "closed"


class OpenMode(Enum):
    FRESH = "fresh"
    RESUME_0RTT = "resume_0rtt"
    RESUME_BDP = "resume_bdp"


class TransferStatus(Enum):
    COMPLETE = "complete"
    TIMEOUT = "timeout"


class RangeSet:
    """Sorted disjoint half-open integer ranges with O(1) in-order appends."""

    __slots__ = ("_starts", "_ends", "covered")

    def __init__(self) -> None:
        self._starts: list[int] = []
        self._ends: list[int] = []
        self.covered = 0

    def __len__(self) -> int:
        return len(self._starts)

    def add(self, start: int, end: int) -> int:
        """Insert [start, end); returns the count of newly covered integers."""
        if start >= end:
            raise ValueError("empty range")
        starts, ends = self._starts, self._ends
        if not starts or start > ends[-1]:
            starts.append(start)
            ends.append(end)
            self.covered += end - start
            return end - start
        if start == ends[-1]:
            ends[-1] = max(end, ends[-1])
            self.covered += end - start
            return end - start
        i = bisect_right(starts, start) - 1
        if i >= 0 and ends[i] >= start:
            lo = i
            new_start = starts[i]
        else:
            lo = i + 1
            new_start = start
        j = lo
        new_end = end
        existing = 0
        while j < len(starts) and starts[j] <= new_end:
            existing += ends[j] - starts[j]
            new_end = max(new_end, ends[j])
            j += 1
        starts[lo:j] = [new_start]
        ends[lo:j] = [new_end]
        added = (new_end - new_start) - existing
        self.covered += added
        return added

    def prefix_end(self, origin: int = 0) -> int:
        """End of the contiguous run starting at origin (origin if uncovered)."""
        if self._starts and self._starts[0] <= origin < self._ends[0]:
            return self._ends[0]
        return origin

    def covers(self, start: int, end: int) -> bool:
        i = bisect_right(self._starts, start) - 1
        return i >= 0 and self._ends[i] >= end

    def max_end(self) -> int:
        return self._ends[-1] if self._ends else 0

    def tail(self, n: int) -> list[tuple[int, int]]:
        """Last n ranges, ascending, as half-open pairs."""
        return list(zip(self._starts[-n:], self._ends[-n:]))

    def gaps(self, lo: int, hi: int) -> list[tuple[int, int]]:
        """Uncovered sub-intervals of [lo, hi), ascending."""
        out: list[tuple[int, int]] = []
        starts, ends = self._starts, self._ends
        i = bisect_right(starts, lo) - 1
        cursor = lo
        if i >= 0 and ends[i] > lo:
            cursor = ends[i]
        i += 1
        while cursor < hi:
            if i < len(starts) and starts[i] < hi:
                if starts[i] > cursor:
                    out.append((cursor, starts[i]))
                cursor = ends[i]
                i += 1
            else:
                out.append((cursor, hi))
                break
        return out


@dataclass(slots=True)
class AckInfo:
    """Cumulative-plus-selective acknowledgment over packet numbers."""

    largest_pn: int
    ranges: tuple[tuple[int, int], ...]  # ascending, half-open pn ranges


class Connection:
    """Transport endpoint state: window, RTT estimators, in-flight accounting."""

    __slots__ = (
        "mode", "state", "algorithm", "controller",
        "cwnd_bytes", "ssthresh_bytes",
        "srtt_us", "rttvar_us", "min_rtt_us",
        "bytes_in_flight", "next_seq", "highest_acked",
        "pacing_rate_bps",
        "seeded", "seed_active", "fallback", "congestion_events",
    )

    def __init__(self, mode: OpenMode = OpenMode.FRESH,
                 algorithm: Algorithm = Algorithm.NEWRENO) -> None:
        self.mode = mode
        self.state = ConnState.IDLE
        self.algorithm = algorithm
        self.controller = make_controller(algorithm)
        self.cwnd_bytes = INITIAL_WINDOW_BYTES
        self.ssthresh_bytes = SSTHRESH_INFINITE
        self.srtt_us = 0        # 0 means no sample yet
        self.rttvar_us = 0
        self.min_rtt_us = 0     # 0 means no sample yet
        self.bytes_in_flight = 0
        self.next_seq = 0
        self.highest_acked = -1
        self.pacing_rate_bps = UNPACED_RATE_BPS
        self.seeded = False
        self.seed_active = False
        self.fallback = False
        self.congestion_events = 0

    def on_rtt_sample(self, sample_us: int) -> None:
        if sample_us <= 0:
            return
        if self.min_rtt_us == 0 or sample_us < self.min_rtt_us:
            self.min_rtt_us = sample_us
        if self.srtt_us == 0:
            self.srtt_us = sample_us
            self.rttvar_us = sample_us // 2
        else:
            self.rttvar_us = (3 * self.rttvar_us + abs(self.srtt_us - sample_us)) // 4
            self.srtt_us = (7 * self.srtt_us + sample_us) // 8
        self.update_pacing()

    def on_ack(self, acked_bytes: int, rtt_sample_us: Optional[int] = None) -> "Connection":
        """Apply an acknowledgment: estimators, window growth, pacing."""
        if acked_bytes <= 0:
            raise ValueError("acked_bytes must be > 0")
        if rtt_sample_us is not None:
            self.on_rtt_sample(rtt_sample_us)
        self.controller.on_ack(self, acked_bytes)
        self.update_pacing()
        return self

    def on_loss_detected(self, lost_bytes: int) -> "Connection":
        """One congestion event: multiplicative decrease, seed discarded if active."""
        self.controller.on_congestion_event(self)
        if self.seed_active:
            self.seed_active = False
        self.congestion_events += 1
        self.update_pacing()
        return self

    def apply_seed(self, cwnd_bytes: int, srtt_us: int) -> None:
        """Start from saved path characteristics instead of the initial window."""
        self.cwnd_bytes = max(cwnd_bytes, MIN_WINDOW_BYTES)
        self.srtt_us = srtt_us
        self.rttvar_us = srtt_us // 2
        self.seeded = True
        self.seed_active = True
        self.controller.on_seed(self)
        self.update_pacing()

    def update_pacing(self) -> None:
        self.pacing_rate_bps = self.controller.pacing_rate_bps(self)

    def timer_interval_us(self) -> int:
        if self.srtt_us == 0:
            return INITIAL_TIMER_US
        return max(self.srtt_us + 4 * self.rttvar_us, MIN_TIMER_US)


@dataclass(slots=True)
class TransferResult:
    flow_id: int
    file_size_bytes: int
    start_us: int
    first_byte_us: int
    completion_us: int          # last distinct byte delivered at the receiver
    retransmitted_bytes: int
    status: TransferStatus
    mode: OpenMode
    fallback: bool
    sender_done_us: int         # last distinct byte acknowledged at the sender
    congestion_events: int
    delivered_bytes: int

    @property
    def transfer_time_s(self) -> float:
        return (self.completion_us - self.start_us) / US_PER_S


_OUT, _ACKED, _LOST = 0, 1, 2


class _SentRecord:
    __slots__ = ("offset", "length", "sent_us", "state", "delivered_snapshot")

    def __init__(self, offset: int, length: int, sent_us: int,
                 delivered_snapshot: int) -> None:
        self.offset = offset
        self.length = length
        self.sent_us = sent_us
        self.state = _OUT
        self.delivered_snapshot = delivered_snapshot


class Sender:
    """Server-side data source: windowed, paced, with retransmission."""

    __slots__ = (
        "sim", "flow_id", "conn", "link", "file_size",
        "next_offset", "retx", "sent", "lowest_live",
        "acked", "acked_pns", "recovery_start_us", "_lost_scan_pn",
        "pace_next_us", "_pace_handle",
        "_timer_handle", "_timer_deadline", "_timer_backoff",
        "retransmitted_bytes", "complete", "done_us", "on_complete",
        "_pkt_id",
    )

    def __init__(self, sim: Simulation, flow_id: int, conn: Connection,
                 link: Link, file_size: int,
                 on_complete: Optional[Callable[[], None]] = None) -> None:
        self.sim = sim
        self.flow_id = flow_id
        self.conn = conn
        self.link = link
        self.file_size = file_size
        self.next_offset = 0
        self.retx: list[tuple[int, int]] = []
        self.sent: dict[int, _SentRecord] = {}
        self.lowest_live = 0
        self.acked = RangeSet()
        self.acked_pns = RangeSet()
        self.recovery_start_us = -1
        self._lost_scan_pn = 0
        self.pace_next_us = 0
        self._pace_handle = None
        self._timer_handle = None
        self._timer_deadline = 0
        self._timer_backoff = 1
        self.retransmitted_bytes = 0
        self.complete = False
        self.done_us = -1
        self.on_complete = on_complete
        self._pkt_id = 0

    def start(self) -> None:
        self.conn.state = ConnState.ESTABLISHED
        self.try_send()

    # -- transmission ---------------------------------------------------

    def _take_chunk(self) -> Optional[tuple[int, int, bool]]:
        if self.retx:
            off, length = self.retx.pop(0)
            return off, length, True
        if self.next_offset < self.file_size:
            length = min(MSS_BYTES, self.file_size - self.next_offset)
            off = self.next_offset
            self.next_offset += length
            return off, length, False
        return None

    def try_send(self) -> None:
        if self.complete:
            return
        conn = self.conn
        now = self.sim.clock.now_us
        while conn.bytes_in_flight < conn.cwnd_bytes:
            if now < self.pace_next_us:
                self._arm_pacer()
                return
            chunk = self._take_chunk()
            if chunk is None:
                return
            off, length, is_retx = chunk
            pn = conn.next_seq
            conn.next_seq += 1
            rec = _SentRecord(off, length, now, self.acked.covered)
            self.sent[pn] = rec
            conn.bytes_in_flight += length
            if is_retx:
                self.retransmitted_bytes += length
            pkt = Packet(
                id=self._pkt_id, flow_id=self.flow_id, kind=PacketKind.DATA,
                size_bytes=length + HEADER_BYTES, payload_bytes=length,
                offset=off, pn=pn,
            )
            self._pkt_id += 1
            self.link.offer(pkt)
            gap = ceil_div(pkt.size_bytes * 8 * US_PER_S, conn.pacing_rate_bps)
            base = self.pace_next_us if self.pace_next_us > now else now
            self.pace_next_us = base + gap
            self._push_timer(now)

    def _arm_pacer(self) -> None:
        if self._pace_handle is None or self._pace_handle.cancelled:
            self._pace_handle = self.sim.schedule_at(self.pace_next_us, self._on_pace)

    def _on_pace(self) -> None:
        self._pace_handle = None
        self.try_send()

    # -- acknowledgment / loss ------------------------------------------

    def on_ack_packet(self, ack: AckInfo) -> None:
        if self.complete:
            return
        now = self.sim.clock.now_us
        conn = self.conn
        sent = self.sent
        newly_acked = 0
        rtt_sample = None
        for lo, hi in ack.ranges:
            for gap_lo, gap_hi in self.acked_pns.gaps(lo, hi):
                for pn in range(gap_lo, gap_hi):
                    rec = sent.get(pn)
                    if rec is None:
                        continue
                    if rec.state == _OUT:
                        rec.state = _ACKED
                        conn.bytes_in_flight -= rec.length
                        newly_acked += rec.length
                        self.acked.add(rec.offset, rec.offset + rec.length)
                        if pn == ack.largest_pn:
                            rtt_sample = now - rec.sent_us
                            if rtt_sample > 0:
                                conn.controller.record_delivery_sample(
                                    (self.acked.covered - rec.delivered_snapshot)
                                    * 8 * US_PER_S // rtt_sample)
                    elif rec.state == _LOST:
                        rec.state = _ACKED
                        self.acked.add(rec.offset, rec.offset + rec.length)
            self.acked_pns.add(lo, hi)
        if ack.largest_pn > conn.highest_acked:
            conn.highest_acked = ack.largest_pn
        if newly_acked > 0:
            conn.on_ack(newly_acked, rtt_sample)
            self._timer_deadline = now + conn.timer_interval_us()
            self._timer_backoff = 1
        self._detect_threshold_losses(ack.largest_pn)
        self._advance_lowest()
        if self.acked.covers(0, self.file_size):
            self._finish(now)
            return
        self.try_send()

    def _detect_threshold_losses(self, largest_pn: int) -> None:
        threshold = largest_pn - PACKET_LOSS_THRESHOLD
        pn = max(self.lowest_live, self._lost_scan_pn)
        if threshold < pn:
            return
        lost_bytes = 0
        newest_lost_sent = -1
        while pn <= threshold:
            rec = self.sent.get(pn)
            if rec is not None and rec.state == _OUT:
                rec.state = _LOST
                self.conn.bytes_in_flight -= rec.length
                lost_bytes += rec.length
                self.retx.append((rec.offset, rec.length))
                if rec.sent_us > newest_lost_sent:
                    newest_lost_sent = rec.sent_us
            pn += 1
        self._lost_scan_pn = threshold + 1
        if lost_bytes > 0 and newest_lost_sent > self.recovery_start_us:
            self.conn.on_loss_detected(lost_bytes)
            self.recovery_start_us = self.sim.clock.now_us

    def _advance_lowest(self) -> None:
        sent = self.sent
        pn = self.lowest_live
        end = self.conn.next_seq
        while pn < end:
            rec = sent.get(pn)
            if rec is None:
                pn += 1
                continue
            if rec.state == _OUT:
                break
            del sent[pn]
            pn += 1
        self.lowest_live = pn

    # -- retransmission timer ---------------------------------------------

    def _push_timer(self, now: int) -> None:
        deadline = now + self.conn.timer_interval_us() * self._timer_backoff
        if deadline > self._timer_deadline:
            self._timer_deadline = deadline
        if self._timer_handle is None:
            self._timer_handle = self.sim.schedule_at(self._timer_deadline, self._on_timer)

    def _on_timer(self) -> None:
        self._timer_handle = None
        if self.complete:
            return
        now = self.sim.clock.now_us
        if now < self._timer_deadline:
            self._timer_handle = self.sim.schedule_at(self._timer_deadline, self._on_timer)
            return
        oldest = None
        pn = self.lowest_live
        while pn < self.conn.next_seq:
            rec = self.sent.get(pn)
            if rec is not None and rec.state == _OUT:
                oldest = rec
                break
            pn += 1
        if oldest is None:
            return
        oldest.state = _LOST
        self.conn.bytes_in_flight -= oldest.length
        self.retx.insert(0, (oldest.offset, oldest.length))
        self.conn.on_loss_detected(oldest.length)
        self.recovery_start_us = now
        self._timer_backoff *= 2
        self._timer_deadline = now + self.conn.timer_interval_us() * self._timer_backoff
        self._timer_handle = self.sim.schedule_at(self._timer_deadline, self._on_timer)
        self.try_send()

    def _finish(self, now: int) -> None:
        self.complete = True
        self.done_us = now
        self.conn.state = ConnState.CLOSED
        if self._timer_handle is not None:
            self._timer_handle.cancel()
            self._timer_handle = None
        if self._pace_handle is not None:
            self._pace_handle.cancel()
            self._pace_handle = None
        if self.on_complete is not None:
            self.on_complete()


class Receiver:
    """Client-side data sink: in-order exactly-once delivery, acks every packet."""

    __slots__ = (
        "sim", "flow_id", "link", "file_size",
        "pn_ranges", "byte_ranges", "delivered_prefix",
        "first_byte_us", "completion_us", "on_progress", "_pkt_id",
    )

    def __init__(self, sim: Simulation, flow_id: int, link: Link, file_size: int,
                 on_progress: Optional[Callable[[int, int], None]] = None) -> None:
        self.sim = sim
        self.flow_id = flow_id
        self.link = link
        self.file_size = file_size
        self.pn_ranges = RangeSet()
        self.byte_ranges = RangeSet()
        self.delivered_prefix = 0
        self.first_byte_us = -1
        self.completion_us = -1
        self.on_progress = on_progress
        self._pkt_id = 0

    def on_data(self, pkt: Packet) -> None:
        now = self.sim.clock.now_us
        self.pn_ranges.add(pkt.pn, pkt.pn + 1)
        if pkt.payload_bytes > 0:
            self.byte_ranges.add(pkt.offset, pkt.offset + pkt.payload_bytes)
            prefix = self.byte_ranges.prefix_end(0)
            if prefix > self.delivered_prefix:
                delta = prefix - self.delivered_prefix
                self.delivered_prefix = prefix
                if self.first_byte_us < 0:
                    self.first_byte_us = now
                if self.on_progress is not None:
                    self.on_progress(now, delta)
                if prefix >= self.file_size and self.completion_us < 0:
                    self.completion_us = now
        self._send_ack()

    def _send_ack(self) -> None:
        ranges = tuple(self.pn_ranges.tail(MAX_ACK_RANGES))
        ack = AckInfo(largest_pn=self.pn_ranges.max_end() - 1, ranges=ranges)
        pkt = Packet(
            id=self._pkt_id, flow_id=self.flow_id, kind=PacketKind.ACK,
            size_bytes=ACK_WIRE_BYTES, ack=ack,
        )
        self._pkt_id += 1
        self.link.offer(pkt)


class Host:
    """Per-endpoint packet dispatcher for links shared by several flows."""

    __slots__ = ("handlers",)

    def __init__(self) -> None:
        self.handlers: dict[int, Callable[[Packet], None]] = {}

    def register(self, flow_id: int, handler: Callable[[Packet], None]) -> None:
        self.handlers[flow_id] = handler

    def receive(self, pkt: Packet) -> None:
        handler = self.handlers.get(pkt.flow_id)
        if handler is not None:
            handler(pkt)


class Flow:
    """One client/server transfer across a forward and a return link.

    The caller decides the effective open mode up front: a resumption that
    was rejected or had no token runs as FRESH with fallback set, which keeps
    its packet trace identical to a genuinely fresh run.
    """

    def __init__(self, sim: Simulation, flow_id: int, *,
                 forward_link: Link, return_link: Link,
                 client_host: Host, server_host: Host,
                 mode: OpenMode, file_size: int,
                 handshake_rtts: int = 1,
                 algorithm: Algorithm = Algorithm.NEWRENO,
                 seed_cwnd_bytes: Optional[int] = None,
                 seed_srtt_us: Optional[int] = None,
                 fallback: bool = False,
                 on_progress: Optional[Callable[[int, int], None]] = None,
                 on_sender_complete: Optional[Callable[["Flow"], Optional[bytes]]] = None,
                 on_token: Optional[Callable[[bytes, int], None]] = None) -> None:
        if mode is OpenMode.RESUME_BDP and seed_cwnd_bytes is None:
            raise ValueError("RESUME_BDP requires seed parameters; "
                             "fall back to FRESH when no token is available")
        if handshake_rtts < 0:
            raise ValueError("handshake_rtts must be >= 0")
        self.sim = sim
        self.flow_id = flow_id
        self.forward_link = forward_link
        self.return_link = return_link
        self.mode = mode
        self.file_size = file_size
        self.handshake_rtts = handshake_rtts
        self.algorithm = algorithm
        self.seed_cwnd_bytes = seed_cwnd_bytes
        self.seed_srtt_us = seed_srtt_us
        self.fallback = fallback
        self.on_sender_complete = on_sender_complete
        self.on_token = on_token

        self.client_conn = Connection(mode, algorithm)
        self.client_conn.fallback = fallback
        self.server_conn: Optional[Connection] = None
        self.sender: Optional[Sender] = None
        self.receiver = Receiver(sim, flow_id, return_link, file_size, on_progress)

        self.start_us = -1
        self._hs_rounds_done = 0
        self._hs_sent_us = -1
        self._server_hs_sent_us = -1
        self._request_sent = False
        self._client_timer_handle = None
        self._client_timer_deadline = 0
        self._client_timer_backoff = 1
        self._ctl_pkt_id = 0

        client_host.register(flow_id, self._client_receive)
        server_host.register(flow_id, self._server_receive)

    # -- opening ----------------------------------------------------------

    def start(self, at_us: int) -> None:
        self.sim.schedule_at(at_us, self._open)

    def _open(self) -> None:
        now = self.sim.clock.now_us
        self.start_us = now
        self.client_conn.state = ConnState.HANDSHAKING
        self._send_client_handshake()
        if self.mode is not OpenMode.FRESH or self.handshake_rtts == 0:
            # application data rides the first flight
            self._send_request()
            self.client_conn.state = ConnState.ESTABLISHED

    def _ctl_packet(self, kind: PacketKind, size: int, blob: bytes = b"") -> Packet:
        pkt = Packet(id=self._ctl_pkt_id, flow_id=self.flow_id, kind=kind,
                     size_bytes=size, blob=blob)
        self._ctl_pkt_id += 1
        return pkt

    def _send_client_handshake(self) -> None:
        self._hs_sent_us = self.sim.clock.now_us
        self.return_link.offer(self._ctl_packet(PacketKind.HANDSHAKE, HANDSHAKE_WIRE_BYTES))
        self._arm_client_timer()

    def _send_request(self) -> None:
        self._request_sent = True
        pkt = Packet(id=self._ctl_pkt_id, flow_id=self.flow_id, kind=PacketKind.DATA,
                     size_bytes=REQUEST_PAYLOAD_BYTES + HEADER_BYTES,
                     payload_bytes=REQUEST_PAYLOAD_BYTES, pn=0)
        self._ctl_pkt_id += 1
        self.return_link.offer(pkt)
        self._arm_client_timer()

    # -- client side --------------------------------------------------------

    def _client_receive(self, pkt: Packet) -> None:
        now = self.sim.clock.now_us
        if pkt.kind is PacketKind.HANDSHAKE:
            if self._hs_sent_us >= 0:
                self.client_conn.on_rtt_sample(now - self._hs_sent_us)
                self._hs_sent_us = -1
            if self.mode is OpenMode.FRESH and not self._request_sent:
                self._hs_rounds_done += 1
                if self._hs_rounds_done < self.handshake_rtts:
                    self._send_client_handshake()
                else:
                    self.client_conn.state = ConnState.ESTABLISHED
                    self._send_request()
            else:
                self._disarm_client_timer()
        elif pkt.kind is PacketKind.DATA:
            self._disarm_client_timer()
            self.receiver.on_data(pkt)
        elif pkt.kind is PacketKind.TOKEN:
            if self.on_token is not None:
                self.on_token(pkt.blob, now)

    def _arm_client_timer(self) -> None:
        now = self.sim.clock.now_us
        srtt = self.client_conn.srtt_us
        interval = max(2 * srtt, INITIAL_TIMER_US) if srtt else INITIAL_TIMER_US
        self._client_timer_deadline = now + interval * self._client_timer_backoff
        if self._client_timer_handle is None:
            self._client_timer_handle = self.sim.schedule_at(
                self._client_timer_deadline, self._on_client_timer)

    def _disarm_client_timer(self) -> None:
        self._client_timer_deadline = 0
        if self._client_timer_handle is not None:
            self._client_timer_handle.cancel()
            self._client_timer_handle = None

    def _on_client_timer(self) -> None:
        self._client_timer_handle = None
        if self._client_timer_deadline == 0 or self.receiver.first_byte_us >= 0:
            return
        now = self.sim.clock.now_us
        if now < self._client_timer_deadline:
            self._client_timer_handle = self.sim.schedule_at(
                self._client_timer_deadline, self._on_client_timer)
            return
        # no response: replay the most recent control step
        self._client_timer_backoff *= 2
        if self._request_sent:
            self._send_request()
        else:
            self._send_client_handshake()

    # -- server side --------------------------------------------------------

    def _server_receive(self, pkt: Packet) -> None:
        now = self.sim.clock.now_us
        if pkt.kind is PacketKind.HANDSHAKE:
            self._server_hs_sent_us = now
            self.forward_link.offer(self._ctl_packet(PacketKind.HANDSHAKE,
                                                     HANDSHAKE_WIRE_BYTES))
        elif pkt.kind is PacketKind.DATA:
            if self.sender is None:
                self._establish_server(now)
        elif pkt.kind is PacketKind.ACK and self.sender is not None:
            self.sender.on_ack_packet(pkt.ack)

    def _establish_server(self, now: int) -> None:
        conn = Connection(self.mode, self.algorithm)
        conn.state = ConnState.HANDSHAKING
        conn.fallback = self.fallback
        if self.mode is OpenMode.FRESH and self._server_hs_sent_us >= 0:
            # the request acknowledges our last handshake flight
            conn.on_rtt_sample(now - self._server_hs_sent_us)
        if self.mode is OpenMode.RESUME_BDP:
            conn.apply_seed(self.seed_cwnd_bytes, self.seed_srtt_us)
        self.server_conn = conn
        self.sender = Sender(self.sim, self.flow_id, conn, self.forward_link,
                             self.file_size, on_complete=self._sender_done)
        self.sender.start()

    def _sender_done(self) -> None:
        self.client_conn.state = ConnState.CLOSED
        if self.on_sender_complete is not None:
            blob = self.on_sender_complete(self)
            if blob:
                size = min(HEADER_BYTES + len(blob), 1500)
                self.forward_link.offer(self._ctl_packet(PacketKind.TOKEN, size, blob))

    # -- results --------------------------------------------------------------

    @property
    def complete(self) -> bool:
        return self.sender is not None and self.sender.complete

    def result(self) -> TransferResult:
        status = TransferStatus.COMPLETE if self.complete else TransferStatus.TIMEOUT
        sender = self.sender
        conn = self.server_conn
        return TransferResult(
            flow_id=self.flow_id,
            file_size_bytes=self.file_size,
            start_us=self.start_us,
            first_byte_us=self.receiver.first_byte_us,
            completion_us=self.receiver.completion_us,
            retransmitted_bytes=sender.retransmitted_bytes if sender else 0,
            status=status,
            mode=self.mode,
            fallback=self.fallback,
            sender_done_us=sender.done_us if sender else -1,
            congestion_events=conn.congestion_events if conn else 0,
            delivered_bytes=self.receiver.delivered_prefix,
        )
