"""Congestion controllers behind one interface: NewReno and a reduced BBR.

NewReno is the deterministic baseline the acceptance oracles check against;
the BBR variant (startup gain 2.77, drain, steady pacing at the estimated
bottleneck rate) exists for qualitative comparison behind the same hooks.
"""

from __future__ import annotations

from enum import Enum

MSS_BYTES = 1460
INITIAL_WINDOW_BYTES = 10 * MSS_BYTES
MIN_WINDOW_BYTES = 2 * MSS_BYTES
SSTHRESH_INFINITE = 1 << 62

# pre-sample pacing sentinel: effectively unpaced until an RTT sample exists
UNPACED_RATE_BPS = 10**12


class Algorithm(Enum):
    NEWRENO = "newreno"
    BBR_LITE = "bbr_lite"


class NewReno:
    """Slow start by acked bytes, avoidance at one MSS per window, halve on loss."""

    algorithm = Algorithm.NEWRENO

    def __init__(self) -> None:
        # byte accumulator so avoidance growth never rounds to zero at large cwnd
        self._avoidance_acc = 0

    def record_delivery_sample(self, bps: int) -> None:
        pass  # loss-driven; delivery-rate estimates unused

    def on_ack(self, conn, acked_bytes: int) -> None:
        if conn.cwnd_bytes < conn.ssthresh_bytes:
            grown = min(acked_bytes, conn.ssthresh_bytes - conn.cwnd_bytes)
            conn.cwnd_bytes += grown
            acked_bytes -= grown
        if acked_bytes > 0 and conn.cwnd_bytes >= conn.ssthresh_bytes:
            self._avoidance_acc += acked_bytes
            while self._avoidance_acc >= conn.cwnd_bytes:
                self._avoidance_acc -= conn.cwnd_bytes
                conn.cwnd_bytes += MSS_BYTES

    def on_congestion_event(self, conn) -> None:
        conn.ssthresh_bytes = max(conn.cwnd_bytes // 2, MIN_WINDOW_BYTES)
        conn.cwnd_bytes = conn.ssthresh_bytes
        self._avoidance_acc = 0

    def in_startup(self, conn) -> bool:
        return conn.cwnd_bytes < conn.ssthresh_bytes

    def pacing_rate_bps(self, conn) -> int:
        if conn.srtt_us <= 0:
            return UNPACED_RATE_BPS
        rate = conn.cwnd_bytes * 8 * 1_000_000 // conn.srtt_us
        if self.in_startup(conn):
            rate = rate * 5 // 4
        return max(rate, 8 * MSS_BYTES)

    def on_seed(self, conn) -> None:
        # jump lands directly in avoidance: probing resumes linearly from the seed
        conn.ssthresh_bytes = conn.cwnd_bytes
        self._avoidance_acc = 0


class _BbrState(Enum):
    STARTUP = "startup"
    DRAIN = "drain"
    STEADY = "steady"


class BbrLite:
    """Reduced bandwidth-probing controller.

    Startup paces at 2.77x the delivery-rate estimate until the estimate
    plateaus (three rounds without 25 % growth), drains the queue it built,
    then paces steadily at the estimated bottleneck rate with the window
    capped at twice the estimated pipe volume.
    """

    algorithm = Algorithm.BBR_LITE

    STARTUP_GAIN = 2.77
    PLATEAU_ROUNDS = 3
    BW_WINDOW_ROUNDS = 10
    # delivery rates are measured on payload bytes; scale pacing back to wire
    WIRE_SCALE_NUM = 1500
    WIRE_SCALE_DEN = MSS_BYTES

    def __init__(self) -> None:
        self.state = _BbrState.STARTUP
        self._round_maxes: list[list[int]] = []  # [round, max payload bps], one per round
        self._round = 0
        self._round_target = 0
        self._delivered = 0
        self._full_bw = 0
        self._plateau_count = 0

    # -- bandwidth filter: one slot per round, windowed over recent rounds ----

    def _max_bw(self) -> int:
        if not self._round_maxes:
            return 0
        return max(entry[1] for entry in self._round_maxes)

    def record_delivery_sample(self, bps: int) -> None:
        if bps <= 0:
            return
        slots = self._round_maxes
        if slots and slots[-1][0] == self._round:
            if bps > slots[-1][1]:
                slots[-1][1] = bps
        else:
            slots.append([self._round, bps])
            floor = self._round - self.BW_WINDOW_ROUNDS
            while slots and slots[0][0] < floor:
                slots.pop(0)

    def _pipe_bytes(self, conn) -> int:
        bw = self._max_bw()
        if bw <= 0 or conn.min_rtt_us <= 0:
            return INITIAL_WINDOW_BYTES
        return max(MIN_WINDOW_BYTES, bw * conn.min_rtt_us // (8 * 1_000_000))

    def _round_tick(self, conn) -> None:
        self._round += 1
        # next round spans one window of data as it stood at this round's start
        self._round_target = self._delivered + max(conn.bytes_in_flight, MSS_BYTES)
        bw = self._max_bw()
        if self.state is _BbrState.STARTUP and bw > 0:
            if bw >= self._full_bw + self._full_bw // 4:
                self._full_bw = bw
                self._plateau_count = 0
            else:
                self._plateau_count += 1
                if self._plateau_count >= self.PLATEAU_ROUNDS:
                    self.state = _BbrState.DRAIN
        elif self.state is _BbrState.DRAIN:
            if conn.bytes_in_flight <= self._pipe_bytes(conn):
                self.state = _BbrState.STEADY

    # -- controller interface ----------------------------------------------

    def on_ack(self, conn, acked_bytes: int) -> None:
        self._delivered += acked_bytes
        if self._delivered >= self._round_target:
            self._round_tick(conn)
        if self.state is _BbrState.DRAIN and conn.bytes_in_flight <= self._pipe_bytes(conn):
            self.state = _BbrState.STEADY
        pipe = self._pipe_bytes(conn)
        if self.state is _BbrState.STARTUP:
            conn.cwnd_bytes = max(conn.cwnd_bytes + acked_bytes, 2 * pipe,
                                  INITIAL_WINDOW_BYTES)
        else:
            conn.cwnd_bytes = max(MIN_WINDOW_BYTES, 2 * pipe)

    def on_congestion_event(self, conn) -> None:
        if self.state is _BbrState.STARTUP:
            self.state = _BbrState.DRAIN
        conn.cwnd_bytes = max(self._pipe_bytes(conn), MIN_WINDOW_BYTES)
        conn.ssthresh_bytes = conn.cwnd_bytes

    def in_startup(self, conn) -> bool:
        return self.state is _BbrState.STARTUP

    def pacing_rate_bps(self, conn) -> int:
        bw = self._max_bw()
        if bw <= 0:
            if conn.srtt_us <= 0:
                return UNPACED_RATE_BPS
            bw = conn.cwnd_bytes * 8 * 1_000_000 // conn.srtt_us
        rate = bw * self.WIRE_SCALE_NUM // self.WIRE_SCALE_DEN
        if self.state is _BbrState.STARTUP:
            rate = int(rate * self.STARTUP_GAIN)
        elif self.state is _BbrState.DRAIN:
            rate = int(rate / self.STARTUP_GAIN)
        return max(rate, 8 * MSS_BYTES)

    def on_seed(self, conn) -> None:
        # trust the saved path estimate; skip startup probing entirely
        if conn.srtt_us > 0:
            bw = conn.cwnd_bytes * 8 * 1_000_000 // conn.srtt_us
            self.record_delivery_sample(bw)
            self._full_bw = bw
        self.state = _BbrState.STEADY
        conn.ssthresh_bytes = conn.cwnd_bytes


def make_controller(algorithm: Algorithm):
    if algorithm is Algorithm.NEWRENO:
        return NewReno()
    if algorithm is Algorithm.BBR_LITE:
        return BbrLite()
    raise ValueError(f"unknown algorithm {algorithm!r}")
