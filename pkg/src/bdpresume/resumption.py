"""Saved path-characteristic tokens: capture, wire codec, storage, seeding.

A completed session's minimum RTT, congestion window and client address are
captured into a frame. On resumption the frame passes a safety pipeline
(expiry, address match, RTT plausibility) before the new connection's
congestion state is seeded from it; any failed check leaves the connection
behaving exactly as a fresh one.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from .congestion import INITIAL_WINDOW_BYTES, MIN_WINDOW_BYTES
from .transport import Connection, ConnState

FRAME_TYPE = 0x2A

IPAddress = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]


class ResumptionError(Exception):
    pass


class NoSampleError(ResumptionError):
    """Capture attempted before the connection measured anything."""


class MalformedFrame(ResumptionError):
    """Frame bytes rejected; offset points at the first violation."""

    def __init__(self, offset: int, reason: str) -> None:
        super().__init__(f"malformed frame at byte {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class TokenStoreError(ResumptionError):
    """Persistence failure; deliberately distinct from a missing record."""


# ---------------------------------------------------------------------------
# variable-length integers: 2-bit length prefix, 1/2/4/8-byte big-endian forms

_VARINT_MAX = (1 << 62) - 1


def encode_varint(value: int) -> bytes:
    if value < 0 or value > _VARINT_MAX:
        raise ValueError(f"varint out of range: {value}")
    if value < 1 << 6:
        return value.to_bytes(1, "big")
    if value < 1 << 14:
        return (value | (0b01 << 14)).to_bytes(2, "big")
    if value < 1 << 30:
        return (value | (0b10 << 30)).to_bytes(4, "big")
    return (value | (0b11 << 62)).to_bytes(8, "big")


def decode_varint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Decode one varint at offset; returns (value, next_offset).

    Only canonical (minimal-length) encodings are accepted, so any decoded
    frame re-encodes to exactly its input bytes.
    """
    if offset >= len(data):
        raise MalformedFrame(offset, "truncated varint")
    prefix = data[offset] >> 6
    length = 1 << prefix
    if offset + length > len(data):
        raise MalformedFrame(offset, "truncated varint")
    value = int.from_bytes(data[offset:offset + length], "big")
    value &= (1 << (8 * length - 2)) - 1
    if length > 1 and len(encode_varint(value)) != length:
        raise MalformedFrame(offset, "non-canonical varint")
    return value, offset + length


# ---------------------------------------------------------------------------
# frame


@dataclass(slots=True)
class BdpFrame:
    """Saved path characteristics from a completed session.

    issued_at_s is bookkeeping carried outside the wire image (the
    persistence layer stores it next to the frame bytes), so it does not
    participate in equality.
    """

    lifetime_s: int
    saved_capacity_bytes: int
    saved_min_rtt_us: int
    client_ip: IPAddress
    issued_at_s: float = field(default=0.0, compare=False)

    def __post_init__(self) -> None:
        if isinstance(self.client_ip, str):
            self.client_ip = ipaddress.ip_address(self.client_ip)
        if self.lifetime_s < 0:
            raise ValueError("lifetime_s must be >= 0")
        if self.saved_capacity_bytes < MIN_WINDOW_BYTES:
            raise ValueError(f"saved_capacity_bytes must be >= {MIN_WINDOW_BYTES}")
        if self.saved_min_rtt_us <= 0:
            raise ValueError("saved_min_rtt_us must be > 0")

    def expired(self, now_s: float, margin_s: float = 0.0) -> bool:
        return now_s > self.issued_at_s + self.lifetime_s - margin_s


def encode_frame(frame: BdpFrame) -> bytes:
    """[type][lifetime][capacity][min rtt][ip version byte][ip bytes]."""
    ip = frame.client_ip
    out = bytearray()
    out += encode_varint(FRAME_TYPE)
    out += encode_varint(frame.lifetime_s)
    out += encode_varint(frame.saved_capacity_bytes)
    out += encode_varint(frame.saved_min_rtt_us)
    out.append(ip.version)
    out += ip.packed
    return bytes(out)


def decode_frame(data: bytes) -> BdpFrame:
    """Inverse of encode_frame; raises MalformedFrame on any violation."""
    frame_type, off = decode_varint(data, 0)
    if frame_type != FRAME_TYPE:
        raise MalformedFrame(0, f"unknown frame type {frame_type:#x}")
    lifetime, off = decode_varint(data, off)
    capacity_off = off
    capacity, off = decode_varint(data, off)
    rtt_off = off
    min_rtt, off = decode_varint(data, off)
    if capacity == 0:
        raise MalformedFrame(capacity_off, "zero saved capacity")
    if min_rtt == 0:
        raise MalformedFrame(rtt_off, "zero saved rtt")
    if off >= len(data):
        raise MalformedFrame(off, "missing ip version")
    version = data[off]
    off += 1
    if version == 4:
        ip_len = 4
    elif version == 6:
        ip_len = 16
    else:
        raise MalformedFrame(off - 1, f"bad ip version {version}")
    if off + ip_len > len(data):
        raise MalformedFrame(off, "truncated ip")
    ip_bytes = data[off:off + ip_len]
    off += ip_len
    if off != len(data):
        raise MalformedFrame(off, "trailing bytes")
    if capacity < MIN_WINDOW_BYTES:
        raise MalformedFrame(capacity_off, "saved capacity below window floor")
    ip = ipaddress.ip_address(ip_bytes)
    return BdpFrame(lifetime_s=lifetime, saved_capacity_bytes=capacity,
                    saved_min_rtt_us=min_rtt, client_ip=ip)


# ---------------------------------------------------------------------------
# capture


def capture_bdp(conn: Connection, client_ip: IPAddress | str,
                now_s: float, lifetime_s: int = 600) -> BdpFrame:
    """Register the connection's observed path characteristics.

    Requires an established connection with at least one RTT measurement;
    the congestion window itself is recorded, not a rate estimate.
    """
    if conn.state is not ConnState.ESTABLISHED and conn.state is not ConnState.CLOSED:
        raise NoSampleError("connection not established")
    if conn.min_rtt_us == 0:
        raise NoSampleError("no RTT sample recorded")
    if isinstance(client_ip, str):
        client_ip = ipaddress.ip_address(client_ip)
    return BdpFrame(
        lifetime_s=lifetime_s,
        saved_capacity_bytes=max(conn.cwnd_bytes, MIN_WINDOW_BYTES),
        saved_min_rtt_us=conn.min_rtt_us,
        client_ip=client_ip,
        issued_at_s=now_s,
    )


# ---------------------------------------------------------------------------
# seeding policy and decision


class TokenMode(Enum):
    LOCAL_STORAGE = "local_storage"
    OPAQUE_TOKEN = "opaque_token"
    BDP_FRAME = "bdp_frame"


class SeedOutcome(Enum):
    SEEDED = "seeded"
    REJECTED_IP = "rejected_ip"
    REJECTED_EXPIRED = "rejected_expired"
    REJECTED_RTT_MISMATCH = "rejected_rtt_mismatch"
    REJECTED_MALFORMED = "rejected_malformed"


@dataclass(slots=True)
class SeedPolicy:
    """Safety checks governing reuse of saved parameters."""

    require_ip_match: bool = True
    rtt_tolerance_factor: float = 2.0
    capacity_cap_fraction: float = 0.5
    min_lifetime_remaining_s: float = 0.0
    pacing_required: bool = True

    def __post_init__(self) -> None:
        if self.rtt_tolerance_factor < 1.0:
            raise ValueError("rtt_tolerance_factor must be >= 1")
        if not 0.0 < self.capacity_cap_fraction <= 1.0:
            raise ValueError("capacity_cap_fraction must be in (0, 1]")


@dataclass(slots=True)
class SeedDecision:
    outcome: SeedOutcome
    seeded_cwnd_bytes: int = 0
    seeded_srtt_us: int = 0

    @property
    def seeded(self) -> bool:
        return self.outcome is SeedOutcome.SEEDED


@dataclass(slots=True)
class TokenRecord:
    """One stored resumption credential.

    LOCAL_STORAGE records live in the server-side store; the matching
    client-side entry is a bare session stub with frame=None. OPAQUE_TOKEN
    records carry bytes the client never interprets; BDP_FRAME records are
    client-readable.
    """

    server_name: str
    mode: TokenMode
    frame: Optional[BdpFrame]
    opaque_bytes: bytes = b""
    client_ip: Optional[IPAddress] = None
    issued_at_s: float = 0.0

    def __post_init__(self) -> None:
        if isinstance(self.client_ip, str):
            self.client_ip = ipaddress.ip_address(self.client_ip)
        if self.client_ip is None and self.frame is not None:
            self.client_ip = self.frame.client_ip

    def expired(self, now_s: float, margin_s: float = 0.0) -> bool:
        if self.frame is not None:
            return self.frame.expired(now_s, margin_s)
        if self.opaque_bytes:
            try:
                frame = decode_frame(self.opaque_bytes)
            except MalformedFrame:
                return False  # judged by the server at validation time
            frame.issued_at_s = self.issued_at_s
            return frame.expired(now_s, margin_s)
        return False


def evaluate_seed(record: Optional[TokenRecord],
                  observed_client_ip: IPAddress | str,
                  policy: SeedPolicy, handshake_rtt_us: int,
                  now_s: float) -> SeedDecision:
    """Run the safety pipeline on a stored record without touching any state.

    Checks apply in order: expiry, address equality, RTT plausibility.
    The seeded window is the capped saved capacity, never below the initial
    window nor above the saved capacity itself.
    """
    if isinstance(observed_client_ip, str):
        observed_client_ip = ipaddress.ip_address(observed_client_ip)

    frame = record.frame if record is not None else None
    if frame is None and record is not None and record.opaque_bytes:
        try:
            frame = decode_frame(record.opaque_bytes)
            frame.issued_at_s = record.issued_at_s
        except MalformedFrame:
            return SeedDecision(SeedOutcome.REJECTED_MALFORMED)
    if frame is None:
        return SeedDecision(SeedOutcome.REJECTED_MALFORMED)

    if frame.expired(now_s, policy.min_lifetime_remaining_s):
        return SeedDecision(SeedOutcome.REJECTED_EXPIRED)
    if policy.require_ip_match and frame.client_ip != observed_client_ip:
        return SeedDecision(SeedOutcome.REJECTED_IP)
    low = frame.saved_min_rtt_us / policy.rtt_tolerance_factor
    high = frame.saved_min_rtt_us * policy.rtt_tolerance_factor
    if not low <= handshake_rtt_us <= high:
        return SeedDecision(SeedOutcome.REJECTED_RTT_MISMATCH)

    cwnd = int(policy.capacity_cap_fraction * frame.saved_capacity_bytes)
    cwnd = max(cwnd, INITIAL_WINDOW_BYTES)
    cwnd = min(cwnd, frame.saved_capacity_bytes)
    return SeedDecision(SeedOutcome.SEEDED, seeded_cwnd_bytes=cwnd,
                        seeded_srtt_us=frame.saved_min_rtt_us)


def validate_and_seed(conn: Connection, record: Optional[TokenRecord],
                      observed_client_ip: IPAddress | str,
                      policy: SeedPolicy, handshake_rtt_us: int,
                      now_s: float) -> SeedDecision:
    """Evaluate the safety pipeline and, on success, seed the connection.

    Any rejection leaves the connection untouched, so it proceeds exactly
    as a fresh one.
    """
    decision = evaluate_seed(record, observed_client_ip, policy,
                             handshake_rtt_us, now_s)
    if decision.seeded:
        conn.apply_seed(decision.seeded_cwnd_bytes, decision.seeded_srtt_us)
    return decision


# ---------------------------------------------------------------------------
# token store


class TokenStore:
    """Last-write-wins record store keyed by (server_name, client_ip, mode)."""

    def __init__(self) -> None:
        self._records: dict[tuple[str, Optional[IPAddress], TokenMode], TokenRecord] = {}

    def put(self, server_name: str, record: TokenRecord) -> None:
        record.server_name = server_name
        self._records[(server_name, record.client_ip, record.mode)] = record

    def get(self, server_name: str, client_ip: IPAddress | str, now_s: float,
            mode: Optional[TokenMode] = None) -> Optional[TokenRecord]:
        """Most recently stored live record for the key, or None.

        Absent and expired records are indistinguishable to the caller;
        storage faults raise TokenStoreError instead.
        """
        if isinstance(client_ip, str):
            client_ip = ipaddress.ip_address(client_ip)
        best = None
        for (name, ip, rec_mode), record in self._records.items():
            if name != server_name or ip != client_ip:
                continue
            if mode is not None and rec_mode is not mode:
                continue
            if record.expired(now_s):
                continue
            if best is None or record.issued_at_s >= best.issued_at_s:
                best = record
        return best

    def __len__(self) -> int:
        return len(self._records)


def save_store(store: TokenStore, path: str) -> None:
    """One record per line: server, mode, issued_at, hex frame bytes (tab-separated)."""
    lines = []
    for record in store._records.values():
        if record.frame is not None:
            blob = encode_frame(record.frame)
        else:
            blob = record.opaque_bytes
        lines.append("\t".join([
            record.server_name,
            record.mode.value,
            repr(record.issued_at_s),
            blob.hex(),
        ]))
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
    except OSError as exc:
        raise TokenStoreError(f"cannot write token store {path}: {exc}") from exc


def load_store(path: str) -> TokenStore:
    store = TokenStore()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            content = fh.read()
    except OSError as exc:
        raise TokenStoreError(f"cannot read token store {path}: {exc}") from exc
    for lineno, line in enumerate(content.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise TokenStoreError(f"{path}:{lineno}: expected 4 tab-separated fields")
        server_name, mode_text, issued_text, hex_blob = parts
        try:
            mode = TokenMode(mode_text)
            issued_at = float(issued_text)
            blob = bytes.fromhex(hex_blob)
        except ValueError as exc:
            raise TokenStoreError(f"{path}:{lineno}: {exc}") from exc
        if not blob:
            # session stub: resumable, but path data lives server-side
            record = TokenRecord(server_name, mode, None, issued_at_s=issued_at)
        elif mode is TokenMode.OPAQUE_TOKEN:
            record = TokenRecord(server_name, mode, None, opaque_bytes=blob,
                                 issued_at_s=issued_at)
            try:
                record.client_ip = decode_frame(blob).client_ip
            except MalformedFrame:
                pass
        else:
            try:
                frame = decode_frame(blob)
            except MalformedFrame as exc:
                raise TokenStoreError(f"{path}:{lineno}: {exc}") from exc
            frame.issued_at_s = issued_at
            record = TokenRecord(server_name, mode, frame, issued_at_s=issued_at)
        store.put(server_name, record)
    return store
