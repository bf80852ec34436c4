"""Experiment runners: convergence grid, resumption comparison, contention.

Each run builds an isolated simulation from a ScenarioConfig, so runs are
reproducible per (config, seed) and independent runs can be compared
packet-for-packet.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from .congestion import Algorithm
from .resumption import (
    SeedDecision,
    SeedOutcome,
    SeedPolicy,
    TokenMode,
    TokenRecord,
    TokenStore,
    capture_bdp,
    decode_frame,
    encode_frame,
    evaluate_seed,
)
from .simnet import (
    Link,
    LinkConfig,
    Simulation,
    TraceLog,
    US_PER_S,
    bdp_packets,
)
from .transport import (
    Flow,
    Host,
    OpenMode,
    TransferResult,
    TransferStatus,
)

DEFAULT_FORWARD_RATE_BPS = 50_000_000
DEFAULT_RETURN_RATE_BPS = 10_000_000
DEFAULT_RTT_US = 500_000

GRID_RTTS_US = [100_000, 200_000, 300_000, 400_000, 500_000]
GRID_RATE_PAIRS_BPS = [
    (1_000_000, 100_000),
    (10_000_000, 2_000_000),
    (50_000_000, 25_000_000),
    (200_000_000, 100_000_000),
]
GRID_SIZES_BYTES = [500_000, 1_000_000, 10_000_000, 100_000_000]

CONTENTION_PRIME_AT_S = 0
CONTENTION_COMPETITOR_AT_S = 45
CONTENTION_RESUME_AT_S = 60
CONTENTION_HORIZON_S = 120


class ScenarioError(Exception):
    pass


@dataclass
class ScenarioConfig:
    forward_rate_bps: int = DEFAULT_FORWARD_RATE_BPS
    return_rate_bps: int = DEFAULT_RETURN_RATE_BPS
    rtt_us: int = DEFAULT_RTT_US
    forward_queue_pkts: Optional[int] = None    # None: bandwidth-delay product
    return_queue_pkts: Optional[int] = None
    file_size_bytes: int = 500_000
    prime_size_bytes: int = 100_000_000
    mode: OpenMode = OpenMode.FRESH
    token_mode: TokenMode = TokenMode.BDP_FRAME
    algorithm: Algorithm = Algorithm.NEWRENO
    seed: int = 0
    horizon_us: Optional[int] = None
    handshake_rtts: int = 1
    policy: SeedPolicy = field(default_factory=SeedPolicy)
    token_lifetime_s: int = 600
    client_ip: str = "198.51.100.10"
    observed_ip: Optional[str] = None           # None: same as client_ip
    server_name: str = "gw.sat.example"
    jitter_max_us: int = 0
    sample_interval_us: int = 100_000

    def __post_init__(self) -> None:
        if self.rtt_us <= 0:
            raise ScenarioError("rtt_us must be > 0")
        if self.file_size_bytes < 1:
            raise ScenarioError("file_size_bytes must be >= 1")
        if self.handshake_rtts < 0:
            raise ScenarioError("handshake_rtts must be >= 0")

    @property
    def observed_client_ip(self) -> str:
        return self.observed_ip if self.observed_ip is not None else self.client_ip

    def forward_link(self) -> LinkConfig:
        queue = self.forward_queue_pkts
        if queue is None:
            queue = bdp_packets(self.forward_rate_bps, self.rtt_us)
        return LinkConfig(self.forward_rate_bps, self.rtt_us // 2, queue,
                          jitter_max_us=self.jitter_max_us)

    def return_link(self) -> LinkConfig:
        queue = self.return_queue_pkts
        if queue is None:
            queue = bdp_packets(self.return_rate_bps, self.rtt_us)
        return LinkConfig(self.return_rate_bps, self.rtt_us // 2, queue,
                          jitter_max_us=self.jitter_max_us)

    def auto_horizon_us(self, size_bytes: Optional[int] = None) -> int:
        if self.horizon_us is not None:
            return self.horizon_us
        size = size_bytes if size_bytes is not None else self.file_size_bytes
        serialization = size * 8 * US_PER_S // self.forward_rate_bps
        return 8 * serialization + 50 * self.rtt_us + 30 * US_PER_S

    def handshake_rtt_estimate_us(self) -> int:
        """The RTT a resumed handshake measures on this path."""
        fwd, ret = self.forward_link(), self.return_link()
        return self.rtt_us + fwd.serialization_us(1200) + ret.serialization_us(1200)


@dataclass(slots=True)
class RateSeries:
    """Received-goodput time series at a fixed sampling interval."""

    interval_us: int
    bins: dict[int, int] = field(default_factory=dict)

    def on_progress(self, t_us: int, nbytes: int) -> None:
        idx = t_us // self.interval_us
        self.bins[idx] = self.bins.get(idx, 0) + nbytes

    def total_bytes(self) -> int:
        return sum(self.bins.values())

    def points(self, end_us: Optional[int] = None) -> list[tuple[float, float]]:
        if not self.bins and end_us is None:
            return []
        last = max(self.bins) if self.bins else 0
        if end_us is not None:
            last = max(last, (end_us - 1) // self.interval_us)
        scale = US_PER_S / self.interval_us
        return [
            (idx * self.interval_us / US_PER_S, self.bins.get(idx, 0) * 8 * scale)
            for idx in range(last + 1)
        ]

    def bytes_between(self, start_us: int, end_us: int) -> int:
        lo = start_us // self.interval_us
        hi = end_us // self.interval_us
        return sum(n for idx, n in self.bins.items() if lo <= idx < hi)


@dataclass(slots=True)
class RunMetrics:
    flow_id: int
    transfer_time_s: float
    goodput_bps: float
    utilization: float
    rate_series: list[tuple[float, float]]
    status: TransferStatus
    result: TransferResult
    seed_decision: Optional[SeedDecision] = None
    fallback: bool = False


def compute_utilization(result: TransferResult, bottleneck_bps: int) -> float:
    """Experienced goodput (size over download time) against the bottleneck rate."""
    if result.status is not TransferStatus.COMPLETE:
        raise ScenarioError("utilization requires a completed transfer")
    elapsed_s = (result.completion_us - result.start_us) / US_PER_S
    return (result.file_size_bytes * 8 / elapsed_s) / bottleneck_bps


class Network:
    """One simulation instance with its asymmetric link pair and endpoints."""

    def __init__(self, cfg: ScenarioConfig, seed: Optional[int] = None) -> None:
        self.cfg = cfg
        self.sim = Simulation(seed if seed is not None else cfg.seed)
        self.forward = Link(self.sim, cfg.forward_link(), "forward")
        self.reverse = Link(self.sim, cfg.return_link(), "return")
        self.client_host = Host()
        self.server_host = Host()
        self.forward.attach(self.client_host.receive)
        self.reverse.attach(self.server_host.receive)


@dataclass(slots=True)
class OpenPlan:
    """Resolved open parameters after token lookup and safety checks."""

    mode: OpenMode
    fallback: bool
    decision: Optional[SeedDecision]
    seed_cwnd_bytes: Optional[int] = None
    seed_srtt_us: Optional[int] = None


def resolve_open(cfg: ScenarioConfig, mode: OpenMode, now_s: float,
                 client_store: TokenStore, server_store: TokenStore) -> OpenPlan:
    """Decide how a connection opens before its first flight.

    Missing or expired tokens and any rejected safety check collapse the
    attempt to a fresh open, keeping the run indistinguishable from FRESH.
    """
    if mode is OpenMode.FRESH:
        return OpenPlan(OpenMode.FRESH, False, None)
    session = client_store.get(cfg.server_name, cfg.client_ip, now_s)
    if session is None:
        return OpenPlan(OpenMode.FRESH, True, None)
    if mode is OpenMode.RESUME_0RTT:
        return OpenPlan(OpenMode.RESUME_0RTT, False, None)

    if cfg.token_mode is TokenMode.LOCAL_STORAGE:
        record = server_store.get(cfg.server_name, cfg.observed_client_ip, now_s,
                                  TokenMode.LOCAL_STORAGE)
    else:
        record = client_store.get(cfg.server_name, cfg.client_ip, now_s,
                                  cfg.token_mode)
    if record is None:
        return OpenPlan(OpenMode.FRESH, True, None)
    decision = evaluate_seed(record, cfg.observed_client_ip, cfg.policy,
                             cfg.handshake_rtt_estimate_us(), now_s)
    if decision.seeded:
        return OpenPlan(OpenMode.RESUME_BDP, False, decision,
                        seed_cwnd_bytes=decision.seeded_cwnd_bytes,
                        seed_srtt_us=decision.seeded_srtt_us)
    return OpenPlan(OpenMode.FRESH, True, decision)


def _token_issuer(cfg: ScenarioConfig, net: Network,
                  client_store: TokenStore, server_store: TokenStore):
    """Capture the frame at transfer completion and store or ship it."""

    def on_sender_complete(flow: Flow) -> Optional[bytes]:
        now_s = net.sim.clock.now_s
        frame = capture_bdp(flow.server_conn, cfg.client_ip, now_s,
                            cfg.token_lifetime_s)
        if cfg.token_mode is TokenMode.LOCAL_STORAGE:
            server_store.put(cfg.server_name, TokenRecord(
                cfg.server_name, TokenMode.LOCAL_STORAGE, frame, issued_at_s=now_s))
            client_store.put(cfg.server_name, TokenRecord(
                cfg.server_name, TokenMode.LOCAL_STORAGE, None,
                client_ip=cfg.client_ip, issued_at_s=now_s))
            return None
        return encode_frame(frame)

    def on_token(blob: bytes, now_us: int) -> None:
        now_s = now_us / US_PER_S
        if cfg.token_mode is TokenMode.OPAQUE_TOKEN:
            record = TokenRecord(cfg.server_name, TokenMode.OPAQUE_TOKEN, None,
                                 opaque_bytes=blob, client_ip=cfg.client_ip,
                                 issued_at_s=now_s)
        else:
            frame = decode_frame(blob)
            frame.issued_at_s = now_s
            record = TokenRecord(cfg.server_name, TokenMode.BDP_FRAME, frame,
                                 issued_at_s=now_s)
        client_store.put(cfg.server_name, record)

    return on_sender_complete, on_token


def start_flow(net: Network, cfg: ScenarioConfig, flow_id: int, mode: OpenMode,
               file_size: int, at_us: int,
               client_store: TokenStore, server_store: TokenStore,
               issue_token: bool = False,
               series: Optional[RateSeries] = None) -> tuple[Flow, OpenPlan]:
    plan = resolve_open(cfg, mode, at_us / US_PER_S, client_store, server_store)
    on_complete = on_token = None
    if issue_token:
        on_complete, on_token = _token_issuer(cfg, net, client_store, server_store)
    flow = Flow(
        net.sim, flow_id,
        forward_link=net.forward, return_link=net.reverse,
        client_host=net.client_host, server_host=net.server_host,
        mode=plan.mode, file_size=file_size,
        handshake_rtts=cfg.handshake_rtts, algorithm=cfg.algorithm,
        seed_cwnd_bytes=plan.seed_cwnd_bytes, seed_srtt_us=plan.seed_srtt_us,
        fallback=plan.fallback,
        on_progress=series.on_progress if series is not None else None,
        on_sender_complete=on_complete, on_token=on_token,
    )
    flow.start(at_us)
    return flow, plan


@dataclass(slots=True)
class TransferOutcome:
    metrics: RunMetrics
    trace: Optional[TraceLog]
    plan: OpenPlan


def run_transfer(cfg: ScenarioConfig, mode: Optional[OpenMode] = None, *,
                 file_size: Optional[int] = None,
                 client_store: Optional[TokenStore] = None,
                 server_store: Optional[TokenStore] = None,
                 issue_token: bool = False,
                 traced: bool = False,
                 seed: Optional[int] = None) -> TransferOutcome:
    """Run one transfer in a fresh simulation and report its metrics."""
    mode = mode if mode is not None else cfg.mode
    size = file_size if file_size is not None else cfg.file_size_bytes
    client_store = client_store if client_store is not None else TokenStore()
    server_store = server_store if server_store is not None else TokenStore()
    net = Network(cfg, seed)
    if traced:
        net.sim.trace = TraceLog()
    series = RateSeries(cfg.sample_interval_us)
    flow, plan = start_flow(net, cfg, 1, mode, size, 0,
                            client_store, server_store,
                            issue_token=issue_token, series=series)
    net.sim.run_until(cfg.auto_horizon_us(size))
    result = flow.result()
    if result.status is TransferStatus.COMPLETE:
        utilization = compute_utilization(result, cfg.forward_rate_bps)
        goodput = utilization * cfg.forward_rate_bps
        elapsed = result.transfer_time_s
    else:
        utilization = 0.0
        goodput = 0.0
        elapsed = float("inf")
    metrics = RunMetrics(
        flow_id=flow.flow_id, transfer_time_s=elapsed, goodput_bps=goodput,
        utilization=utilization, rate_series=series.points(),
        status=result.status, result=result,
        seed_decision=plan.decision, fallback=plan.fallback,
    )
    return TransferOutcome(metrics=metrics, trace=net.sim.trace, plan=plan)


# ---------------------------------------------------------------------------
# experiment families


def run_convergence_grid(rtts_us: Optional[list[int]] = None,
                         rate_pairs_bps: Optional[list[tuple[int, int]]] = None,
                         sizes_bytes: Optional[list[int]] = None,
                         algorithm: Algorithm = Algorithm.NEWRENO,
                         seed: int = 0,
                         base: Optional[ScenarioConfig] = None,
                         ) -> dict[tuple[int, int, int], RunMetrics]:
    """Fresh-mode run per (rtt, forward rate, size) cell, in deterministic order."""
    rtts_us = rtts_us if rtts_us is not None else GRID_RTTS_US
    rate_pairs_bps = rate_pairs_bps if rate_pairs_bps is not None else GRID_RATE_PAIRS_BPS
    sizes_bytes = sizes_bytes if sizes_bytes is not None else GRID_SIZES_BYTES
    base = base if base is not None else ScenarioConfig()
    table: dict[tuple[int, int, int], RunMetrics] = {}
    for rtt_us in rtts_us:
        for fwd_bps, ret_bps in rate_pairs_bps:
            for size in sizes_bytes:
                cfg = replace(base, rtt_us=rtt_us, forward_rate_bps=fwd_bps,
                              return_rate_bps=ret_bps, file_size_bytes=size,
                              forward_queue_pkts=None, return_queue_pkts=None,
                              mode=OpenMode.FRESH, algorithm=algorithm, seed=seed)
                outcome = run_transfer(cfg, OpenMode.FRESH)
                table[(rtt_us, fwd_bps, size)] = outcome.metrics
    return table


def run_resumption_comparison(cfg: ScenarioConfig,
                              modes: tuple[OpenMode, ...] = (
                                  OpenMode.FRESH,
                                  OpenMode.RESUME_0RTT,
                                  OpenMode.RESUME_BDP,
                              ),
                              traced: bool = False,
                              ) -> dict[OpenMode, TransferOutcome]:
    """Prime the token store with a completed transfer, then compare modes."""
    client_store, server_store = TokenStore(), TokenStore()
    prime = run_transfer(cfg, OpenMode.FRESH, file_size=cfg.prime_size_bytes,
                         client_store=client_store, server_store=server_store,
                         issue_token=True)
    if prime.metrics.status is not TransferStatus.COMPLETE:
        raise ScenarioError("priming transfer did not complete within the horizon")
    if len(client_store) == 0:
        raise ScenarioError("priming transfer issued no token")
    out: dict[OpenMode, TransferOutcome] = {}
    for mode in modes:
        out[mode] = run_transfer(cfg, mode,
                                 client_store=client_store,
                                 server_store=server_store,
                                 traced=traced)
    return out


@dataclass(slots=True)
class ContentionResult:
    per_flow: dict[str, RunMetrics]
    resume_plan: OpenPlan
    competitor_goodput_bps: float       # over the resumed flow's window
    window_s: tuple[int, int]


def run_contention(cfg: ScenarioConfig, resume_mode: OpenMode,
                   competitor_size_bytes: int = 2_000_000_000) -> ContentionResult:
    """Prime at t=0, long-lived competitor at t=45 s, resumed flow at t=60 s."""
    client_store, server_store = TokenStore(), TokenStore()
    net = Network(cfg)
    series = {name: RateSeries(cfg.sample_interval_us)
              for name in ("prime", "competitor", "resumed")}
    horizon_us = CONTENTION_HORIZON_S * US_PER_S

    prime_flow, _ = start_flow(
        net, cfg, 1, OpenMode.FRESH, cfg.prime_size_bytes,
        CONTENTION_PRIME_AT_S * US_PER_S, client_store, server_store,
        issue_token=True, series=series["prime"])

    competitor_flow, _ = start_flow(
        net, cfg, 2, OpenMode.FRESH, competitor_size_bytes,
        CONTENTION_COMPETITOR_AT_S * US_PER_S, client_store, server_store,
        series=series["competitor"])

    # the resumed flow's token lookup happens at its own start time, once the
    # priming session has finished and stored its token
    resumed_box: dict[str, object] = {}

    def open_resumed() -> None:
        flow, plan = start_flow(
            net, cfg, 3, resume_mode, cfg.file_size_bytes,
            net.sim.clock.now_us, client_store, server_store,
            series=series["resumed"])
        resumed_box["flow"] = flow
        resumed_box["plan"] = plan

    net.sim.schedule_at(CONTENTION_RESUME_AT_S * US_PER_S, open_resumed)
    net.sim.run_until(horizon_us)

    flows = {"prime": prime_flow, "competitor": competitor_flow,
             "resumed": resumed_box["flow"]}
    per_flow: dict[str, RunMetrics] = {}
    for name, flow in flows.items():
        result = flow.result()
        complete = result.status is TransferStatus.COMPLETE
        per_flow[name] = RunMetrics(
            flow_id=flow.flow_id,
            transfer_time_s=result.transfer_time_s if complete else float("inf"),
            goodput_bps=(result.delivered_bytes * 8
                         / max(result.transfer_time_s, 1e-9) if complete else 0.0),
            utilization=(compute_utilization(result, cfg.forward_rate_bps)
                         if complete else 0.0),
            rate_series=series[name].points(horizon_us),
            status=result.status, result=result,
        )
    window = (CONTENTION_RESUME_AT_S, CONTENTION_HORIZON_S)
    comp_bytes = series["competitor"].bytes_between(window[0] * US_PER_S,
                                                    window[1] * US_PER_S)
    goodput = comp_bytes * 8 / (window[1] - window[0])
    return ContentionResult(
        per_flow=per_flow,
        resume_plan=resumed_box["plan"],
        competitor_goodput_bps=goodput,
        window_s=window,
    )


def run_mode_summary(cfg: ScenarioConfig, reps: int,
                     modes: tuple[OpenMode, ...] = (
                         OpenMode.FRESH,
                         OpenMode.RESUME_0RTT,
                         OpenMode.RESUME_BDP,
                     )) -> dict[OpenMode, list[float]]:
    """Transfer times per mode over seeded repetitions (one prime per seed)."""
    times: dict[OpenMode, list[float]] = {mode: [] for mode in modes}
    for rep in range(reps):
        rep_cfg = replace(cfg, seed=cfg.seed + rep)
        outcomes = run_resumption_comparison(rep_cfg, modes=modes)
        for mode in modes:
            metrics = outcomes[mode].metrics
            if metrics.status is not TransferStatus.COMPLETE:
                raise ScenarioError(f"{mode.value} repetition {rep} timed out")
            times[mode].append(metrics.transfer_time_s)
    return times


def summarize(times: dict[OpenMode, list[float]]) -> list[tuple[str, float, float, float]]:
    """Rows of (mode, min, avg, max) transfer seconds, in mode order."""
    rows = []
    for mode, values in times.items():
        rows.append((mode.value, min(values), sum(values) / len(values), max(values)))
    return rows
