"""Deterministic transport simulator for 0-RTT resumption with congestion seeding."""

from .congestion import Algorithm, INITIAL_WINDOW_BYTES, MSS_BYTES
from .resumption import (
    BdpFrame,
    MalformedFrame,
    NoSampleError,
    SeedDecision,
    SeedOutcome,
    SeedPolicy,
    TokenMode,
    TokenRecord,
    TokenStore,
    TokenStoreError,
    capture_bdp,
    decode_frame,
    encode_frame,
    evaluate_seed,
    load_store,
    save_store,
    validate_and_seed,
)
from .scenarios import (
    ContentionResult,
    RunMetrics,
    ScenarioConfig,
    compute_utilization,
    run_contention,
    run_convergence_grid,
    run_mode_summary,
    run_resumption_comparison,
    run_transfer,
)
from .simnet import Link, LinkConfig, Packet, PacketKind, Simulation, bdp_packets
from .transport import (
    AckInfo,
    Connection,
    ConnState,
    Flow,
    OpenMode,
    TransferResult,
    TransferStatus,
)

__version__ = "0.1.0"
