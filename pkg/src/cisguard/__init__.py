"""Insider-tamper detection for replicated clusters.

Each node profiles the assembly listing of a scheduled process into its
control-instruction sequences, hashes them into a combined fingerprint, and
the node holding the primary copy checks that every replica computed the
same fingerprint. Fingerprints travel encrypted over a channel whose keys
rotate on a fixed period. A deterministic simulator drives whole clusters
for experiments and regression tests.
"""

from .channel import (
    ChannelConfig,
    ChannelError,
    Envelope,
    KeyEpochState,
    KeyPair,
    MsgType,
    decode_envelope,
    encode_envelope,
)
from .cis import (
    CfiStats,
    CisProfile,
    ControlClass,
    Fingerprint,
    Instruction,
    MalformedLine,
    Program,
    cfi_stats,
    classify_mnemonic,
    extract_cis,
    fingerprint,
    hash_sequence,
    parse_assembly,
    profile_listing,
)
from .protocol import (
    AlertEvent,
    Confirmation,
    ConsensusState,
    Outcome,
    Verdict,
    finalize,
    make_offer,
    record_confirmation,
    worker_match,
)
from .sim import (
    Cluster,
    ClusterConfig,
    LatencyModel,
    MetricsBundle,
    ProcessMetrics,
    ProcessResult,
    Scenario,
    ScheduledProcess,
    TamperPatch,
    build_cluster,
    load_scenario,
    run_scenario,
)

__version__ = "0.1.0"
