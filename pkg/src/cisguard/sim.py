"""Deterministic multi-node cluster simulator.

Wires profiling, the rotating-key channel and replica consensus together on a
virtual millisecond clock. Every run is a pure function of (config, scheduled
processes, patches): events sit in a priority queue keyed by (timestamp,
enqueue sequence), message latencies and all key material come from one
seeded generator, and nothing reads the wall clock except the detection-time
accumulators in the metrics.

Detection time per process is the measured wall-clock spent profiling,
encrypting, decrypting and matching on all involved nodes; virtual transport
latency is explicitly not part of it.
"""

from __future__ import annotations

import heapq
import json
import random
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from . import cis
from .channel import (
    ChannelConfig,
    ChannelError,
    Envelope,
    KeyEpochState,
    MsgType,
    NoKeyForPeer,
)
from .protocol import (
    AlertEvent,
    Confirmation,
    ConsensusState,
    DuplicateConfirmation,
    Outcome,
    UnexpectedWorker,
    Verdict,
    alert_payload,
    finalize,
    make_offer,
    pack_confirmation,
    record_confirmation,
    unpack_confirmation,
    worker_match,
)


class InvalidConfig(Exception):
    pass


class InvalidScenario(ValueError):
    pass


class UnknownNode(Exception):
    pass


class UnknownProcess(Exception):
    pass


class PositionOutOfRange(Exception):
    pass


class NoCompletedProcesses(Exception):
    pass


class TamperTooLate(Exception):
    """Patch arrived after the process was already scheduled."""


@dataclass(frozen=True)
class LatencyModel:
    """Fixed delay, or a uniform integer range drawn per message."""

    low_ms: int = 1
    high_ms: int | None = None

    def __post_init__(self) -> None:
        if self.low_ms < 0:
            raise InvalidConfig("latency cannot be negative")
        if self.high_ms is not None and self.high_ms < self.low_ms:
            raise InvalidConfig("latency range is inverted")

    @property
    def upper_ms(self) -> int:
        return self.high_ms if self.high_ms is not None else self.low_ms

    def draw(self, rng: random.Random) -> int:
        if self.high_ms is None:
            return self.low_ms
        return rng.randint(self.low_ms, self.high_ms)


@dataclass(frozen=True)
class ClusterConfig:
    node_count: int
    replication_factor: int
    rotation_period_ms: int = 1000
    key_history_depth: int = 3
    consensus_timeout_ms: int = 5000
    rng_seed: int = 0
    latency: LatencyModel = LatencyModel()
    include_operands: bool = False
    master_node: int | None = None


@dataclass(frozen=True)
class ScheduledProcess:
    process_id: str
    source_text: str
    primary_node: int
    replica_nodes: tuple[int, ...]
    exec_time_ms: int = 0
    start_ms: int = 0
    # (node_id, extra_ms) pairs for nodes whose profiling lags the start;
    # lets tests model a slow replica receiving an offer before its own
    # fingerprint exists
    profile_delays: tuple[tuple[int, int], ...] = ()

    def profile_delay_for(self, node_id: int) -> int:
        return dict(self.profile_delays).get(node_id, 0)


@dataclass(frozen=True)
class TamperPatch:
    target_node: int
    process_id: str
    insertions: tuple[tuple[int, str], ...] = ()
    deletions: tuple[int, ...] = ()


@dataclass(frozen=True)
class ProcessResult:
    process_id: str
    outcome: Outcome
    alert: AlertEvent | None


@dataclass(frozen=True)
class ProcessMetrics:
    process_id: str
    outcome: str
    time_execute: float
    time_detect: float
    overhead_percent: float | None
    cfi_count: int


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    r2: float


@dataclass(frozen=True)
class MetricsBundle:
    per_process: tuple[ProcessMetrics, ...]
    mean_overhead_percent: float | None
    overhead_percent_ratio_of_means: float | None
    fit: FitResult | None
    attack_count: int


@dataclass(frozen=True)
class PatchReceipt:
    """What apply_patch removed, plus the patched line count.

    The count disambiguates the empty serialization: "" is the join of both
    the empty line list and a single empty line.
    """

    removed: tuple[tuple[int, str], ...]
    patched_line_count: int


def apply_patch(
    text: str,
    insertions: tuple[tuple[int, str], ...],
    deletions: tuple[int, ...],
) -> tuple[str, PatchReceipt]:
    """Delete then insert lines; returns (patched text, receipt).

    Deletion positions index the original line list; insertion positions
    index the list after deletions. The receipt carries the removed lines in
    ascending original order so revert_patch can restore the exact input.
    """
    lines = text.split("\n")
    removed: list[tuple[int, str]] = []
    for pos in sorted(set(deletions), reverse=True):
        if not 0 <= pos < len(lines):
            raise PositionOutOfRange(f"deletion at {pos}, file has {len(lines)} lines")
        removed.append((pos, lines.pop(pos)))
    removed.reverse()
    for pos, line in insertions:
        if not 0 <= pos <= len(lines):
            raise PositionOutOfRange(f"insertion at {pos}, file has {len(lines)} lines")
        lines.insert(pos, line)
    return "\n".join(lines), PatchReceipt(tuple(removed), len(lines))


def revert_patch(
    text: str,
    insertions: tuple[tuple[int, str], ...],
    receipt: PatchReceipt,
) -> str:
    """Undo apply_patch given its receipt; byte-exact."""
    if text == "" and receipt.patched_line_count == 0:
        lines: list[str] = []
    else:
        lines = text.split("\n")
    if len(lines) != receipt.patched_line_count:
        raise ValueError(
            f"text has {len(lines)} lines, receipt says {receipt.patched_line_count}"
        )
    for pos, line in reversed(insertions):
        if pos >= len(lines) or lines[pos] != line:
            raise ValueError(f"text does not carry inserted line at {pos}")
        lines.pop(pos)
    for pos, line in receipt.removed:
        lines.insert(pos, line)
    return "\n".join(lines)


def call_and_return_patch(
    target_node: int,
    process_id: str,
    position: int = 0,
    calls: int = 3,
    returns: int = 1,
) -> TamperPatch:
    """A tiny injected routine: n call lines into a helper plus its returns."""
    insertions = []
    address = 0xF0000000
    for i in range(calls):
        insertions.append((position + i, f"0x{address + 4 * i:x}: call 0xf0001000"))
    for i in range(returns):
        insertions.append((position + calls + i, f"0x{address + 4 * (calls + i):x}: ret"))
    return TamperPatch(
        target_node=target_node,
        process_id=process_id,
        insertions=tuple(insertions),
        deletions=(),
    )


def least_squares_fit(xs: list[float], ys: list[float]) -> FitResult:
    """Ordinary least squares for y = slope * x + intercept, with R^2."""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("need at least two paired points")
    mean_x = statistics.fmean(xs)
    mean_y = statistics.fmean(ys)
    sxx = sum((x - mean_x) ** 2 for x in xs)
    if sxx == 0:
        raise ValueError("all x values identical; slope undefined")
    sxy = sum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys))
    slope = sxy / sxx
    intercept = mean_y - slope * mean_x
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    ss_tot = sum((y - mean_y) ** 2 for y in ys)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return FitResult(slope=slope, intercept=intercept, r2=r2)


class _Node:
    def __init__(self, node_id: int, channel: KeyEpochState):
        self.node_id = node_id
        self.channel = channel
        self.sources: dict[str, str] = {}
        self.fingerprints: dict[str, cis.Fingerprint] = {}
        self.parse_failed: set[str] = set()
        self.pending_offers: dict[str, bytes] = {}
        self.rotation_count = 0


class Cluster:
    """One simulated cluster; construct through build_cluster()."""

    def __init__(self, config: ClusterConfig):
        _validate_config(config)
        self.config = config
        self.now_ms = 0
        self.warnings: list[str] = []
        if config.replication_factor < 2:
            self.warnings.append("replication factor 1: no workers, detection is vacuous")

        self.rng = random.Random(config.rng_seed)
        self._events: list[tuple[int, int, str, tuple]] = []
        self._seq = 0
        self.event_log: list[str] = []

        self.nodes: dict[int, _Node] = {}
        all_ids = range(config.node_count)
        for node_id in all_ids:
            state = KeyEpochState(
                config=ChannelConfig(
                    node_id=node_id,
                    rotation_period_ms=config.rotation_period_ms,
                    key_history_depth=config.key_history_depth,
                ),
                peers=tuple(p for p in all_ids if p != node_id),
                rng=self.rng.randbytes,
            )
            self.nodes[node_id] = _Node(node_id, state)

        self.processes: dict[str, ScheduledProcess] = {}
        self.scheduled: set[str] = set()
        self.consensus: dict[str, ConsensusState] = {}
        self.process_stats: dict[str, cis.CfiStats] = {}
        self.results: dict[str, ProcessResult] = {}
        self._result_order: list[str] = []
        self._detect_s: dict[str, float] = {}

        # every ordered pair exchanges one key at time zero, then the timed
        # rotation schedule takes over
        for node_id in all_ids:
            for peer_id, env in self.nodes[node_id].channel.rotate(0):
                self.nodes[peer_id].channel.record_peer_key(
                    env.sender_id, env.payload, env.key_epoch
                )
                self._log(f"announce from={node_id} to={peer_id} epoch={env.key_epoch}")
        for node_id in all_ids:
            self._enqueue(config.rotation_period_ms, "rotate", (node_id,))

    # ------------------------------------------------------------------ api

    def add_process(self, sp: ScheduledProcess) -> None:
        """Register a process and hand every involved node its own copy."""
        if sp.process_id in self.processes:
            raise InvalidConfig(f"duplicate process id {sp.process_id!r}")
        involved = (sp.primary_node, *sp.replica_nodes)
        for node_id in involved:
            if node_id not in self.nodes:
                raise UnknownNode(f"node {node_id} not in cluster")
        if sp.primary_node in sp.replica_nodes:
            raise InvalidConfig("primary node cannot also be a replica")
        if len(set(sp.replica_nodes)) != len(sp.replica_nodes):
            raise InvalidConfig("replica nodes must be distinct")
        if len(sp.replica_nodes) != self.config.replication_factor - 1:
            raise InvalidConfig(
                f"process {sp.process_id!r} has {len(sp.replica_nodes)} replicas, "
                f"replication factor {self.config.replication_factor} needs "
                f"{self.config.replication_factor - 1}"
            )
        if sp.exec_time_ms < 0 or sp.start_ms < 0:
            raise InvalidConfig("times cannot be negative")
        for node_id, delay in sp.profile_delays:
            if node_id not in involved:
                raise InvalidConfig(f"profile delay for uninvolved node {node_id}")
            if delay < 0:
                raise InvalidConfig("profile delay cannot be negative")
        self.processes[sp.process_id] = sp
        for node_id in involved:
            self.nodes[node_id].sources[sp.process_id] = sp.source_text

    def inject_tamper(self, patch: TamperPatch) -> None:
        """Rewrite one node's copy of a not-yet-scheduled process."""
        if patch.target_node not in self.nodes:
            raise UnknownNode(f"node {patch.target_node} not in cluster")
        if patch.process_id not in self.processes:
            raise UnknownProcess(f"process {patch.process_id!r} not registered")
        node = self.nodes[patch.target_node]
        if patch.process_id not in node.sources:
            raise UnknownProcess(
                f"node {patch.target_node} holds no copy of {patch.process_id!r}"
            )
        if patch.process_id in self.scheduled:
            raise TamperTooLate(f"process {patch.process_id!r} already scheduled")
        patched, _receipt = apply_patch(
            node.sources[patch.process_id], patch.insertions, patch.deletions
        )
        node.sources[patch.process_id] = patched

    def schedule(self, process_id: str) -> None:
        """Queue profiling of every copy at the process start time."""
        sp = self.processes.get(process_id)
        if sp is None:
            raise UnknownProcess(f"process {process_id!r} not registered")
        if process_id in self.scheduled:
            raise InvalidConfig(f"process {process_id!r} already scheduled")
        self.scheduled.add(process_id)
        for node_id in sp.replica_nodes:
            self._enqueue(
                sp.start_ms + sp.profile_delay_for(node_id), "profile", (node_id, process_id)
            )
        self._enqueue(
            sp.start_ms + sp.profile_delay_for(sp.primary_node),
            "profile",
            (sp.primary_node, process_id),
        )

    def schedule_process(self, sp: ScheduledProcess) -> str:
        self.add_process(sp)
        self.schedule(sp.process_id)
        return sp.process_id

    def run_until_quiet(self, max_virtual_time_ms: int) -> list[ProcessResult]:
        """Drain events in (time, sequence) order up to the time horizon.

        Returns the results of every process resolved so far, in resolution
        order. Rotation events reschedule themselves, so the horizon is what
        stops the run.
        """
        while self._events and self._events[0][0] <= max_virtual_time_ms:
            t, _seq, kind, data = heapq.heappop(self._events)
            self.now_ms = t
            if kind == "rotate":
                self._on_rotate(*data, horizon_ms=max_virtual_time_ms)
            elif kind == "deliver":
                self._on_deliver(*data)
            elif kind == "profile":
                self._on_profile(*data)
            elif kind == "deadline":
                self._on_deadline(*data)
            elif kind == "worker_deadline":
                self._on_worker_deadline(*data)
        return [self.results[pid] for pid in self._result_order]

    def report_metrics(self) -> MetricsBundle:
        """Per-process metrics plus aggregate overheads and the scaling fit."""
        if not self.results:
            raise NoCompletedProcesses("no process has completed")
        per: list[ProcessMetrics] = []
        for pid in self._result_order:
            sp = self.processes[pid]
            result = self.results[pid]
            time_execute = sp.exec_time_ms / 1000.0
            time_detect = self._detect_s.get(pid, 0.0)
            overhead = 100.0 * time_detect / time_execute if time_execute > 0 else None
            stats = self.process_stats.get(pid)
            per.append(
                ProcessMetrics(
                    process_id=pid,
                    outcome=result.outcome.value,
                    time_execute=time_execute,
                    time_detect=time_detect,
                    overhead_percent=overhead,
                    cfi_count=stats.cfi_count if stats else 0,
                )
            )

        overheads = [m.overhead_percent for m in per if m.overhead_percent is not None]
        mean_overhead = statistics.fmean(overheads) if overheads else None
        mean_exec = statistics.fmean([m.time_execute for m in per])
        mean_detect = statistics.fmean([m.time_detect for m in per])
        ratio = 100.0 * mean_detect / mean_exec if mean_exec > 0 else None

        fit: FitResult | None
        try:
            fit = least_squares_fit(
                [float(m.cfi_count) for m in per], [m.time_detect for m in per]
            )
        except ValueError:
            fit = None

        return MetricsBundle(
            per_process=tuple(per),
            mean_overhead_percent=mean_overhead,
            overhead_percent_ratio_of_means=ratio,
            fit=fit,
            attack_count=sum(1 for m in per if m.outcome == Outcome.ATTACK.value),
        )

    @property
    def event_log_text(self) -> str:
        return "\n".join(self.event_log) + "\n"

    # ------------------------------------------------------------ internals

    def _log(self, message: str) -> None:
        self.event_log.append(f"{self.now_ms:>8} {message}")

    def _enqueue(self, at_ms: int, kind: str, data: tuple) -> None:
        heapq.heappush(self._events, (at_ms, self._seq, kind, data))
        self._seq += 1

    def _send(self, dest: int, env: Envelope) -> None:
        delay = self.config.latency.draw(self.rng)
        self._log(
            f"send type={env.msg_type.name} from={env.sender_id} to={dest} "
            f"pid={env.process_id} epoch={env.key_epoch} delay={delay}"
        )
        self._enqueue(self.now_ms + delay, "deliver", (dest, env))

    def _charge(self, process_id: str, started: float) -> None:
        self._detect_s[process_id] = (
            self._detect_s.get(process_id, 0.0) + time.perf_counter() - started
        )

    def _on_rotate(self, node_id: int, horizon_ms: int) -> None:
        node = self.nodes[node_id]
        node.rotation_count += 1
        self._log(f"rotate node={node_id} epoch={node.channel.epoch + 1}")
        for peer_id, env in node.channel.rotate(self.now_ms):
            self._send(peer_id, env)
        next_ms = self.now_ms + self.config.rotation_period_ms
        if next_ms <= horizon_ms:
            self._enqueue(next_ms, "rotate", (node_id,))

    def _on_profile(self, node_id: int, process_id: str) -> None:
        node = self.nodes[node_id]
        sp = self.processes[process_id]
        started = time.perf_counter()
        try:
            _program, _profile, fp, stats = cis.profile_listing(
                node.sources[process_id],
                process_id,
                include_operands=self.config.include_operands,
            )
        except cis.MalformedLine as exc:
            self._charge(process_id, started)
            node.parse_failed.add(process_id)
            self._log(f"parse-error node={node_id} pid={process_id} line={exc.line_no}")
            if node_id == sp.primary_node:
                # with no reference fingerprint no offers go out; the
                # deadline will close this as an attack with all workers
                # missing
                state = ConsensusState(
                    process_id=process_id,
                    coordinator_id=node_id,
                    expected_workers=frozenset(sp.replica_nodes),
                    deadline_ms=self.now_ms + self.config.consensus_timeout_ms,
                )
                self.consensus[process_id] = state
                self._enqueue(state.deadline_ms, "deadline", (process_id,))
            return

        node.fingerprints[process_id] = fp
        self._log(
            f"profile node={node_id} pid={process_id} cfi={stats.cfi_count} "
            f"fp={fp.combined_hex[:16]}"
        )

        if node_id == sp.primary_node:
            self.process_stats[process_id] = stats
            if not sp.replica_nodes:
                self._charge(process_id, started)
                self._record_result(process_id, Outcome.NO_ATTACK, None)
                return
            offers, state = make_offer(
                fp,
                set(sp.replica_nodes),
                node.channel,
                process_id,
                self.now_ms,
                self.config.consensus_timeout_ms,
            )
            self.consensus[process_id] = state
            self._charge(process_id, started)
            for replica, env in offers:
                self._send(replica, env)
            for replica in sorted(state.undeliverable):
                self._log(f"offer-skipped pid={process_id} to={replica} reason=no-key")
            self._enqueue(state.deadline_ms, "deadline", (process_id,))
        else:
            self._charge(process_id, started)
            payload = node.pending_offers.pop(process_id, None)
            if payload is not None:
                self._worker_answer(node, process_id, payload)

    def _worker_answer(self, node: _Node, process_id: str, payload: bytes) -> None:
        sp = self.processes[process_id]
        started = time.perf_counter()
        confirmation = worker_match(
            payload, node.fingerprints[process_id], node.node_id, process_id
        )
        self._log(
            f"match node={node.node_id} pid={process_id} verdict={confirmation.verdict.value}"
        )
        try:
            env = node.channel.encrypt_for(
                sp.primary_node,
                MsgType.CONFIRMATION,
                process_id,
                pack_confirmation(confirmation.verdict),
            )
        except NoKeyForPeer:
            self._charge(process_id, started)
            self._log(f"confirm-failed node={node.node_id} pid={process_id} reason=no-key")
            return
        self._charge(process_id, started)
        self._send(sp.primary_node, env)

    def _on_deliver(self, dest: int, env: Envelope) -> None:
        node = self.nodes[dest]
        if env.msg_type is MsgType.KEY_ANNOUNCE:
            node.channel.record_peer_key(env.sender_id, env.payload, env.key_epoch)
            self._log(f"announce from={env.sender_id} to={dest} epoch={env.key_epoch}")
            return

        if env.msg_type is MsgType.FINGERPRINT_OFFER:
            process_id = env.process_id
            started = time.perf_counter()
            try:
                payload = node.channel.decrypt(env)
            except ChannelError as exc:
                self._charge(process_id, started)
                self._log(
                    f"decrypt-error node={dest} pid={process_id} "
                    f"err={type(exc).__name__}"
                )
                return
            self._charge(process_id, started)
            if process_id in node.fingerprints:
                self._worker_answer(node, process_id, payload)
            else:
                # not profiled yet (or unprofilable); hold the offer and
                # answer unsafe at the worker-side deadline
                node.pending_offers[process_id] = payload
                self._log(f"offer-held node={dest} pid={process_id}")
                self._enqueue(
                    self.now_ms + self.config.consensus_timeout_ms,
                    "worker_deadline",
                    (dest, process_id),
                )
            return

        if env.msg_type is MsgType.CONFIRMATION:
            process_id = env.process_id
            state = self.consensus.get(process_id)
            if state is None:
                self._log(f"stray-confirmation node={dest} pid={process_id}")
                return
            started = time.perf_counter()
            try:
                payload = node.channel.decrypt(env)
                verdict = unpack_confirmation(payload)
            except (ChannelError, ValueError) as exc:
                self._charge(process_id, started)
                self._log(
                    f"decrypt-error node={dest} pid={process_id} err={type(exc).__name__}"
                )
                return
            if state.outcome is not Outcome.PENDING:
                self._charge(process_id, started)
                self._log(
                    f"late-confirmation pid={process_id} worker={env.sender_id} "
                    f"verdict={verdict.value}"
                )
                return
            confirmation = Confirmation(process_id, env.sender_id, verdict)
            try:
                record_confirmation(state, confirmation)
            except (UnexpectedWorker, DuplicateConfirmation) as exc:
                self._charge(process_id, started)
                self._log(f"confirmation-rejected pid={process_id} err={type(exc).__name__}")
                return
            self._log(
                f"confirm pid={process_id} worker={env.sender_id} verdict={verdict.value}"
            )
            if state.outcome is not Outcome.PENDING:
                outcome, alert = finalize(state, self.now_ms)
                self._charge(process_id, started)
                self._record_result(process_id, outcome, alert)
            else:
                self._charge(process_id, started)
            return

        if env.msg_type is MsgType.ALERT:
            try:
                node.channel.decrypt(env)
            except ChannelError as exc:
                self._log(
                    f"decrypt-error node={dest} pid={env.process_id} err={type(exc).__name__}"
                )
                return
            self._log(f"alert-received node={dest} pid={env.process_id}")
            return

    def _on_deadline(self, process_id: str) -> None:
        state = self.consensus.get(process_id)
        if state is None or process_id in self.results:
            return
        outcome, alert = finalize(state, self.now_ms)
        if outcome is Outcome.PENDING:
            return
        self._log(f"deadline pid={process_id}")
        self._record_result(process_id, outcome, alert)

    def _on_worker_deadline(self, node_id: int, process_id: str) -> None:
        node = self.nodes[node_id]
        if node.pending_offers.pop(process_id, None) is None:
            return
        sp = self.processes[process_id]
        started = time.perf_counter()
        self._log(f"worker-deadline node={node_id} pid={process_id} verdict=unsafe")
        try:
            env = node.channel.encrypt_for(
                sp.primary_node,
                MsgType.CONFIRMATION,
                process_id,
                pack_confirmation(Verdict.UNSAFE),
            )
        except NoKeyForPeer:
            self._charge(process_id, started)
            return
        self._charge(process_id, started)
        self._send(sp.primary_node, env)

    def _record_result(self, process_id: str, outcome: Outcome, alert: AlertEvent | None) -> None:
        self.results[process_id] = ProcessResult(process_id, outcome, alert)
        self._result_order.append(process_id)
        self._log(f"outcome pid={process_id} outcome={outcome.value}")
        if alert is not None:
            self._log(
                f"alert pid={process_id} unsafe={list(alert.unsafe_workers)} "
                f"missing={list(alert.missing_workers)}"
            )
            master = self.config.master_node
            if master is not None and master != alert.coordinator_id:
                coordinator = self.nodes[alert.coordinator_id]
                try:
                    env = coordinator.channel.encrypt_for(
                        master, MsgType.ALERT, process_id, alert_payload(alert)
                    )
                except NoKeyForPeer:
                    self._log(f"alert-send-failed pid={process_id} to={master}")
                    return
                self._send(master, env)


def _validate_config(config: ClusterConfig) -> None:
    if config.node_count < 1:
        raise InvalidConfig("node_count must be at least 1")
    if config.replication_factor < 1:
        raise InvalidConfig("replication_factor must be at least 1")
    if config.replication_factor > config.node_count:
        raise InvalidConfig(
            f"replication factor {config.replication_factor} exceeds "
            f"node count {config.node_count}"
        )
    if config.rotation_period_ms <= 0:
        raise InvalidConfig("rotation_period_ms must be positive")
    if config.key_history_depth < 1:
        raise InvalidConfig("key_history_depth must be at least 1")
    if config.consensus_timeout_ms <= 0:
        raise InvalidConfig("consensus_timeout_ms must be positive")
    if config.master_node is not None and not 0 <= config.master_node < config.node_count:
        raise InvalidConfig("master_node must be a cluster node")


def build_cluster(config: ClusterConfig) -> Cluster:
    """Create the nodes, run the time-zero key exchange, arm the rotations."""
    return Cluster(config)


# --------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class Scenario:
    config: ClusterConfig
    processes: tuple[ScheduledProcess, ...]
    patches: tuple[TamperPatch, ...]
    max_time_ms: int | None = None


def default_horizon_ms(scenario: Scenario) -> int:
    """A horizon that comfortably covers every deadline in the scenario."""
    last_start = max(
        (
            sp.start_ms + max((d for _n, d in sp.profile_delays), default=0)
            for sp in scenario.processes
        ),
        default=0,
    )
    cfg = scenario.config
    return (
        last_start
        + cfg.consensus_timeout_ms
        + 3 * cfg.latency.upper_ms
        + cfg.rotation_period_ms
        + 100
    )


def _require(mapping: dict, key: str, where: str) -> Any:
    if key not in mapping:
        raise InvalidScenario(f"{where}: missing required key {key!r}")
    return mapping[key]


def _check_keys(mapping: dict, allowed: set[str], where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise InvalidScenario(f"{where}: unknown keys {sorted(unknown)}")


def _parse_latency(raw: Any) -> LatencyModel:
    if not isinstance(raw, dict):
        raise InvalidScenario("config.latency must be an object")
    _check_keys(raw, {"fixed_ms", "uniform_ms"}, "config.latency")
    if "fixed_ms" in raw and "uniform_ms" in raw:
        raise InvalidScenario("config.latency: give fixed_ms or uniform_ms, not both")
    if "fixed_ms" in raw:
        return LatencyModel(low_ms=int(raw["fixed_ms"]))
    if "uniform_ms" in raw:
        lo, hi = raw["uniform_ms"]
        return LatencyModel(low_ms=int(lo), high_ms=int(hi))
    raise InvalidScenario("config.latency: give fixed_ms or uniform_ms")


_CONFIG_KEYS = {
    "node_count", "replication_factor", "rotation_period_ms", "key_history_depth",
    "consensus_timeout_ms", "rng_seed", "latency", "include_operands",
    "master_node", "max_time_ms",
}
_PROCESS_KEYS = {"process_id", "source", "primary", "replicas", "exec_time_ms", "start_ms"}
_PATCH_KEYS = {"node", "process_id", "insertions", "deletions"}


def load_scenario(path: str | Path) -> Scenario:
    """Load and validate a scenario JSON file.

    Process sources are either a path string (resolved relative to the
    scenario file) or an object {"text": "..."} with an inline listing.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise InvalidScenario(f"cannot read scenario {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidScenario("scenario root must be an object")
    _check_keys(raw, {"config", "processes", "patches"}, "scenario")

    raw_config = _require(raw, "config", "scenario")
    if not isinstance(raw_config, dict):
        raise InvalidScenario("config must be an object")
    _check_keys(raw_config, _CONFIG_KEYS, "config")
    try:
        config = ClusterConfig(
            node_count=int(_require(raw_config, "node_count", "config")),
            replication_factor=int(_require(raw_config, "replication_factor", "config")),
            rotation_period_ms=int(raw_config.get("rotation_period_ms", 1000)),
            key_history_depth=int(raw_config.get("key_history_depth", 3)),
            consensus_timeout_ms=int(raw_config.get("consensus_timeout_ms", 5000)),
            rng_seed=int(raw_config.get("rng_seed", 0)),
            latency=_parse_latency(raw_config.get("latency", {"fixed_ms": 1})),
            include_operands=bool(raw_config.get("include_operands", False)),
            master_node=(
                int(raw_config["master_node"])
                if raw_config.get("master_node") is not None
                else None
            ),
        )
    except (TypeError, ValueError) as exc:
        raise InvalidScenario(f"config: {exc}") from exc

    max_time_ms = raw_config.get("max_time_ms")
    if max_time_ms is not None:
        max_time_ms = int(max_time_ms)

    processes: list[ScheduledProcess] = []
    raw_processes = _require(raw, "processes", "scenario")
    if not isinstance(raw_processes, list):
        raise InvalidScenario("processes must be an array")
    for i, entry in enumerate(raw_processes):
        where = f"processes[{i}]"
        if not isinstance(entry, dict):
            raise InvalidScenario(f"{where}: must be an object")
        _check_keys(entry, _PROCESS_KEYS, where)
        source = _require(entry, "source", where)
        if isinstance(source, str):
            source_path = (path.parent / source).resolve()
            try:
                source_text = source_path.read_text("utf-8")
            except (OSError, UnicodeDecodeError) as exc:
                raise InvalidScenario(f"{where}: cannot read source {source_path}: {exc}") from exc
        elif isinstance(source, dict) and set(source) == {"text"}:
            source_text = str(source["text"])
        else:
            raise InvalidScenario(f'{where}: source must be a path or {{"text": ...}}')
        try:
            processes.append(
                ScheduledProcess(
                    process_id=str(_require(entry, "process_id", where)),
                    source_text=source_text,
                    primary_node=int(_require(entry, "primary", where)),
                    replica_nodes=tuple(int(r) for r in _require(entry, "replicas", where)),
                    exec_time_ms=int(entry.get("exec_time_ms", 0)),
                    start_ms=int(entry.get("start_ms", 0)),
                )
            )
        except (TypeError, ValueError) as exc:
            raise InvalidScenario(f"{where}: {exc}") from exc

    patches: list[TamperPatch] = []
    raw_patches = raw.get("patches", [])
    if not isinstance(raw_patches, list):
        raise InvalidScenario("patches must be an array")
    for i, entry in enumerate(raw_patches):
        where = f"patches[{i}]"
        if not isinstance(entry, dict):
            raise InvalidScenario(f"{where}: must be an object")
        _check_keys(entry, _PATCH_KEYS, where)
        try:
            insertions = tuple(
                (int(pos), str(line)) for pos, line in entry.get("insertions", [])
            )
            deletions = tuple(int(pos) for pos in entry.get("deletions", []))
            patches.append(
                TamperPatch(
                    target_node=int(_require(entry, "node", where)),
                    process_id=str(_require(entry, "process_id", where)),
                    insertions=insertions,
                    deletions=deletions,
                )
            )
        except (TypeError, ValueError) as exc:
            raise InvalidScenario(f"{where}: {exc}") from exc

    return Scenario(
        config=config,
        processes=tuple(processes),
        patches=tuple(patches),
        max_time_ms=max_time_ms,
    )


def run_scenario(scenario: Scenario, seed_override: int | None = None) -> Cluster:
    """Build, patch, schedule and run a scenario to its horizon."""
    config = scenario.config
    if seed_override is not None:
        config = replace(config, rng_seed=seed_override)
        scenario = replace(scenario, config=config)
    cluster = build_cluster(config)
    for sp in scenario.processes:
        cluster.add_process(sp)
    for patch in scenario.patches:
        cluster.inject_tamper(patch)
    for sp in scenario.processes:
        cluster.schedule(sp.process_id)
    horizon = scenario.max_time_ms if scenario.max_time_ms is not None else default_horizon_ms(scenario)
    cluster.run_until_quiet(horizon)
    return cluster


def write_report(bundle: MetricsBundle, include_timing: bool = True) -> str:
    """Render the metrics as JSON lines: one record per process, then an
    aggregate record. With include_timing=False the wall-clock-derived
    fields are dropped so two same-seed runs serialize byte-identically.
    """
    lines = []
    for m in bundle.per_process:
        record: dict[str, Any] = {
            "process_id": m.process_id,
            "outcome": m.outcome,
            "time_execute": m.time_execute,
            "cfi_count": m.cfi_count,
        }
        if include_timing:
            record["time_detect"] = m.time_detect
            record["overhead_percent"] = m.overhead_percent
        lines.append(json.dumps(record, sort_keys=True))

    aggregate: dict[str, Any] = {
        "process_count": len(bundle.per_process),
        "attack_count": bundle.attack_count,
    }
    if include_timing:
        aggregate["mean_overhead_percent"] = bundle.mean_overhead_percent
        aggregate["overhead_percent_ratio_of_means"] = bundle.overhead_percent_ratio_of_means
        aggregate["fit"] = (
            {"slope": bundle.fit.slope, "intercept": bundle.fit.intercept, "r2": bundle.fit.r2}
            if bundle.fit is not None
            else None
        )
    lines.append(json.dumps(aggregate, sort_keys=True))
    return "\n".join(lines) + "\n"
