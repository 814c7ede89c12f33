"""Fingerprint matching and replica consensus.

The node holding the primary copy of a process acts as coordinator: it sends
its combined digest to every replica worker, each worker compares against its
own locally computed digest and answers Safe or Unsafe, and the coordinator
declares the process clean only if every expected worker answered Safe. Any
Unsafe verdict, or any worker silent past the deadline, flips the outcome to
Attack and raises a single alert.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

from .channel import Envelope, KeyEpochState, MsgType, NoKeyForPeer
from .cis import Fingerprint

OFFER_PAYLOAD_LEN = 128  # combined + jump + call + return digests, 32 bytes each


class Verdict(Enum):
    SAFE = "safe"
    UNSAFE = "unsafe"


class Outcome(Enum):
    PENDING = "Pending"
    NO_ATTACK = "NoAttack"
    ATTACK = "Attack"


class UnexpectedWorker(Exception):
    """Confirmation from a node outside the replica set."""


class DuplicateConfirmation(Exception):
    """Second confirmation from the same worker; the first one stands."""


@dataclass(frozen=True)
class Confirmation:
    process_id: str
    worker_id: int
    verdict: Verdict


@dataclass(frozen=True)
class AlertEvent:
    process_id: str
    coordinator_id: int
    unsafe_workers: tuple[int, ...]
    missing_workers: tuple[int, ...]
    timestamp_ms: int


@dataclass
class ConsensusState:
    """Coordinator-side tally for one process.

    ``undeliverable`` holds replicas we never managed to send an offer to;
    they stay in the expected set so the all-safe rule keeps failing closed.
    """

    process_id: str
    coordinator_id: int
    expected_workers: frozenset[int]
    deadline_ms: int
    received: dict[int, Verdict] = field(default_factory=dict)
    undeliverable: frozenset[int] = frozenset()
    outcome: Outcome = Outcome.PENDING
    alert_emitted: bool = False

    def unsafe_workers(self) -> tuple[int, ...]:
        return tuple(sorted(w for w, v in self.received.items() if v is Verdict.UNSAFE))

    def missing_workers(self) -> tuple[int, ...]:
        return tuple(sorted(self.expected_workers - self.received.keys()))


def pack_offer(fp: Fingerprint) -> bytes:
    return fp.combined + fp.jump_digest + fp.call_digest + fp.return_digest


def unpack_offer(payload: bytes) -> tuple[bytes, bytes, bytes, bytes]:
    if len(payload) != OFFER_PAYLOAD_LEN:
        raise ValueError(f"offer payload must be {OFFER_PAYLOAD_LEN} bytes, got {len(payload)}")
    return payload[0:32], payload[32:64], payload[64:96], payload[96:128]


def pack_confirmation(verdict: Verdict) -> bytes:
    return b"\x01" if verdict is Verdict.SAFE else b"\x00"


def unpack_confirmation(payload: bytes) -> Verdict:
    if len(payload) != 1 or payload[0] not in (0, 1):
        raise ValueError("confirmation payload must be a single 0x00/0x01 byte")
    return Verdict.SAFE if payload[0] == 1 else Verdict.UNSAFE


def alert_payload(alert: AlertEvent) -> bytes:
    return json.dumps(
        {
            "process_id": alert.process_id,
            "coordinator_id": alert.coordinator_id,
            "unsafe_workers": list(alert.unsafe_workers),
            "missing_workers": list(alert.missing_workers),
        },
        sort_keys=True,
    ).encode("utf-8")


def make_offer(
    local_fp: Fingerprint,
    replicas: frozenset[int] | set[int],
    channel: KeyEpochState,
    process_id: str,
    now_ms: int,
    timeout_ms: int,
) -> tuple[list[tuple[int, Envelope]], ConsensusState]:
    """Encrypt one fingerprint offer per replica and open the tally.

    Returns (replica_id, envelope) pairs for the transport to deliver.
    Replicas without an announced key are recorded as undeliverable instead
    of failing the whole offer; they will count as missing at the deadline.
    """
    if not replicas:
        raise ValueError("cannot open consensus with no replicas")
    payload = pack_offer(local_fp)
    envelopes: list[tuple[int, Envelope]] = []
    undeliverable: set[int] = set()
    for replica in sorted(replicas):
        try:
            envelopes.append(
                (replica, channel.encrypt_for(replica, MsgType.FINGERPRINT_OFFER, process_id, payload))
            )
        except NoKeyForPeer:
            undeliverable.add(replica)
    state = ConsensusState(
        process_id=process_id,
        coordinator_id=channel.node_id,
        expected_workers=frozenset(replicas),
        deadline_ms=now_ms + timeout_ms,
        undeliverable=frozenset(undeliverable),
    )
    return envelopes, state


def worker_match(payload: bytes, local_fp: Fingerprint, worker_id: int, process_id: str) -> Confirmation:
    """Byte-compare the received combined digest against the local one."""
    received_combined = unpack_offer(payload)[0]
    verdict = Verdict.SAFE if received_combined == local_fp.combined else Verdict.UNSAFE
    return Confirmation(process_id=process_id, worker_id=worker_id, verdict=verdict)


def record_confirmation(state: ConsensusState, confirmation: Confirmation) -> None:
    """Store one verdict; Unsafe decides immediately, all-Safe closes clean."""
    if state.outcome is not Outcome.PENDING:
        raise ValueError(f"consensus already decided: {state.outcome.value}")
    worker = confirmation.worker_id
    if worker not in state.expected_workers:
        raise UnexpectedWorker(f"worker {worker} not in replica set for {state.process_id}")
    if worker in state.received:
        raise DuplicateConfirmation(f"worker {worker} already confirmed {state.process_id}")
    state.received[worker] = confirmation.verdict
    if confirmation.verdict is Verdict.UNSAFE:
        state.outcome = Outcome.ATTACK
    elif state.received.keys() == state.expected_workers:
        state.outcome = Outcome.NO_ATTACK


def finalize(state: ConsensusState, now_ms: int) -> tuple[Outcome, AlertEvent | None]:
    """Resolve the tally; idempotent, and emits at most one alert ever.

    A pending tally past its deadline treats every silent worker as Unsafe
    (a silenced replica is itself an attack indicator).
    """
    if state.outcome is Outcome.PENDING and now_ms >= state.deadline_ms:
        state.outcome = Outcome.ATTACK

    alert: AlertEvent | None = None
    if state.outcome is Outcome.ATTACK and not state.alert_emitted:
        state.alert_emitted = True
        alert = AlertEvent(
            process_id=state.process_id,
            coordinator_id=state.coordinator_id,
            unsafe_workers=state.unsafe_workers(),
            missing_workers=state.missing_workers(),
            timestamp_ms=now_ms,
        )
    return state.outcome, alert
