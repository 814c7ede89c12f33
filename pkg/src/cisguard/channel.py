"""Rotating-key secure channel between cluster nodes.

Every node periodically generates a fresh asymmetric key pair per peer and
announces the public part. Peers keep the last ``key_history_depth`` public
keys per sender in a FIFO queue (back = newest); the sender keeps the
matching private keys for the same window so messages that cross a rotation
boundary stay decryptable. Payloads ride in a small length-prefixed binary
envelope.

The cryptosystem is a hybrid X25519 / HKDF-SHA256 / AES-256-GCM scheme: the
per-peer key pairs from the rotation schedule are X25519 keys, and each
message is sealed under a fresh ephemeral key exchanged against the
recipient's announced public key. Key material is drawn from ``rng`` when one
is supplied (the cluster simulator injects a seeded generator for
reproducible runs); the default is ``os.urandom``.
"""

from __future__ import annotations

import os
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Deque

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

RandomBytes = Callable[[int], bytes]

WIRE_MAGIC = b"CIS1"
WIRE_VERSION = 1
MAX_PAYLOAD = 64 * 1024

# fixed wire header: magic | version u8 | msg_type u8 | sender_id u32 |
# key_epoch u64 | process_id_len u16
_HEADER = struct.Struct(">4sBBIQH")

_EPHEMERAL_LEN = 32
_NONCE_LEN = 12


class MsgType(IntEnum):
    KEY_ANNOUNCE = 1
    FINGERPRINT_OFFER = 2
    CONFIRMATION = 3
    ALERT = 4


class ChannelError(Exception):
    pass


class NoKeyForPeer(ChannelError):
    """The peer has never announced a public key."""


class StaleKey(ChannelError):
    """The epoch is older than the oldest retained private key."""


class UnknownEpoch(ChannelError):
    """The epoch is newer than anything this node has issued for the peer."""


class DecryptFailure(ChannelError):
    """Ciphertext failed authentication or is structurally invalid."""


class EnvelopeError(ChannelError):
    pass


class BadMagic(EnvelopeError):
    pass


class TruncatedFrame(EnvelopeError):
    pass


class UnknownVersion(EnvelopeError):
    pass


class UnknownMsgType(EnvelopeError):
    pass


class PayloadTooLarge(EnvelopeError):
    pass


class TrailingData(EnvelopeError):
    pass


@dataclass(frozen=True)
class Envelope:
    version: int
    msg_type: MsgType
    sender_id: int
    key_epoch: int
    process_id: str
    payload: bytes


@dataclass(frozen=True)
class KeyPair:
    epoch: int
    public_part: bytes
    private_part: bytes
    peer_id: int


@dataclass
class ChannelConfig:
    node_id: int
    rotation_period_ms: int = 1000
    key_history_depth: int = 3

    def __post_init__(self) -> None:
        if self.rotation_period_ms <= 0:
            raise ValueError("rotation_period_ms must be positive")
        if self.key_history_depth < 1:
            raise ValueError("key_history_depth must be at least 1")


def encode_envelope(env: Envelope) -> bytes:
    pid = env.process_id.encode("utf-8")
    if len(pid) > 0xFFFF:
        raise ValueError("process_id too long for wire format")
    if len(env.payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload {len(env.payload)} exceeds {MAX_PAYLOAD}")
    if not 0 <= env.sender_id <= 0xFFFFFFFF:
        raise ValueError("sender_id out of u32 range")
    if not 0 <= env.key_epoch <= 0xFFFFFFFFFFFFFFFF:
        raise ValueError("key_epoch out of u64 range")
    header = _HEADER.pack(
        WIRE_MAGIC, env.version, int(env.msg_type), env.sender_id, env.key_epoch, len(pid)
    )
    return header + pid + struct.pack(">I", len(env.payload)) + env.payload


def decode_envelope(data: bytes) -> Envelope:
    """Decode exactly one frame; any prefix of a valid frame raises TruncatedFrame."""
    if len(data) < 4:
        raise TruncatedFrame("frame shorter than magic")
    if data[:4] != WIRE_MAGIC:
        raise BadMagic(f"expected {WIRE_MAGIC!r}")
    if len(data) >= 5 and data[4] != WIRE_VERSION:
        raise UnknownVersion(f"version {data[4]}")
    if len(data) >= 6 and not 1 <= data[5] <= 4:
        raise UnknownMsgType(f"msg_type {data[5]}")
    if len(data) < _HEADER.size:
        raise TruncatedFrame("incomplete header")

    _, version, msg_type, sender_id, key_epoch, pid_len = _HEADER.unpack_from(data)
    offset = _HEADER.size
    if len(data) < offset + pid_len + 4:
        raise TruncatedFrame("incomplete process id or payload length")
    try:
        pid = data[offset:offset + pid_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise EnvelopeError("process id is not valid UTF-8") from exc
    offset += pid_len
    (payload_len,) = struct.unpack_from(">I", data, offset)
    offset += 4
    if payload_len > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload {payload_len} exceeds {MAX_PAYLOAD}")
    if len(data) < offset + payload_len:
        raise TruncatedFrame("incomplete payload")
    if len(data) > offset + payload_len:
        raise TrailingData(f"{len(data) - offset - payload_len} bytes after frame")
    payload = data[offset:offset + payload_len]
    return Envelope(
        version=version,
        msg_type=MsgType(msg_type),
        sender_id=sender_id,
        key_epoch=key_epoch,
        process_id=pid,
        payload=payload,
    )


def _new_x25519(rng: RandomBytes | None) -> tuple[bytes, bytes]:
    if rng is None:
        private = X25519PrivateKey.generate()
    else:
        private = X25519PrivateKey.from_private_bytes(rng(32))
    private_bytes = private.private_bytes(
        serialization.Encoding.Raw,
        serialization.PrivateFormat.Raw,
        serialization.NoEncryption(),
    )
    public_bytes = private.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return private_bytes, public_bytes


def _derive_key(shared: bytes, ephemeral_pub: bytes, recipient_pub: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=None,
        info=b"cisguard-hybrid-v1" + ephemeral_pub + recipient_pub,
    ).derive(shared)


def hybrid_encrypt(recipient_public: bytes, plaintext: bytes, rng: RandomBytes | None = None) -> bytes:
    """Seal plaintext to a recipient public key: eph_pub | nonce | AEAD ct."""
    eph_private_bytes, eph_public = _new_x25519(rng)
    eph_private = X25519PrivateKey.from_private_bytes(eph_private_bytes)
    shared = eph_private.exchange(X25519PublicKey.from_public_bytes(recipient_public))
    key = _derive_key(shared, eph_public, recipient_public)
    nonce = (rng or os.urandom)(_NONCE_LEN)
    ciphertext = AESGCM(key).encrypt(nonce, plaintext, None)
    return eph_public + nonce + ciphertext


def hybrid_decrypt(recipient_private: bytes, sealed: bytes) -> bytes:
    if len(sealed) < _EPHEMERAL_LEN + _NONCE_LEN + 16:
        raise DecryptFailure("sealed message too short")
    eph_public = sealed[:_EPHEMERAL_LEN]
    nonce = sealed[_EPHEMERAL_LEN:_EPHEMERAL_LEN + _NONCE_LEN]
    ciphertext = sealed[_EPHEMERAL_LEN + _NONCE_LEN:]
    private = X25519PrivateKey.from_private_bytes(recipient_private)
    shared = private.exchange(X25519PublicKey.from_public_bytes(eph_public))
    recipient_public = private.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    key = _derive_key(shared, eph_public, recipient_public)
    try:
        return AESGCM(key).decrypt(nonce, ciphertext, None)
    except InvalidTag as exc:
        raise DecryptFailure("authentication failed") from exc


@dataclass
class KeyEpochState:
    """Per-node key state: own private history plus peer public-key queues.

    Rotation is driven externally (the simulator's event loop, or a real
    timer); this class never schedules itself. All mutation happens on the
    owning node's single logical event loop.
    """

    config: ChannelConfig
    peers: tuple[int, ...] = ()
    rng: RandomBytes | None = None
    epoch: int = 0
    last_rotation_ms: int | None = None
    own_private_history: dict[int, Deque[tuple[int, bytes]]] = field(default_factory=dict)
    peer_public_queues: dict[int, Deque[tuple[int, bytes]]] = field(default_factory=dict)
    _last_issued: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.peers = tuple(sorted(set(self.peers)))
        if self.config.node_id in self.peers:
            raise ValueError("a node cannot be its own peer")

    @property
    def node_id(self) -> int:
        return self.config.node_id

    def _history_for(self, peer_id: int) -> Deque[tuple[int, bytes]]:
        history = self.own_private_history.get(peer_id)
        if history is None:
            history = deque(maxlen=self.config.key_history_depth)
            self.own_private_history[peer_id] = history
        return history

    def generate_keypair(self, peer_id: int, epoch: int) -> KeyPair:
        """Fresh X25519 pair for one peer; epochs must strictly increase."""
        previous = self._last_issued.get(peer_id, 0)
        if epoch <= previous:
            raise ValueError(f"epoch {epoch} not above previous {previous} for peer {peer_id}")
        private_part, public_part = _new_x25519(self.rng)
        self._last_issued[peer_id] = epoch
        return KeyPair(epoch=epoch, public_part=public_part, private_part=private_part, peer_id=peer_id)

    def rotate(self, now_ms: int | None = None) -> list[tuple[int, Envelope]]:
        """Advance one epoch: new pair per peer, one KeyAnnounce envelope each.

        Returns (peer_id, envelope) pairs since the wire format carries no
        recipient; addressing belongs to the transport. The announce payload
        is the raw public key, sent in the clear; the matching private part
        is appended to this node's history for that peer, evicting anything
        beyond the configured depth.
        """
        self.epoch += 1
        self.last_rotation_ms = now_ms
        announcements: list[tuple[int, Envelope]] = []
        for peer_id in self.peers:
            pair = self.generate_keypair(peer_id, self.epoch)
            self._history_for(peer_id).append((pair.epoch, pair.private_part))
            announcements.append(
                (
                    peer_id,
                    Envelope(
                        version=WIRE_VERSION,
                        msg_type=MsgType.KEY_ANNOUNCE,
                        sender_id=self.node_id,
                        key_epoch=pair.epoch,
                        process_id="",
                        payload=pair.public_part,
                    ),
                )
            )
        return announcements

    def record_peer_key(self, peer_id: int, public_key: bytes, epoch: int) -> None:
        """Enqueue an announced key; full queues drop their front entry.

        Announcements at or below the current back epoch are ignored, which
        blocks replayed announcements from rolling the channel back to an
        older key.
        """
        queue = self.peer_public_queues.get(peer_id)
        if queue is None:
            queue = deque(maxlen=self.config.key_history_depth)
            self.peer_public_queues[peer_id] = queue
        if queue and epoch <= queue[-1][0]:
            return
        queue.append((epoch, public_key))

    def encrypt_for(self, peer_id: int, msg_type: MsgType, process_id: str, plaintext: bytes) -> Envelope:
        """Seal plaintext under the newest key announced by the peer."""
        queue = self.peer_public_queues.get(peer_id)
        if not queue:
            raise NoKeyForPeer(f"peer {peer_id} has not announced a key")
        epoch, public_key = queue[-1]
        return Envelope(
            version=WIRE_VERSION,
            msg_type=msg_type,
            sender_id=self.node_id,
            key_epoch=epoch,
            process_id=process_id,
            payload=hybrid_encrypt(public_key, plaintext, self.rng),
        )

    def decrypt(self, envelope: Envelope) -> bytes:
        """Open an envelope with the private key retained for its epoch."""
        if envelope.msg_type is MsgType.KEY_ANNOUNCE:
            raise ValueError("key announcements are plaintext; nothing to decrypt")
        history = self.own_private_history.get(envelope.sender_id)
        if not history:
            raise UnknownEpoch(f"no keys ever issued for peer {envelope.sender_id}")
        oldest, newest = history[0][0], history[-1][0]
        if envelope.key_epoch < oldest:
            raise StaleKey(f"epoch {envelope.key_epoch} aged out (oldest retained {oldest})")
        if envelope.key_epoch > newest:
            raise UnknownEpoch(f"epoch {envelope.key_epoch} beyond newest issued {newest}")
        for epoch, private_part in history:
            if epoch == envelope.key_epoch:
                return hybrid_decrypt(private_part, envelope.payload)
        raise UnknownEpoch(f"no key retained for epoch {envelope.key_epoch}")


def rotate_epoch(state: KeyEpochState, now_ms: int | None = None) -> list[tuple[int, Envelope]]:
    return state.rotate(now_ms)


def record_peer_key(state: KeyEpochState, peer_id: int, public_key: bytes, epoch: int) -> None:
    state.record_peer_key(peer_id, public_key, epoch)


def encrypt_for(
    state: KeyEpochState, peer_id: int, msg_type: MsgType, process_id: str, plaintext: bytes
) -> Envelope:
    return state.encrypt_for(peer_id, msg_type, process_id, plaintext)


def decrypt(state: KeyEpochState, envelope: Envelope) -> bytes:
    return state.decrypt(envelope)
