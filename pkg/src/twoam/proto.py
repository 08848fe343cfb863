"""Replica and client state machines for 2AM and the ABD baseline.

Both protocols share the writer and the replica. They differ only in the
read: a 2AM read returns after one query round-trip, while an ABD read
writes the chosen value back to a majority before returning.

Nothing here knows about time or networks. Each handler consumes one
message and returns the messages it wants sent; the simulator owns delivery.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Hashable, Sequence

__all__ = [
    "MsgKind",
    "Protocol",
    "VersionedValue",
    "Message",
    "ClientOpState",
    "Replica",
    "Writer",
    "Reader",
    "ProtocolError",
    "WellFormednessError",
    "quorum_size",
]

INITIAL_VERSION = 0


class ProtocolError(RuntimeError):
    pass


class WellFormednessError(ProtocolError):
    """A client tried to start an operation while another one is pending."""


class MsgKind(enum.Enum):
    QUERY = "Query"
    QUERY_REPLY = "QueryReply"
    UPDATE = "Update"
    ACK = "Ack"
    WRITE_BACK = "WriteBack"
    WRITE_BACK_ACK = "WriteBackAck"


class Protocol(str, enum.Enum):
    TWO_AM = "2AM"
    ABD = "ABD"

    @classmethod
    def parse(cls, value: str | Protocol) -> Protocol:
        if isinstance(value, Protocol):
            return value
        for p in cls:
            if p.value.lower() == str(value).lower():
                return p
        raise ValueError(f"unknown protocol {value!r} (expected 2AM or ABD)")


def quorum_size(n: int) -> int:
    """Majority quorum: floor(n/2) + 1."""
    if n < 1:
        raise ValueError("need at least one replica")
    return n // 2 + 1


@dataclass(frozen=True, slots=True)
class VersionedValue:
    key: Hashable
    value: Any
    version: int


@dataclass(frozen=True, slots=True)
class Message:
    kind: MsgKind
    sender: str
    receiver: str
    op_id: int
    key: Hashable
    payload: VersionedValue | None = None

    @property
    def direction(self) -> str:
        # delay models distinguish read and write traffic
        if self.kind in (MsgKind.UPDATE, MsgKind.ACK):
            return "write"
        return "read"


@dataclass
class ClientOpState:
    op_id: int
    kind: str  # "read" | "write"
    key: Hashable
    quorum: int
    phase: int = 1
    write_back: bool = False  # ABD reads only
    replies: dict[str, VersionedValue | None] = field(default_factory=dict)
    chosen: VersionedValue | None = None
    done: bool = False


class Replica:
    """One storage replica. Handles each message atomically."""

    def __init__(self, replica_id: str):
        self.replica_id = replica_id
        self.store: dict[Hashable, VersionedValue] = {}
        self.crashed = False

    def get(self, key: Hashable) -> VersionedValue:
        vv = self.store.get(key)
        if vv is None:
            return VersionedValue(key, None, INITIAL_VERSION)
        return vv

    def on_message(self, msg: Message) -> list[Message]:
        if self.crashed:
            return []
        kind = msg.kind
        if kind is MsgKind.QUERY:
            reply = MsgKind.QUERY_REPLY
            payload = self.get(msg.key)
        elif kind is MsgKind.UPDATE or kind is MsgKind.WRITE_BACK:
            incoming = msg.payload
            if incoming is None:
                raise ProtocolError(f"{kind.value} without a payload")
            if self.get(msg.key).version < incoming.version:
                self.store[msg.key] = incoming
            # stale updates are still acknowledged
            reply = MsgKind.ACK if kind is MsgKind.UPDATE else MsgKind.WRITE_BACK_ACK
            payload = None
        else:
            raise ProtocolError(f"replica cannot handle {kind.value}")
        return [Message(reply, self.replica_id, msg.sender, msg.op_id, msg.key, payload)]


class _Client:
    def __init__(self, client_id: str, replicas: Sequence[str]):
        if not replicas:
            raise ValueError("a client needs at least one replica")
        self.client_id = client_id
        self.replicas = tuple(replicas)
        self.quorum = quorum_size(len(self.replicas))
        self.pending: ClientOpState | None = None

    def _begin(self, op_id: int, kind: str, key: Hashable) -> ClientOpState:
        if self.pending is not None:
            raise WellFormednessError(
                f"client {self.client_id} already has operation {self.pending.op_id} pending"
            )
        self.pending = ClientOpState(op_id, kind, key, self.quorum)
        return self.pending

    def _broadcast(self, kind: MsgKind, op: ClientOpState, payload=None) -> list[Message]:
        return [
            Message(kind, self.client_id, s, op.op_id, op.key, payload) for s in self.replicas
        ]

    def _accept(self, msg: Message, expected: MsgKind, phase: int) -> ClientOpState | None:
        """Record a reply; return the op if this reply completed the phase."""
        op = self.pending
        if op is None or msg.op_id != op.op_id or msg.kind is not expected or op.phase != phase:
            return None  # late reply for a finished op or phase
        if msg.sender in op.replies:
            return None
        op.replies[msg.sender] = msg.payload
        if len(op.replies) == op.quorum:
            return op
        return None


class Writer(_Client):
    """The single writer. Versions are a per-key local counter."""

    def __init__(self, client_id: str, replicas: Sequence[str]):
        super().__init__(client_id, replicas)
        self.versions: dict[Hashable, int] = {}

    def write(self, key: Hashable, value: Any, op_id: int) -> list[Message]:
        op = self._begin(op_id, "write", key)
        version = self.versions.get(key, INITIAL_VERSION) + 1
        self.versions[key] = version
        op.chosen = VersionedValue(key, value, version)
        return self._broadcast(MsgKind.UPDATE, op, op.chosen)

    def on_message(self, msg: Message) -> tuple[list[Message], ClientOpState | None]:
        op = self._accept(msg, MsgKind.ACK, 1)
        if op is None:
            return [], None
        op.done = True
        self.pending = None
        return [], op


class Reader(_Client):
    """A reader running either the one-round-trip 2AM read or the ABD read."""

    def __init__(self, client_id: str, replicas: Sequence[str], protocol: Protocol | str):
        super().__init__(client_id, replicas)
        self.protocol = Protocol.parse(protocol)

    def read(self, key: Hashable, op_id: int) -> list[Message]:
        if self.protocol is Protocol.TWO_AM:
            return self.read_2am(key, op_id)
        return self.read_abd(key, op_id)

    def read_2am(self, key: Hashable, op_id: int) -> list[Message]:
        op = self._begin(op_id, "read", key)
        return self._broadcast(MsgKind.QUERY, op)

    def read_abd(self, key: Hashable, op_id: int) -> list[Message]:
        op = self._begin(op_id, "read", key)
        op.write_back = True
        return self._broadcast(MsgKind.QUERY, op)

    def on_message(self, msg: Message) -> tuple[list[Message], ClientOpState | None]:
        op = self.pending
        if op is None:
            return [], None
        if op.phase == 1:
            if self._accept(msg, MsgKind.QUERY_REPLY, 1) is None:
                return [], None
            op.chosen = max(op.replies.values(), key=lambda vv: vv.version)
            if op.write_back:
                op.phase = 2
                op.replies = {}
                return self._broadcast(MsgKind.WRITE_BACK, op, op.chosen), None
            return self._finish(op)
        if self._accept(msg, MsgKind.WRITE_BACK_ACK, 2) is None:
            return [], None
        return self._finish(op)

    def _finish(self, op: ClientOpState) -> tuple[list[Message], ClientOpState]:
        op.done = True
        self.pending = None
        return [], op
