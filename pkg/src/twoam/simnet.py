"""Deterministic discrete-event simulation of replicas and clients.

The clock is a float in seconds. Events with equal timestamps fire in the
order they were posted (a monotone sequence number breaks ties), so float
equality never decides order.

Delay models come in two flavours. Exponential rates describe a whole
round-trip (mean 1/rate). Uniform and deterministic delays describe a single
message. The network maps either onto the two legs of a round-trip according
to ``rtt_mode``:

``"split"`` (default)
    every message samples its own delay; exponential round-trips are split
    into two legs of doubled rate.
``"request"``
    the request leg carries a full round-trip sample and the reply is
    instantaneous. Used to replay the analytical model exactly.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

import numpy as np

from .proto import Message

__all__ = [
    "ConfigError",
    "CrashConstraintError",
    "SimulationError",
    "Exponential",
    "UniformAsync",
    "Deterministic",
    "Composite",
    "DelayModel",
    "sample_delay",
    "Streams",
    "Event",
    "Simulator",
    "FaultPlan",
    "Network",
    "max_crashes",
]

logger = logging.getLogger(__name__)

RTT_MODES = ("split", "request")


class ConfigError(ValueError):
    pass


class CrashConstraintError(ConfigError):
    pass


class SimulationError(RuntimeError):
    pass


def _check_direction(direction: str) -> None:
    if direction not in ("read", "write"):
        raise ValueError(f"direction must be 'read' or 'write', got {direction!r}")


@dataclass(frozen=True)
class Exponential:
    """Exponential round-trip delays with separate read and write rates (1/s)."""

    read_rate: float
    write_rate: float

    def __post_init__(self):
        if not (self.read_rate > 0 and self.write_rate > 0):
            raise ConfigError("exponential delay rates must be positive")

    def _rate(self, direction: str) -> float:
        return self.read_rate if direction == "read" else self.write_rate

    def sample(self, direction: str, rng: random.Random) -> float:
        return rng.expovariate(self._rate(direction))

    def leg(self, direction: str, rng: random.Random) -> float:
        return rng.expovariate(2.0 * self._rate(direction))

    def round_trip(self, direction: str, rng: random.Random) -> float:
        return rng.expovariate(self._rate(direction))


@dataclass(frozen=True)
class UniformAsync:
    """Injected per-message delay, uniform over the integers [0, r_ms) milliseconds."""

    r_ms: int

    def __post_init__(self):
        if int(self.r_ms) != self.r_ms or self.r_ms < 1:
            raise ConfigError("async bound must be a positive integer number of ms")

    def sample(self, direction: str, rng: random.Random) -> float:
        return rng.randrange(self.r_ms) / 1000.0

    leg = sample

    def round_trip(self, direction: str, rng: random.Random) -> float:
        return self.sample(direction, rng) + self.sample(direction, rng)


@dataclass(frozen=True)
class Deterministic:
    """Fixed per-message delay in seconds."""

    d: float

    def __post_init__(self):
        if self.d < 0:
            raise ConfigError("deterministic delay must be non-negative")

    def sample(self, direction: str, rng: random.Random) -> float:
        return self.d

    leg = sample

    def round_trip(self, direction: str, rng: random.Random) -> float:
        return 2.0 * self.d


@dataclass(frozen=True)
class Composite:
    """Sum of one sample from each constituent model."""

    parts: tuple

    def __post_init__(self):
        if not self.parts:
            raise ConfigError("composite delay needs at least one part")

    def sample(self, direction: str, rng: random.Random) -> float:
        return sum(p.sample(direction, rng) for p in self.parts)

    def leg(self, direction: str, rng: random.Random) -> float:
        return sum(p.leg(direction, rng) for p in self.parts)

    def round_trip(self, direction: str, rng: random.Random) -> float:
        return sum(p.round_trip(direction, rng) for p in self.parts)


DelayModel = Exponential | UniformAsync | Deterministic | Composite


def sample_delay(model: DelayModel, direction: str, rng: random.Random) -> float:
    """Draw one delay from ``model`` in its native unit (seconds)."""
    _check_direction(direction)
    return model.sample(direction, rng)


class Streams:
    """Named, independently seeded random streams derived from one seed.

    A stream's seed depends only on the top-level seed and its name, so adding
    a stream never perturbs the others.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, random.Random] = {}

    def child_seed(self, name: str) -> int:
        ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),))
        return int(ss.generate_state(2, np.uint64)[0])

    def get(self, name: str) -> random.Random:
        rng = self._streams.get(name)
        if rng is None:
            rng = self._streams[name] = random.Random(self.child_seed(name))
        return rng

    def numpy(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.child_seed(name))


class Event(NamedTuple):
    at: float
    seq: int
    name: str


class Simulator:
    """Event loop with a virtual clock.

    ``post`` schedules a callable at an absolute time and returns an event id.
    With ``record=True`` every fired event is appended to ``fired``.
    """

    def __init__(self, record: bool = False):
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self._cancelled: set[int] = set()
        self.record = record
        self.fired: list[Event] = []
        self.n_fired = 0

    def post(self, at: float, action: Callable, *args) -> int:
        if at < self.now:
            raise SimulationError(f"cannot post an event at {at!r} before now={self.now!r}")
        seq = next(self._seq)
        heapq.heappush(self._heap, (at, seq, action, args))
        return seq

    def schedule(self, delay: float, action: Callable, *args) -> int:
        return self.post(self.now + delay, action, *args)

    def cancel(self, event_id: int) -> None:
        self._cancelled.add(event_id)

    def pending(self) -> int:
        return len(self._heap) - len(self._cancelled)

    def run_until(self, t_end: float | None = None, max_events: int | None = None) -> int:
        """Fire events in (time, seq) order. Returns the number fired.

        Stops when the queue is empty, the next event lies beyond ``t_end``,
        or ``max_events`` have fired. With ``t_end`` given the clock ends there.
        """
        heap = self._heap
        pop = heapq.heappop
        cancelled = self._cancelled
        budget = max_events if max_events is not None else -1
        fired = 0
        while heap and fired != budget:
            if t_end is not None and heap[0][0] > t_end:
                break
            at, seq, action, args = pop(heap)
            if cancelled and seq in cancelled:
                cancelled.discard(seq)
                continue
            self.now = at
            if self.record:
                self.fired.append(Event(at, seq, getattr(action, "__name__", repr(action))))
            action(*args)
            fired += 1
        if t_end is not None and t_end > self.now and (not heap or heap[0][0] > t_end):
            self.now = t_end
        self.n_fired += fired
        return fired


def max_crashes(n: int) -> int:
    return (n - 1) // 2


@dataclass
class FaultPlan:
    """Replica crashes: replica id -> crash time (s)."""

    crash_times: dict[str, float] = field(default_factory=dict)

    @property
    def crash_set(self) -> set[str]:
        return set(self.crash_times)

    def validate(self, replicas: Iterable[str]) -> None:
        replicas = list(replicas)
        unknown = self.crash_set - set(replicas)
        if unknown:
            raise ConfigError(f"fault plan names unknown replicas: {sorted(unknown)}")
        limit = max_crashes(len(replicas))
        if len(self.crash_times) > limit:
            raise CrashConstraintError(
                f"{len(self.crash_times)} crashes requested but at most {limit} of "
                f"{len(replicas)} replicas may crash"
            )
        for rid, at in self.crash_times.items():
            if at < 0:
                raise ConfigError(f"negative crash time for {rid}")


class Network:
    """Point-to-point message delivery with sampled delays.

    ``processing`` is a fixed time added to every message. A small positive
    value keeps every operation strictly longer than zero even when the
    sampled delays are all zero.

    Live links deliver each message exactly once, possibly reordered. Messages
    to or from a crashed replica are dropped at delivery time.
    """

    def __init__(
        self,
        sim: Simulator,
        delays: DelayModel,
        streams: Streams,
        rtt_mode: str = "split",
        processing: float = 0.0,
    ):
        if rtt_mode not in RTT_MODES:
            raise ConfigError(f"rtt_mode must be one of {RTT_MODES}")
        if not processing >= 0:
            raise ConfigError("processing time must be non-negative")
        self.processing = processing
        self.sim = sim
        self.delays = delays
        self.streams = streams
        self.rtt_mode = rtt_mode
        self.handlers: dict[str, Callable[[Message], None]] = {}
        self.replica_ids: list[str] = []
        self._replica_set: set[str] = set()
        self.crashed: set[str] = set()
        self._crash_planned: set[str] = set()
        self._rng: dict[str, random.Random] = {}
        self.sent = 0
        self.dropped = 0

    def register(self, node_id: str, handler: Callable[[Message], None], replica: bool = False):
        if node_id in self.handlers:
            raise ConfigError(f"duplicate node id {node_id!r}")
        self.handlers[node_id] = handler
        self._rng[node_id] = self.streams.get(f"net/{node_id}")
        if replica:
            self.replica_ids.append(node_id)
            self._replica_set.add(node_id)

    def _delay(self, msg: Message, is_request: bool) -> float:
        rng = self._rng[msg.sender]
        if self.rtt_mode == "split":
            return self.delays.leg(msg.direction, rng)
        if is_request:
            return self.delays.round_trip(msg.direction, rng)
        return 0.0

    def send(self, msg: Message) -> None:
        if msg.sender in self.crashed:
            self.dropped += 1
            return
        is_request = msg.receiver in self._replica_set
        self.sent += 1
        at = self.sim.now + self._delay(msg, is_request) + self.processing
        self.sim.post(at, self._deliver, msg)

    def send_all(self, msgs: Iterable[Message]) -> None:
        for m in msgs:
            self.send(m)

    def _deliver(self, msg: Message) -> None:
        if msg.receiver in self.crashed or msg.sender in self.crashed:
            self.dropped += 1
            return
        self.handlers[msg.receiver](msg)

    def crash(self, replica: str, at: float, on_crash: Callable[[str], None] | None = None):
        """Schedule a crash. Rejects plans that would crash a majority."""
        if replica not in self.replica_ids:
            raise ConfigError(f"unknown replica {replica!r}")
        planned = self._crash_planned | {replica}
        limit = max_crashes(len(self.replica_ids))
        if len(planned) > limit:
            raise CrashConstraintError(
                f"crashing {replica} would take down {len(planned)} of "
                f"{len(self.replica_ids)} replicas (limit {limit})"
            )
        self._crash_planned = planned

        def _fire(rid=replica):
            self.crashed.add(rid)
            logger.debug("replica %s crashed at %.6f", rid, self.sim.now)
            if on_crash is not None:
                on_crash(rid)

        self.sim.post(at, _fire)
