"""Client workloads and experiment runs.

Each client behaves as an M/M/1 queue with rejection: operations arrive as a
Poisson process of rate ``rate`` and an arrival that finds the client busy is
dropped (and counted). Client ``writer_id`` issues only writes, the others
only reads. Keys are drawn uniformly.

``run_experiment`` drives the real protocol over the simulated network.
``run_abstract`` replays the analytical model directly: service times are
exponential with rate ``service_rate`` and a read returns the last write that
completed before it was invoked.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .checker import Trace
from .proto import Protocol, Reader, Replica, Writer
from .simnet import (
    ConfigError,
    DelayModel,
    FaultPlan,
    Network,
    Simulator,
    Streams,
)

__all__ = [
    "WorkloadConfig",
    "ClientQueue",
    "drive_client",
    "run_experiment",
    "run_abstract",
    "replica_ids",
    "occupancy",
]

logger = logging.getLogger(__name__)

# per-message handling time (s); see Network
DEFAULT_PROCESSING = 1e-6


@dataclass
class WorkloadConfig:
    clients: int
    rate: float
    ops_per_client: int | None = None
    keys: int = 1
    writer_id: int = 0
    service_rate: float | None = None  # abstract replay only
    horizon: float | None = None  # virtual seconds; stop issuing after this

    def __post_init__(self):
        if self.clients < 2:
            raise ConfigError("need at least 2 clients (one writer and one reader)")
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise ConfigError("arrival rate must be positive")
        if self.keys < 1:
            raise ConfigError("need at least one key")
        if not 0 <= self.writer_id < self.clients:
            raise ConfigError(f"writer_id {self.writer_id} out of range")
        if self.ops_per_client is None and self.horizon is None:
            raise ConfigError("give ops_per_client or horizon (or both)")
        if self.ops_per_client is not None and self.ops_per_client < 0:
            raise ConfigError("ops_per_client must be non-negative")
        if self.horizon is not None and self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if self.service_rate is not None and self.service_rate <= 0:
            raise ConfigError("service rate must be positive")


@dataclass
class ClientQueue:
    client_id: int
    is_writer: bool
    busy: bool = False
    next_arrival: float = 0.0
    accepted: int = 0
    rejected: int = 0


def drive_client(queue: ClientQueue, rng: random.Random, rate: float) -> Iterator[float]:
    """Poisson arrival times for ``queue``: i.i.d. exponential gaps of mean 1/rate.

    Whether an arrival is accepted is decided by the caller at that instant.
    """
    if not rate > 0:
        raise ConfigError("arrival rate must be positive")
    t = queue.next_arrival
    while True:
        t += rng.expovariate(rate)
        queue.next_arrival = t
        yield t


def replica_ids(n: int) -> list[str]:
    return [f"s{i}" for i in range(n)]


class _Run:
    """State of one protocol run. Split out so callbacks stay cheap."""

    def __init__(self, workload, delays, protocol, n, faults, seed, rtt_mode, record, processing):
        self.w = workload
        self.streams = Streams(seed)
        self.sim = Simulator(record=record)
        self.net = Network(self.sim, delays, self.streams, rtt_mode, processing)
        rids = replica_ids(n)
        if faults is not None:
            faults.validate(rids)
        self.replicas = {}
        for rid in rids:
            rep = Replica(rid)
            self.replicas[rid] = rep
            self.net.register(rid, self._replica_handler(rep), replica=True)
        self.queues: list[ClientQueue] = []
        self.nodes = []
        self.arrivals = []
        self.key_rng = []
        for c in range(workload.clients):
            cid = f"c{c}"
            is_writer = c == workload.writer_id
            node = Writer(cid, rids) if is_writer else Reader(cid, rids, protocol)
            self.nodes.append(node)
            queue = ClientQueue(c, is_writer)
            self.queues.append(queue)
            self.net.register(cid, self._client_handler(c))
            self.arrivals.append(
                drive_client(queue, self.streams.get(f"arrivals/{c}"), workload.rate)
            )
            self.key_rng.append(self.streams.get(f"keys/{c}"))
        if faults is not None:
            for rid, at in sorted(faults.crash_times.items()):
                self.net.crash(rid, at, self._on_crash)
        self.next_op = 0
        self.pending_st: dict[int, float] = {}
        # columns of the output trace
        self.cols: tuple[list, ...] = ([], [], [], [], [], [], [])

    def _on_crash(self, rid: str) -> None:
        self.replicas[rid].crashed = True

    def _replica_handler(self, rep: Replica):
        send = self.net.send

        def handle(msg):
            for m in rep.on_message(msg):
                send(m)

        return handle

    def _client_handler(self, c: int):
        node = self.nodes[c]
        net = self.net

        def handle(msg):
            out, done = node.on_message(msg)
            for m in out:
                net.send(m)
            if done is not None:
                self._complete(c, done)

        return handle

    def _wants_more(self, q: ClientQueue) -> bool:
        cap = self.w.ops_per_client
        return cap is None or q.accepted < cap

    def _schedule_arrival(self, c: int) -> None:
        t = next(self.arrivals[c])
        h = self.w.horizon
        if h is not None and t > h:
            return
        self.sim.post(t, self._arrive, c)

    def _arrive(self, c: int) -> None:
        q = self.queues[c]
        if q.busy:
            q.rejected += 1
        else:
            q.busy = True
            q.accepted += 1
            op_id = self.next_op
            self.next_op += 1
            key = self.key_rng[c].randrange(self.w.keys) if self.w.keys > 1 else 0
            self.pending_st[c] = self.sim.now
            node = self.nodes[c]
            if q.is_writer:
                msgs = node.write(key, op_id, op_id)
            else:
                msgs = node.read(key, op_id)
            for m in msgs:
                self.net.send(m)
        if self._wants_more(q):
            self._schedule_arrival(c)

    def _complete(self, c: int, op) -> None:
        q = self.queues[c]
        q.busy = False
        st = self.pending_st.pop(c)
        op_ids, clients, writes, keys, versions, sts, fts = self.cols
        op_ids.append(op.op_id)
        clients.append(c)
        writes.append(q.is_writer)
        keys.append(op.key)
        versions.append(op.chosen.version)
        sts.append(st)
        fts.append(self.sim.now)

    def run(self) -> None:
        for c in range(self.w.clients):
            if self._wants_more(self.queues[c]):
                self._schedule_arrival(c)
        self.sim.run_until()


def run_experiment(
    workload: WorkloadConfig,
    delays: DelayModel,
    protocol: Protocol | str,
    replicas: int,
    faults: FaultPlan | None = None,
    seed: int = 0,
    rtt_mode: str = "split",
    record: bool = False,
    processing: float = DEFAULT_PROCESSING,
) -> Trace:
    """Simulate one run and return the trace of completed operations.

    Operations still pending when the event queue drains (possible only if
    crashes left fewer than a quorum reachable, which the fault plan forbids)
    are left out of the trace and counted in ``meta["incomplete"]``.
    """
    protocol = Protocol.parse(protocol)
    if replicas < 1:
        raise ConfigError("need at least one replica")
    run = _Run(workload, delays, protocol, replicas, faults, seed, rtt_mode, record, processing)
    run.run()
    meta = {
        "seed": seed,
        "rejected": [q.rejected for q in run.queues],
        "accepted": [q.accepted for q in run.queues],
        "incomplete": len(run.pending_st),
        "events": run.sim.n_fired,
        "messages_sent": run.net.sent,
        "messages_dropped": run.net.dropped,
        "end_time": run.sim.now,
    }
    if record:
        meta["fired"] = run.sim.fired
    logger.info(
        "%s n=%d N=%d: %d ops, %d events, %d rejected arrivals",
        protocol.value,
        replicas,
        workload.clients,
        len(run.cols[0]),
        run.sim.n_fired,
        sum(meta["rejected"]),
    )
    return Trace(
        *run.cols, n=replicas, N=workload.clients, protocol=protocol.value, meta=meta
    )


def _client_ops(
    rate: float, mu: float, count: int | None, horizon: float | None, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, int]:
    """Accepted ops of one M/M/1-with-rejection client, plus its rejected count.

    By memorylessness the next accepted arrival comes an Exp(rate) gap after
    the previous service ends, and the arrivals rejected during a service of
    length S are Poisson(rate * S).
    """
    def draw(k):
        return rng.exponential(1.0 / rate, k), rng.exponential(1.0 / mu, k)

    if count is not None:
        gaps, service = draw(count)
        ft = np.cumsum(gaps + service)
    else:
        # generate in chunks until the horizon is passed
        chunk = int(horizon / (1.0 / rate + 1.0 / mu) * 1.05) + 64
        parts_s, parts_f, last = [], [], 0.0
        while True:
            gaps, service = draw(chunk)
            ends = last + np.cumsum(gaps + service)
            parts_s.append(service)
            parts_f.append(ends)
            last = float(ends[-1])
            if last - service[-1] > horizon:
                break
        service = np.concatenate(parts_s)
        ft = np.concatenate(parts_f)
    st = ft - service
    if horizon is not None:
        keep = st <= horizon
        st, ft, service = st[keep], ft[keep], service[keep]
    rejected = int(rng.poisson(rate * service).sum()) if len(service) else 0
    return st, ft, rejected


def run_abstract(workload: WorkloadConfig, seed: int = 0) -> Trace:
    """Replay the queueing model without a network.

    Service times are Exp(service_rate); no replicas are involved. A read
    returns the version of the last write on its key that completed before
    the read was invoked.
    """
    w = workload
    if w.service_rate is None:
        raise ConfigError("abstract replay needs service_rate")
    streams = Streams(seed)
    cols_st, cols_ft, cols_c, cols_k = [], [], [], []
    rejected = []
    for c in range(w.clients):
        rng = streams.numpy(f"abstract/{c}")
        st, ft, rej = _client_ops(w.rate, w.service_rate, w.ops_per_client, w.horizon, rng)
        keys = rng.integers(0, w.keys, len(st)) if w.keys > 1 else np.zeros(len(st), np.int64)
        cols_st.append(st)
        cols_ft.append(ft)
        cols_c.append(np.full(len(st), c, dtype=np.int64))
        cols_k.append(keys)
        rejected.append(rej)
    st = np.concatenate(cols_st)
    ft = np.concatenate(cols_ft)
    client = np.concatenate(cols_c)
    key = np.concatenate(cols_k)
    is_write = client == w.writer_id
    order = np.lexsort((client, st))
    st, ft, client, key, is_write = st[order], ft[order], client[order], key[order], is_write[order]
    version = np.zeros(len(st), dtype=np.int64)
    for k in np.unique(key):
        m = key == k
        wm = m & is_write
        version[wm] = np.arange(1, int(wm.sum()) + 1)
        # writes never overlap, so their response times are sorted by version
        wft = ft[wm]
        rm = m & ~is_write
        version[rm] = np.searchsorted(wft, st[rm], side="left")
    op_id = np.arange(len(st), dtype=np.int64)
    meta = {
        "seed": seed,
        "rejected": rejected,
        "accepted": [int((client == c).sum()) for c in range(w.clients)],
        "incomplete": 0,
    }
    return Trace(op_id, client, is_write, key, version, st, ft, n=None, N=w.clients,
                 protocol="abstract", meta=meta)


def occupancy(trace: Trace, horizon: float) -> list[float]:
    """Fraction of [0, horizon] each client spent with an operation in service."""
    out = []
    for c in range(int(trace.client_id.max()) + 1 if len(trace) else 0):
        m = trace.client_id == c
        busy = np.clip(trace.response[m], None, horizon) - np.clip(trace.invoke[m], None, horizon)
        out.append(float(busy.sum()) / horizon)
    return out
