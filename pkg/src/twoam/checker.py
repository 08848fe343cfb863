"""Offline analysis of operation traces.

A trace is the list of completed operations of one run: who invoked what, on
which key, which version was written or read, and when. Everything here is a
pure function of the trace.

Definitions used throughout, for a read ``r`` on key ``k``:

* ``w`` is the write on ``k`` whose interval contains ``r``'s invocation.
  Writes by the single writer never overlap, so there is at most one.
* ``w'`` is the write immediately before ``w``. Every key starts with an
  implicit version-0 write, so ``w'`` always exists when ``w`` does.
* the witnesses of ``r`` are the reads on ``k`` that respond inside
  ``[w.invoke, r.invoke]``.

``r`` is a concurrency pattern (CP) when ``w`` exists and it has at least one
witness. A CP is a read-write pattern (RWP), i.e. an old-new inversion,
when ``r`` returned ``w'`` and some witness returned ``w``.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

__all__ = [
    "OpRecord",
    "Trace",
    "TraceError",
    "PatternInstance",
    "PatternReport",
    "Violation",
    "TwoAtomicityResult",
    "AtomicityResult",
    "LatencySummary",
    "precedes",
    "detect_cp",
    "detect_rwp",
    "pattern_stats",
    "build_permutation",
    "verify_2atomicity",
    "verify_atomicity",
    "latency_stats",
    "staleness_histogram",
    "read_trace_csv",
    "write_trace_csv",
    "TRACE_HEADER",
]

TRACE_HEADER = (
    "op_id",
    "client_id",
    "kind",
    "key",
    "version",
    "invoke_time_s",
    "response_time_s",
)


class TraceError(ValueError):
    """Malformed or inconsistent trace. ``diagnostics`` lists every problem found."""

    def __init__(self, message: str, diagnostics: list[str] | None = None):
        self.diagnostics = diagnostics or [message]
        super().__init__(message if not diagnostics else f"{message}: " + "; ".join(diagnostics[:10]))


@dataclass(frozen=True, slots=True)
class OpRecord:
    op_id: int
    client_id: int
    kind: str  # "R" or "W"
    key: int
    version: int
    invoke_time: float
    response_time: float

    @property
    def is_write(self) -> bool:
        return self.kind == "W"


def precedes(o1: OpRecord, o2: OpRecord) -> bool:
    """Real-time order: o1 responded before o2 was invoked."""
    return o1.response_time < o2.invoke_time


class Trace:
    """Column-oriented trace. Row order is not significant."""

    def __init__(
        self,
        op_id,
        client_id,
        is_write,
        key,
        version,
        invoke,
        response,
        *,
        n: int | None = None,
        N: int | None = None,
        protocol: str | None = None,
        meta: dict | None = None,
    ):
        self.op_id = np.asarray(op_id, dtype=np.int64)
        self.client_id = np.asarray(client_id, dtype=np.int64)
        self.is_write = np.asarray(is_write, dtype=bool)
        self.key = np.asarray(key, dtype=np.int64)
        self.version = np.asarray(version, dtype=np.int64)
        self.invoke = np.asarray(invoke, dtype=np.float64)
        self.response = np.asarray(response, dtype=np.float64)
        sizes = {len(a) for a in self._columns()}
        if len(sizes) > 1:
            raise TraceError("trace columns have different lengths")
        self.n = n
        self.N = N
        self.protocol = protocol
        self.meta = dict(meta or {})

    def _columns(self):
        return (
            self.op_id,
            self.client_id,
            self.is_write,
            self.key,
            self.version,
            self.invoke,
            self.response,
        )

    @classmethod
    def from_records(cls, records: Iterable[OpRecord], **kw) -> Trace:
        recs = list(records)
        return cls(
            [r.op_id for r in recs],
            [r.client_id for r in recs],
            [r.kind == "W" for r in recs],
            [r.key for r in recs],
            [r.version for r in recs],
            [r.invoke_time for r in recs],
            [r.response_time for r in recs],
            **kw,
        )

    @classmethod
    def empty(cls, **kw) -> Trace:
        return cls([], [], [], [], [], [], [], **kw)

    def __len__(self) -> int:
        return len(self.op_id)

    def record(self, i: int) -> OpRecord:
        return OpRecord(
            int(self.op_id[i]),
            int(self.client_id[i]),
            "W" if self.is_write[i] else "R",
            int(self.key[i]),
            int(self.version[i]),
            float(self.invoke[i]),
            float(self.response[i]),
        )

    def records(self) -> Iterator[OpRecord]:
        for i in range(len(self)):
            yield self.record(i)

    @property
    def ops(self) -> list[OpRecord]:
        return list(self.records())

    @property
    def n_reads(self) -> int:
        return int((~self.is_write).sum())

    def keys(self) -> list[int]:
        return sorted(int(k) for k in np.unique(self.key))

    def subset(self, mask) -> Trace:
        return Trace(
            *(c[mask] for c in self._columns()),
            n=self.n,
            N=self.N,
            protocol=self.protocol,
            meta=self.meta,
        )

    def sorted_by_invoke(self) -> Trace:
        order = np.lexsort((self.op_id, self.invoke))
        return self.subset(order)

    def validate(self) -> None:
        """Raise TraceError unless the trace is a well-formed single-writer trace."""
        problems: list[str] = []
        bad = np.nonzero(~(self.invoke < self.response))[0]
        for i in bad[:20]:
            problems.append(f"op {self.op_id[i]}: response time is not after invoke time")
        if len(np.unique(self.op_id)) != len(self):
            problems.append("duplicate op ids")
        # per-client alternation of invocations and responses
        order = np.lexsort((self.invoke, self.client_id))
        c, st, ft = self.client_id[order], self.invoke[order], self.response[order]
        overlap = np.nonzero((c[1:] == c[:-1]) & (st[1:] < ft[:-1]))[0]
        for j in overlap[:20]:
            problems.append(
                f"client {c[j]}: op {self.op_id[order][j + 1]} invoked before "
                f"op {self.op_id[order][j]} responded"
            )
        writers = np.unique(self.client_id[self.is_write])
        if len(writers) > 1:
            problems.append(f"more than one writer: clients {writers.tolist()}")
        readers_writing = set(np.unique(self.client_id[~self.is_write]).tolist()) & set(
            writers.tolist()
        )
        if readers_writing:
            problems.append(f"writer client(s) {sorted(readers_writing)} also issued reads")
        # a read must fall inside at most one write, so write intervals may not touch
        wst = np.sort(self.invoke[self.is_write])
        wft = np.sort(self.response[self.is_write])
        touching = np.nonzero(wst[1:] <= wft[:-1])[0]
        for j in touching[:20]:
            problems.append(f"write invoked at {wst[j + 1]!r} does not follow the previous write's response")
        for k in np.unique(self.key):
            m = self.key == k
            w = m & self.is_write
            wst = self.invoke[w]
            wver = self.version[w][np.argsort(wst, kind="stable")]
            if len(wver) and not np.array_equal(wver, np.arange(1, len(wver) + 1)):
                problems.append(f"key {k}: write versions are not 1..{len(wver)} in invoke order")
            r = m & ~self.is_write
            rv = self.version[r]
            missing = np.nonzero((rv < 0) | (rv > len(wver)))[0]
            for j in missing[:20]:
                problems.append(
                    f"key {k}: read {self.op_id[r][j]} returned version {rv[j]} "
                    "which no write in the trace produced"
                )
        if problems:
            raise TraceError("malformed trace", problems)


# --------------------------------------------------------------------------
# CSV


def _fmt_time(t: float) -> str:
    return f"{t:.15f}"


def write_trace_csv(trace: Trace, fh, comment: str | None = None) -> None:
    """Write ``trace`` in canonical (invoke time, op id) order."""
    if comment:
        for line in comment.splitlines():
            fh.write(f"# {line}\n")
    fh.write(",".join(TRACE_HEADER) + "\n")
    t = trace.sorted_by_invoke()
    kinds = np.where(t.is_write, "W", "R")
    for i in range(len(t)):
        fh.write(
            f"{t.op_id[i]},{t.client_id[i]},{kinds[i]},{t.key[i]},{t.version[i]},"
            f"{_fmt_time(t.invoke[i])},{_fmt_time(t.response[i])}\n"
        )


def read_trace_csv(fh, **kw) -> Trace:
    """Parse a trace CSV. Lines starting with '#' are comments.

    Raises TraceError with one diagnostic per bad row (1-based line numbers).
    """
    if isinstance(fh, (str, bytes)):
        fh = io.StringIO(fh if isinstance(fh, str) else fh.decode())
    lines = [(i + 1, ln) for i, ln in enumerate(fh) if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise TraceError("trace CSV is empty (header required)")
    header_line, header = lines[0]
    cols = [c.strip() for c in next(csv.reader([header]))]
    if tuple(cols) != TRACE_HEADER:
        raise TraceError(
            "bad header", [f"line {header_line}: expected {','.join(TRACE_HEADER)}, got {header.strip()}"]
        )
    rows = []
    problems = []
    for lineno, ln in lines[1:]:
        fields = [f.strip() for f in next(csv.reader([ln]))]
        if len(fields) != len(TRACE_HEADER):
            problems.append(f"line {lineno}: expected {len(TRACE_HEADER)} fields, got {len(fields)}")
            continue
        try:
            op_id, client, kind, key, version = (
                int(fields[0]),
                int(fields[1]),
                fields[2],
                int(fields[3]),
                int(fields[4]),
            )
            st, ft = float(fields[5]), float(fields[6])
        except ValueError as exc:
            problems.append(f"line {lineno}: {exc}")
            continue
        if kind not in ("R", "W"):
            problems.append(f"line {lineno}: kind must be R or W, got {kind!r}")
            continue
        if not (math.isfinite(st) and math.isfinite(ft)):
            problems.append(f"line {lineno}: non-finite time")
            continue
        rows.append((op_id, client, kind == "W", key, version, st, ft))
    if problems:
        raise TraceError("malformed trace CSV", problems)
    if not rows:
        return Trace.empty(**kw)
    cols_ = list(zip(*rows))
    return Trace(*cols_, **kw)


# --------------------------------------------------------------------------
# pattern detection


@dataclass
class PatternInstance:
    r: int
    w: int
    w_prime: int | None  # None stands for the implicit initial write
    r_prime_set: list[int]
    is_rwp: bool = False


@dataclass
class PatternReport:
    reads: int
    cps: int
    rwps: int
    concurrent_reads: int = 0  # reads whose invocation falls inside some write
    empty: bool = False

    @property
    def p_cp(self) -> float:
        return self.cps / self.reads if self.reads else 0.0

    @property
    def p_rwp_given_cp(self) -> float:
        return self.rwps / self.cps if self.cps else 0.0

    @property
    def p_oni(self) -> float:
        # same product the proportions imply; kept as the product so the
        # identity P(ONI) = P(CP) * P(RWP|CP) holds exactly in floating point
        return self.p_cp * self.p_rwp_given_cp

    @property
    def p_cp_given_concurrent(self) -> float:
        return self.cps / self.concurrent_reads if self.concurrent_reads else 0.0

    def as_rows(self) -> list[tuple[str, float | int]]:
        return [
            ("reads", self.reads),
            ("concurrent_reads", self.concurrent_reads),
            ("cps", self.cps),
            ("rwps", self.rwps),
            ("p_cp", self.p_cp),
            ("p_rwp_given_cp", self.p_rwp_given_cp),
            ("p_oni", self.p_oni),
            ("p_cp_given_concurrent", self.p_cp_given_concurrent),
            ("empty", int(self.empty)),
        ]

    def __add__(self, other: PatternReport) -> PatternReport:
        reads = self.reads + other.reads
        return PatternReport(
            reads,
            self.cps + other.cps,
            self.rwps + other.rwps,
            self.concurrent_reads + other.concurrent_reads,
            empty=reads == 0,
        )


@dataclass
class _KeyView:
    """Per-key arrays used by the detectors."""

    key: int
    w_idx: np.ndarray  # trace rows of writes, in version order
    wst: np.ndarray
    wft: np.ndarray
    wver: np.ndarray
    r_idx: np.ndarray  # trace rows of reads
    rst: np.ndarray
    rft: np.ndarray
    rver: np.ndarray
    host: np.ndarray  # per read: position in w_idx of its concurrent write, -1 if none
    lo: np.ndarray  # per read: witness range [lo, hi) into ft_order
    hi: np.ndarray
    ft_order: np.ndarray  # read positions sorted by response time


def _key_views(trace: Trace) -> Iterator[_KeyView]:
    for k in np.unique(trace.key):
        m = trace.key == k
        w_idx = np.nonzero(m & trace.is_write)[0]
        w_idx = w_idx[np.argsort(trace.invoke[w_idx], kind="stable")]
        r_idx = np.nonzero(m & ~trace.is_write)[0]
        wst, wft = trace.invoke[w_idx], trace.response[w_idx]
        rst, rft = trace.invoke[r_idx], trace.response[r_idx]
        pos = np.searchsorted(wst, rst, side="right") - 1
        safe = np.clip(pos, 0, None)
        concurrent = (pos >= 0) & (len(wst) > 0)
        if len(wst):
            concurrent &= rst <= wft[safe]
        host = np.where(concurrent, pos, -1)
        ft_order = np.argsort(rft, kind="stable")
        ft_sorted = rft[ft_order]
        lo = np.zeros(len(r_idx), dtype=np.int64)
        hi = np.zeros(len(r_idx), dtype=np.int64)
        if len(wst):
            lo = np.searchsorted(ft_sorted, wst[safe], side="left")
            hi = np.searchsorted(ft_sorted, rst, side="right")
            lo = np.where(concurrent, lo, 0)
            hi = np.where(concurrent, hi, 0)
        yield _KeyView(
            int(k),
            w_idx,
            wst,
            wft,
            trace.version[w_idx],
            r_idx,
            rst,
            rft,
            trace.version[r_idx],
            host,
            lo,
            hi,
            ft_order,
        )


def _rwp_flags(v: _KeyView, cp: np.ndarray) -> np.ndarray:
    """For each read of ``v``: CP whose read returned w' while a witness returned w."""
    flags = np.zeros(len(v.r_idx), dtype=bool)
    if not len(v.wver):
        return flags
    host_ver = np.where(v.host >= 0, v.wver[np.clip(v.host, 0, None)], -1)
    cand = np.nonzero(cp & (v.rver == host_ver - 1))[0]
    if not len(cand):
        return flags
    # witnesses of a candidate are reads of version host_ver with response
    # rank inside [lo, hi); encode (version, rank) as one sortable integer
    nr = len(v.r_idx)
    rank = np.empty(nr, dtype=np.int64)
    rank[v.ft_order] = np.arange(nr)
    comp = np.sort(v.rver * (nr + 1) + rank)
    base = host_ver[cand] * (nr + 1)
    hits = np.searchsorted(comp, base + v.hi[cand], side="left") - np.searchsorted(
        comp, base + v.lo[cand], side="left"
    )
    flags[cand] = hits > 0
    return flags


def detect_cp(trace: Trace) -> list[PatternInstance]:
    """One instance per read that forms a concurrency pattern."""
    out = []
    for v in _key_views(trace):
        cp = (v.host >= 0) & (v.hi > v.lo)
        rwp = _rwp_flags(v, cp)
        for j in np.nonzero(cp)[0]:
            h = v.host[j]
            witnesses = v.r_idx[v.ft_order[v.lo[j] : v.hi[j]]]
            out.append(
                PatternInstance(
                    r=int(trace.op_id[v.r_idx[j]]),
                    w=int(trace.op_id[v.w_idx[h]]),
                    w_prime=int(trace.op_id[v.w_idx[h - 1]]) if h > 0 else None,
                    r_prime_set=sorted(int(x) for x in trace.op_id[witnesses]),
                    is_rwp=bool(rwp[j]),
                )
            )
    return out


def detect_rwp(trace: Trace, cps: list[PatternInstance] | None = None) -> list[PatternInstance]:
    """The subset of concurrency patterns that are read-write patterns."""
    if cps is None:
        cps = detect_cp(trace)
    return [p for p in cps if p.is_rwp]


def pattern_stats(trace: Trace) -> PatternReport:
    reads = cps = rwps = concurrent = 0
    for v in _key_views(trace):
        cp = (v.host >= 0) & (v.hi > v.lo)
        reads += len(v.r_idx)
        concurrent += int((v.host >= 0).sum())
        cps += int(cp.sum())
        rwps += int(_rwp_flags(v, cp).sum())
    return PatternReport(reads, cps, rwps, concurrent, empty=reads == 0)


# --------------------------------------------------------------------------
# permutation and consistency checks


@dataclass
class _Schedule:
    """Reads placed between writes. ``slots[v]`` holds reads after write v."""

    slots: dict[int, list[int]]  # version -> trace rows of reads, in order
    slot_of: dict[int, int]  # read row -> version of its slot
    writes: dict[int, int]  # version -> trace row (version 0 absent)

    def rank(self, row: int) -> tuple[int, int]:
        s = self.slot_of[row]
        return (s, self.slots[s].index(row))


def _schedule(trace: Trace, key: int) -> _Schedule:
    m = trace.key == key
    w_rows = np.nonzero(m & trace.is_write)[0]
    writes = {int(trace.version[i]): int(i) for i in w_rows}
    r_rows = np.nonzero(m & ~trace.is_write)[0]
    by_st = r_rows[np.lexsort((trace.op_id[r_rows], trace.invoke[r_rows]))]
    by_ft = r_rows[np.lexsort((trace.op_id[r_rows], trace.response[r_rows]))]
    max_version = max(writes) if writes else 0
    slots: dict[int, list[int]] = {v: [] for v in range(max_version + 1)}
    slot_of: dict[int, int] = {}
    sched = _Schedule(slots, slot_of, writes)
    latest: int | None = None  # latest (in the permutation) read that precedes the current one
    latest_rank: tuple[int, int] | None = None
    p = 0
    for row in by_st:
        row = int(row)
        st = trace.invoke[row]
        while p < len(by_ft) and trace.response[by_ft[p]] < st:
            cand = int(by_ft[p])
            p += 1
            cr = sched.rank(cand)
            if latest_rank is None or cr > latest_rank:
                latest, latest_rank = cand, cr
            # ranks shift on insertion; refresh the cached one
        ver = int(trace.version[row])
        if ver not in slots:
            raise TraceError(
                "read-from write missing",
                [f"read {trace.op_id[row]} returned version {ver} of key {key} with no such write"],
            )
        if latest is not None and slot_of[latest] >= ver:
            s = slot_of[latest]
            slots[s].insert(slots[s].index(latest) + 1, row)
        else:
            s = ver
            slots[s].insert(0, row)
        slot_of[row] = s
        if latest is not None:
            latest_rank = sched.rank(latest)
    return sched


def build_permutation(trace: Trace, key: int) -> list[OpRecord]:
    """Sequential witness order for one key.

    Writes go in version order. Reads are taken in invocation order and each
    is placed immediately after whichever comes later: the write it read
    from, or the latest already-placed read that finished before it started.
    """
    sched = _schedule(trace, key)
    out = []
    for v in sorted(sched.slots):
        if v in sched.writes:
            out.append(trace.record(sched.writes[v]))
        out.extend(trace.record(r) for r in sched.slots[v])
    return out


@dataclass
class Violation:
    op_id: int
    key: int
    reason: str  # "stale" | "real-time"
    detail: str


@dataclass
class TwoAtomicityResult:
    ok: bool
    violations: list[Violation] = field(default_factory=list)


@dataclass
class AtomicityResult:
    ok: bool
    oni_count: int  # read-write patterns (old-new inversions)
    stale_reads: int  # reads not returning the latest preceding write in the permutation


def _flatten(trace: Trace, sched: _Schedule) -> tuple[list[int], list[int]]:
    """Trace rows in permutation order, and the slot version of each position."""
    rows, slots = [], []
    for v in sorted(sched.slots):
        if v in sched.writes:
            rows.append(sched.writes[v])
            slots.append(v)
        for r in sched.slots[v]:
            rows.append(r)
            slots.append(v)
    return rows, slots


def _real_time_violations(trace: Trace, rows: list[int]) -> list[tuple[int, int]]:
    """Pairs (o1, o2) with o1 preceding o2 in real time but placed after it."""
    if not rows:
        return []
    idx = np.asarray(rows, dtype=np.int64)
    pos = np.arange(len(idx))
    ft = trace.response[idx]
    st = trace.invoke[idx]
    order = np.argsort(ft, kind="stable")
    ft_sorted = ft[order]
    pos_by_ft = pos[order]
    prefix_max = np.maximum.accumulate(pos_by_ft)
    prefix_arg = np.zeros(len(order), dtype=np.int64)
    best = 0
    for i in range(len(order)):
        if pos_by_ft[i] >= pos_by_ft[best]:
            best = i
        prefix_arg[i] = best
    cnt = np.searchsorted(ft_sorted, st, side="left")  # ops with ft < st
    bad = np.nonzero((cnt > 0) & (prefix_max[np.clip(cnt - 1, 0, None)] > pos))[0]
    out = []
    for b in bad:
        earlier = pos_by_ft[prefix_arg[cnt[b] - 1]]
        out.append((int(idx[earlier]), int(idx[b])))
    return out


def _check_key(trace: Trace, key: int) -> tuple[list[Violation], Counter]:
    sched = _schedule(trace, key)
    rows, slots = _flatten(trace, sched)
    viol = []
    hist: Counter = Counter()
    for row, s in zip(rows, slots):
        if trace.is_write[row]:
            continue
        stale = s - int(trace.version[row])
        hist[stale] += 1
        if stale >= 2:
            viol.append(
                Violation(
                    int(trace.op_id[row]),
                    key,
                    "stale",
                    f"returned version {trace.version[row]} but the latest preceding write is {s}",
                )
            )
    for o1, o2 in _real_time_violations(trace, rows):
        viol.append(
            Violation(
                int(trace.op_id[o2]),
                key,
                "real-time",
                f"op {trace.op_id[o1]} precedes op {trace.op_id[o2]} but is ordered after it",
            )
        )
    return viol, hist


def verify_2atomicity(trace: Trace) -> TwoAtomicityResult:
    trace.validate()
    violations = []
    for k in trace.keys():
        v, _ = _check_key(trace, k)
        violations.extend(v)
    return TwoAtomicityResult(not violations, violations)


def staleness_histogram(trace: Trace) -> Counter:
    """Map staleness k (versions behind the permutation's latest write) to read count."""
    trace.validate()
    hist: Counter = Counter()
    for k in trace.keys():
        _, h = _check_key(trace, k)
        hist.update(h)
    return hist


def verify_atomicity(trace: Trace) -> AtomicityResult:
    trace.validate()
    report = pattern_stats(trace)
    hist = staleness_histogram(trace)
    stale = sum(c for k, c in hist.items() if k > 0)
    return AtomicityResult(report.rwps == 0 and stale == 0, report.rwps, stale)


# --------------------------------------------------------------------------
# latency


@dataclass
class LatencySummary:
    count: int
    p25: float
    p50: float
    p75: float
    whisker_low: float
    whisker_high: float
    mean: float
    minimum: float
    maximum: float
    empty: bool = False


def _summarize(lat: np.ndarray) -> LatencySummary:
    if not len(lat):
        nan = float("nan")
        return LatencySummary(0, nan, nan, nan, nan, nan, nan, nan, nan, empty=True)
    p25, p50, p75 = (float(x) for x in np.percentile(lat, [25, 50, 75]))
    iqr = p75 - p25
    # whiskers reach the furthest data point within 1.5 IQR of the box
    lo = float(lat[lat >= p25 - 1.5 * iqr].min())
    hi = float(lat[lat <= p75 + 1.5 * iqr].max())
    return LatencySummary(
        len(lat), p25, p50, p75, lo, hi, float(lat.mean()), float(lat.min()), float(lat.max())
    )


def latency_stats(trace: Trace) -> dict[str, LatencySummary]:
    """Percentile summary of response - invoke, per kind ("read", "write")."""
    lat = trace.response - trace.invoke
    return {
        "read": _summarize(lat[~trace.is_write]),
        "write": _summarize(lat[trace.is_write]),
    }
