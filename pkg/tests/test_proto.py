import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twoam.proto import (
    Message,
    MsgKind,
    Protocol,
    ProtocolError,
    Reader,
    Replica,
    VersionedValue,
    WellFormednessError,
    Writer,
    quorum_size,
)

REPLICAS = ["s0", "s1", "s2", "s3", "s4"]


def deliver_all(msgs, replicas, order=None):
    """Deliver requests to replicas, return their replies (optionally shuffled)."""
    replies = []
    for m in msgs:
        replies.extend(replicas[m.receiver].on_message(m))
    if order is not None:
        order.shuffle(replies)
    return replies


@pytest.mark.parametrize("n,q", [(1, 1), (2, 2), (3, 2), (4, 3), (5, 3), (15, 8)])
def test_quorum_size(n, q):
    assert quorum_size(n) == q


def test_protocol_parse():
    assert Protocol.parse("2am") is Protocol.TWO_AM
    assert Protocol.parse("ABD") is Protocol.ABD
    with pytest.raises(ValueError):
        Protocol.parse("paxos")


def test_replica_initial_state_and_query():
    r = Replica("s0")
    [reply] = r.on_message(Message(MsgKind.QUERY, "c1", "s0", 7, 0))
    assert reply.kind is MsgKind.QUERY_REPLY
    assert reply.payload == VersionedValue(0, None, 0)
    assert (reply.receiver, reply.op_id) == ("c1", 7)


def test_replica_ignores_older_versions_but_acks():
    r = Replica("s0")
    new, old = VersionedValue(0, "b", 2), VersionedValue(0, "a", 1)
    r.on_message(Message(MsgKind.UPDATE, "c0", "s0", 1, 0, new))
    [ack] = r.on_message(Message(MsgKind.UPDATE, "c0", "s0", 2, 0, old))
    assert ack.kind is MsgKind.ACK
    assert r.get(0) == new


def test_replica_write_back_ack_kind():
    r = Replica("s0")
    [ack] = r.on_message(Message(MsgKind.WRITE_BACK, "c1", "s0", 3, 0, VersionedValue(0, 1, 1)))
    assert ack.kind is MsgKind.WRITE_BACK_ACK


def test_replica_rejects_unknown_and_crashed():
    r = Replica("s0")
    with pytest.raises(ProtocolError):
        r.on_message(Message(MsgKind.ACK, "c1", "s0", 1, 0))
    r.crashed = True
    assert r.on_message(Message(MsgKind.QUERY, "c1", "s0", 1, 0)) == []


def test_write_completes_on_quorum_of_acks():
    replicas = {s: Replica(s) for s in REPLICAS}
    w = Writer("c0", REPLICAS)
    msgs = w.write(0, "x", op_id=1)
    assert len(msgs) == 5 and all(m.payload.version == 1 for m in msgs)
    acks = deliver_all(msgs, replicas)
    done = [w.on_message(a)[1] for a in acks]
    assert [d is not None for d in done] == [False, False, True, False, False]
    assert w.pending is None


def test_write_versions_increase_per_key():
    w = Writer("c0", REPLICAS[:1])
    replicas = {"s0": Replica("s0")}
    for expect in (1, 2):
        [ack] = deliver_all(w.write("k", expect, op_id=expect), replicas)
        w.on_message(ack)
        assert replicas["s0"].get("k").version == expect
    [m] = w.write("other", 0, op_id=3)
    assert m.payload.version == 1


def test_two_pending_ops_rejected():
    r = Reader("c1", REPLICAS, "2AM")
    r.read(0, 1)
    with pytest.raises(WellFormednessError):
        r.read(0, 2)


def test_2am_read_takes_max_of_quorum():
    replicas = {s: Replica(s) for s in REPLICAS}
    # s0 has version 2, s1 version 1, others nothing
    replicas["s0"].store[0] = VersionedValue(0, "b", 2)
    replicas["s1"].store[0] = VersionedValue(0, "a", 1)
    r = Reader("c1", REPLICAS, Protocol.TWO_AM)
    replies = deliver_all(r.read(0, 5), replicas)
    out = None
    for rep in replies:
        msgs, done = r.on_message(rep)
        assert msgs == []
        out = out or done
    assert out.chosen.version == 2


def test_2am_read_ignores_late_and_duplicate_replies():
    replicas = {s: Replica(s) for s in REPLICAS}
    r = Reader("c1", REPLICAS, "2AM")
    replies = deliver_all(r.read(0, 5), replicas)
    assert r.on_message(replies[0])[1] is None
    assert r.on_message(replies[0])[1] is None  # duplicate
    assert r.on_message(replies[1])[1] is None
    assert r.on_message(replies[2])[1] is not None
    assert r.on_message(replies[3]) == ([], None)  # late


def test_abd_read_writes_back_before_returning():
    replicas = {s: Replica(s) for s in REPLICAS}
    replicas["s4"].store[0] = VersionedValue(0, "z", 3)
    r = Reader("c1", REPLICAS, "ABD")
    replies = deliver_all(r.read(0, 9), replicas)
    # make sure the quorum includes s4
    replies.sort(key=lambda m: m.sender != "s4")
    wb = []
    for rep in replies[:3]:
        msgs, done = r.on_message(rep)
        assert done is None
        wb.extend(msgs)
    assert len(wb) == 5 and all(m.kind is MsgKind.WRITE_BACK for m in wb)
    assert all(m.payload.version == 3 for m in wb)
    # remaining phase-1 replies are ignored in phase 2
    assert r.on_message(replies[3]) == ([], None)
    acks = deliver_all(wb, replicas)
    finished = [r.on_message(a)[1] for a in acks]
    assert sum(f is not None for f in finished) == 1
    assert sum(rep.get(0).version == 3 for rep in replicas.values()) == 5


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 20), max_size=30), st.randoms(use_true_random=False))
def test_replica_version_is_monotone_under_any_order(versions, rnd):
    r = Replica("s0")
    seen = 0
    msgs = [Message(MsgKind.UPDATE, "c0", "s0", i, 0, VersionedValue(0, v, v))
            for i, v in enumerate(versions)]
    rnd.shuffle(msgs)
    for m in msgs:
        before = r.get(0).version
        r.on_message(m)
        after = r.get(0).version
        assert after >= before
        seen = max(seen, m.payload.version)
        assert after == seen


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_any_quorum_completes_read_with_latest_written_version(n, seed):
    rng = random.Random(seed)
    ids = [f"s{i}" for i in range(n)]
    replicas = {s: Replica(s) for s in ids}
    # a completed write reached some quorum; the other replicas never saw it
    for s in rng.sample(ids, quorum_size(n)):
        replicas[s].store[0] = VersionedValue(0, "v", 1)
    r = Reader("c1", ids, "2AM")
    replies = deliver_all(r.read(0, 2), replicas, order=rng)
    for rep in replies:
        _, done = r.on_message(rep)
        if done:
            # any two majorities intersect
            assert done.chosen.version == 1
            break
    else:
        pytest.fail("read never completed")
