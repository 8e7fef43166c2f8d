import socket
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixnet.errors import (
    BindFailure,
    ConfigMismatch,
    FramingError,
    ProtocolViolation,
    RunAborted,
    UnknownTask,
    UnknownWorker,
)
from pixnet.netproto import FrameDecoder, MsgType, ResultEnvelope, TileTask, encode, make_task_id
from pixnet.netproto.server import DRAIN, TaskQueue, TaskServer
from pixnet.netproto.wire import HEADER, decode_payload, recv_message, send_message
from pixnet.netproto.worker import run_worker

from conftest import make_stack

GOOD_STATS = {"curves_built": 10, "peak_curves": 3, "peaks_found": 4, "fits_attempted": 3, "events_accepted": 1}

FIXTURES = [
    (MsgType.HELLO, {"version": 1, "capabilities": ["inline", "path"]}),
    (MsgType.ACK, {"worker_id": "w1"}),
    (MsgType.ACK, {"task_id": 12345}),
    (MsgType.TASK, {"task_id": 7, "run_id": "r", "tile_row": 0, "tile_col": 1, "config_digest": "abc",
                    "payload_mode": "inline", "data_b64": "AAEC"}),
    (MsgType.TASK, {"task_id": 8, "run_id": "r", "tile_row": 1, "tile_col": 1, "config_digest": "abc",
                    "payload_mode": "path", "path": "/tmp/x.pxt"}),
    (MsgType.RESULT, {"task_id": 7, "worker_id": "w1", "stats": dict(GOOD_STATS, elapsed=0.5),
                      "candidates": [{"x": 1, "y": 2}]}),
    (MsgType.HEARTBEAT, {"worker_id": "w1"}),
    (MsgType.DRAIN, {}),
    (MsgType.ERROR, {"code": "ProtocolViolation", "detail": "unicode ✓"}),
]


def _tasks(n, run_id="r"):
    return [TileTask(make_task_id(run_id, i // 4, i % 4), run_id, i // 4, i % 4, "d", "inline", b"x")
            for i in range(n)]


def _env(task, wid, stats=GOOD_STATS):
    return ResultEnvelope(task.task_id, wid, [], dict(stats), 0.1)


# -- framing


def test_header_layout():
    buf = encode(MsgType.DRAIN, {})
    assert buf == b"\x00\x00\x00\x02\x06{}"
    length, code = HEADER.unpack(encode(MsgType.ACK, {"worker_id": "w1"})[:5])
    assert code == 2 and length == len(b'{"worker_id":"w1"}')


def test_every_split_parses_identically():
    stream = b"".join(encode(t, p) for t, p in FIXTURES)
    expected = [(MsgType(t), p) for t, p in FIXTURES]
    for cut in range(len(stream) + 1):
        dec = FrameDecoder()
        got = dec.feed(stream[:cut]) + dec.feed(stream[cut:])
        assert got == expected
        assert dec.pending == 0


@settings(max_examples=50, deadline=None)
@given(cuts=st.lists(st.integers(0, 2000), max_size=30))
def test_arbitrary_chunking(cuts):
    stream = b"".join(encode(t, p) for t, p in FIXTURES)
    points = sorted({min(c, len(stream)) for c in cuts} | {0, len(stream)})
    dec = FrameDecoder()
    got = []
    for a, b in zip(points, points[1:]):
        got += dec.feed(stream[a:b])
    assert got == [(MsgType(t), p) for t, p in FIXTURES]


def test_byte_at_a_time():
    stream = b"".join(encode(t, p) for t, p in FIXTURES)
    dec = FrameDecoder()
    got = []
    for i in range(len(stream)):
        got += dec.feed(stream[i : i + 1])
    assert len(got) == len(FIXTURES)


@pytest.mark.parametrize(
    "code,body",
    [
        (0x09, b"{}"),
        (0x01, b"not json"),
        (0x01, b'{"version": 1}'),
        (0x02, b'{"worker_id": "w", "task_id": 1}'),
        (0x06, b'{"extra": 1}'),
        (0x03, b'{"task_id":1,"run_id":"r","tile_row":0,"tile_col":0,"config_digest":"d",'
               b'"payload_mode":"path","data_b64":"AA=="}'),
        (0x05, b"[1, 2]"),
    ],
)
def test_malformed_payloads(code, body):
    with pytest.raises(ProtocolViolation):
        decode_payload(code, body)


def test_oversized_declared_length():
    with pytest.raises(FramingError):
        FrameDecoder().feed(b"\x7f\xff\xff\xff\x01")


def test_task_payload_round_trip():
    task = TileTask(make_task_id("r", 2, 3), "r", 2, 3, "abc", "inline", b"\x00\x01payload")
    back = TileTask.from_payload(encode_and_decode(MsgType.TASK, task.to_payload()))
    assert (back.task_id, back.tile_row, back.tile_col, back.data) == (task.task_id, 2, 3, task.data)
    assert make_task_id("r", 2, 3) < 2**63
    assert make_task_id("r", 2, 3) != make_task_id("r", 3, 2)


def encode_and_decode(mtype, payload):
    return FrameDecoder().feed(encode(mtype, payload))[0][1]


# -- queue state machine on a simulated clock


def test_fresh_queue_hands_out_row_major():
    tasks = _tasks(16)
    q = TaskQueue(tasks)
    w = q.register(0.0)
    first = q.assign_next(w, 0.0)
    assert (first.tile_row, first.tile_col) == (0, 0)
    with pytest.raises(ProtocolViolation):
        q.assign_next(w, 0.1)
    with pytest.raises(UnknownWorker):
        q.assign_next("w99", 0.1)


def test_single_worker_runs_everything_then_drains():
    tasks = _tasks(16)
    q = TaskQueue(tasks)
    w = q.register(0.0)
    order = []
    for i in range(16):
        task = q.assign_next(w, float(i))
        order.append((task.tile_row, task.tile_col))
        assert q.submit_result(w, _env(task, w), float(i)) == "stored"
    assert order == [(r, c) for r in range(4) for c in range(4)]
    assert q.done
    assert q.assign_next(w, 20.0) == DRAIN


def test_waiting_worker_when_all_in_flight():
    q = TaskQueue(_tasks(1))
    a, b = q.register(0.0), q.register(0.0)
    q.assign_next(a, 0.0)
    assert q.assign_next(b, 0.0) is None
    assert q.waiting_workers() == [b]


def test_duplicate_result_after_reassignment():
    tasks = _tasks(2)
    q = TaskQueue(tasks, heartbeat_interval=1.0, heartbeat_timeout=2.0)
    slow, fast = q.register(0.0), q.register(0.0)
    t = q.assign_next(slow, 0.0)
    q.heartbeat(fast, 3.5)
    assert q.reap(3.5) == [t.task_id]
    assert q.assign_next(fast, 3.5).task_id == t.task_id
    stored = []
    assert q.submit_result(fast, _env(t, fast), 4.0, stored.append) == "stored"
    # the slow worker wakes up and reports the same task
    assert q.submit_result(slow, _env(t, slow), 4.1, stored.append) == "duplicate"
    assert len(stored) == 1 and stored[0].worker_id == fast
    assert [e.event for e in q.events if e.task_id == t.task_id] == [
        "assigned", "requeued", "assigned", "completed", "duplicate"]


def test_inconsistent_counters_rejected():
    tasks = _tasks(1)
    q = TaskQueue(tasks)
    w = q.register(0.0)
    t = q.assign_next(w, 0.0)
    bad = dict(GOOD_STATS, events_accepted=5)
    assert q.submit_result(w, _env(t, w, bad), 1.0) == "rejected"
    assert q.workers[w].status.value == "Suspect"
    assert not q.done and list(q.pending) == [t.task_id]


def test_result_for_unassigned_task():
    tasks = _tasks(2)
    q = TaskQueue(tasks)
    w = q.register(0.0)
    q.assign_next(w, 0.0)
    with pytest.raises(UnknownTask):
        q.submit_result(w, _env(tasks[1], w), 0.5)
    with pytest.raises(ProtocolViolation):
        q.submit_result(w, _env(tasks[0], "w2"), 0.5)


def test_fresh_heartbeats_change_nothing():
    q = TaskQueue(_tasks(4), heartbeat_interval=2.0, heartbeat_timeout=5.0)
    ws = [q.register(0.0) for _ in range(3)]
    for w in ws:
        q.assign_next(w, 0.0)
    for now in (2.0, 4.0, 6.0, 8.0):
        for w in ws:
            q.heartbeat(w, now)
        assert q.reap(now) == []
    assert all(q.workers[w].status.value == "Busy" for w in ws)


def test_silent_worker_goes_suspect_then_dead():
    q = TaskQueue(_tasks(2), heartbeat_interval=2.0, heartbeat_timeout=5.0)
    w = q.register(0.0)
    t = q.assign_next(w, 0.0)
    assert q.reap(4.9) == []
    assert q.reap(5.5) == [] and q.workers[w].status.value == "Suspect"
    assert q.reap(7.5) == [t.task_id] and q.workers[w].status.value == "Dead"
    assert q.pending[0] == t.task_id
    assert t.retries_left == 2


def test_retry_budget_exhaustion_aborts():
    tasks = _tasks(1)
    q = TaskQueue(tasks, retry_budget=3)
    for i in range(3):
        w = q.register(float(i))
        assert q.assign_next(w, float(i)).task_id == tasks[0].task_id
        q.disconnect(w, float(i) + 0.5)
    with pytest.raises(RunAborted):
        q.check()
    late = q.register(10.0)
    assert q.assign_next(late, 10.0) == DRAIN


# -- server over real sockets


def _process(task):
    return [], dict(GOOD_STATS)


@pytest.fixture
def server():
    stored = []
    q = TaskQueue(_tasks(16), heartbeat_interval=0.5, heartbeat_timeout=1.5)
    srv = TaskServer(q, stored.append, ("127.0.0.1", 0), worker_deadline=5.0).start()
    srv.stored = stored
    yield srv
    srv.shutdown(grace=0.5)


def _connect(srv):
    sock = socket.create_connection(srv.address, timeout=5)
    return sock


@pytest.mark.parametrize("n_workers", [1, 4])
def test_workers_complete_run(server, n_workers):
    counts = []
    threads = [threading.Thread(target=lambda: counts.append(
        run_worker(*server.address, _process, "d", heartbeat_interval=0.2))) for _ in range(n_workers)]
    for th in threads:
        th.start()
    summary = server.wait(timeout=30)
    for th in threads:
        th.join(timeout=10)
    assert sorted(counts) and sum(counts) == 16
    assert len(summary.completed) == 16
    assert len({e.task_id for e in server.stored}) == len(server.stored) == 16
    completed = [h for h in summary.history if h["event"] == "completed"]
    assert len(completed) == 16


def test_hello_handshake(server):
    with _connect(server) as s:
        send_message(s, MsgType.HELLO, {"version": 1, "capabilities": ["inline"]})
        mtype, payload = recv_message(s)
        assert mtype is MsgType.ACK and payload["worker_id"].startswith("w")
        send_message(s, MsgType.HELLO, {"version": 1, "capabilities": ["inline"]})
        mtype, payload = recv_message(s)
        assert mtype is MsgType.ERROR and payload["code"] == "ProtocolViolation"


def test_version_mismatch_errors_then_closes(server):
    with _connect(server) as s:
        send_message(s, MsgType.HELLO, {"version": 99, "capabilities": []})
        mtype, payload = recv_message(s)
        assert mtype is MsgType.ERROR and payload["code"] == "VersionMismatch"
        with pytest.raises(ConnectionError):
            recv_message(s)


OUT_OF_ORDER = {
    MsgType.ACK: {"worker_id": "w1"},
    MsgType.TASK: FIXTURES[3][1],
    MsgType.RESULT: FIXTURES[5][1],
    MsgType.HEARTBEAT: {"worker_id": "w1"},
    MsgType.DRAIN: {},
}


@pytest.mark.parametrize("mtype", list(OUT_OF_ORDER))
def test_messages_before_hello(server, mtype):
    with _connect(server) as s:
        send_message(s, mtype, OUT_OF_ORDER[mtype])
        reply, payload = recv_message(s)
        assert reply is MsgType.ERROR and payload["code"] == "ProtocolViolation"


@pytest.mark.parametrize("mtype", [MsgType.TASK, MsgType.DRAIN, MsgType.RESULT, MsgType.ACK])
def test_messages_out_of_state_after_hello(server, mtype):
    with _connect(server) as s:
        send_message(s, MsgType.HELLO, {"version": 1, "capabilities": ["inline"]})
        wid = recv_message(s)[1]["worker_id"]
        if mtype is MsgType.RESULT:
            # a result for a task this worker never received
            payload = dict(FIXTURES[5][1], worker_id=wid)
        elif mtype is MsgType.ACK:
            # claim a task id instead of requesting work
            payload = {"task_id": 1}
        else:
            payload = OUT_OF_ORDER[mtype]
        send_message(s, mtype, payload)
        reply, payload = recv_message(s)
        assert reply is MsgType.ERROR
        assert payload["code"] in ("ProtocolViolation", "UnknownTask")


def test_busy_worker_requesting_again(server):
    with _connect(server) as s:
        send_message(s, MsgType.HELLO, {"version": 1, "capabilities": ["inline"]})
        wid = recv_message(s)[1]["worker_id"]
        send_message(s, MsgType.ACK, {"worker_id": wid})
        assert recv_message(s)[0] is MsgType.TASK
        send_message(s, MsgType.ACK, {"worker_id": wid})
        reply, payload = recv_message(s)
        assert reply is MsgType.ERROR and payload["code"] == "ProtocolViolation"


def test_config_mismatch_stops_worker(server):
    with pytest.raises(ConfigMismatch):
        run_worker(*server.address, _process, "other-digest", heartbeat_interval=0.2)


def test_disconnect_mid_task_requeues(server):
    with _connect(server) as s:
        send_message(s, MsgType.HELLO, {"version": 1, "capabilities": ["inline"]})
        wid = recv_message(s)[1]["worker_id"]
        send_message(s, MsgType.ACK, {"worker_id": wid})
        first = recv_message(s)[1]["task_id"]
    n = run_worker(*server.address, _process, "d", heartbeat_interval=0.2)
    summary = server.wait(timeout=30)
    assert n == 16 and len(summary.completed) == 16
    assert summary.completed[first] != wid


def test_no_workers_hits_deadline():
    q = TaskQueue(_tasks(1))
    with TaskServer(q, None, ("127.0.0.1", 0), worker_deadline=0.5) as srv:
        with pytest.raises(RunAborted):
            srv.wait()


def test_bind_failure():
    with TaskServer(TaskQueue(_tasks(1)), None, ("127.0.0.1", 0)) as srv:
        with pytest.raises(BindFailure):
            TaskServer(TaskQueue(_tasks(1)), None, srv.address).start()


def test_tile_bundle_round_trip(rng):
    from pixnet.imagery import TilingConfig, split_stack
    from pixnet.netproto.messages import decode_bundle, encode_bundle

    valid = rng.random((3, 16, 16)) > 0.1
    grid = split_stack(make_stack(rng.normal(size=(3, 16, 16)), valid=valid), TilingConfig(2, 2, 3))
    tile = grid[1][0]
    back = decode_bundle(encode_bundle({"R": tile}))["R"]
    assert back.stack == tile.stack
    assert (back.tile_row, back.tile_col, back.halo, back.core_region) == (1, 0, 3, tile.core_region)
