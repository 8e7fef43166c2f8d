"""Task queue state machine and the threaded TCP server around it."""

from __future__ import annotations

import collections
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..errors import (
    BindFailure,
    FramingError,
    ProtocolError,
    ProtocolViolation,
    RunAborted,
    UnknownTask,
    UnknownWorker,
    VersionMismatch,
)
from .messages import ResultEnvelope, WorkerState, WorkerStatus, stats_consistent
from .wire import PROTOCOL_VERSION, MsgType, error_payload, recv_message, send_message

log = logging.getLogger(__name__)

DRAIN = "drain"


@dataclass
class QueueEvent:
    time: float
    event: str  # assigned | completed | duplicate | requeued | rejected
    task_id: int
    worker_id: str
    tile: tuple


class TaskQueue:
    """Serialized task bookkeeping; every public method takes the queue lock.

    Tasks are handed out in the order given (row-major tile order). A worker
    silent for longer than ``heartbeat_timeout`` becomes Suspect; after one
    more missed heartbeat interval it is Dead and its task goes back to the
    front of the queue with one retry fewer.
    """

    def __init__(self, tasks, heartbeat_interval: float = 2.0, heartbeat_timeout: float = 5.0,
                 retry_budget: int = 3):
        self.tasks = collections.OrderedDict((t.task_id, t) for t in tasks)
        for t in self.tasks.values():
            t.retries_left = retry_budget
        self.pending = collections.deque(self.tasks)
        self.owners: dict = {}  # task_id -> set of worker ids currently holding it
        self.completed: dict = {}  # task_id -> worker id whose result was stored
        self.workers: dict = {}
        self.events: list = []
        self.heartbeat_interval = heartbeat_interval
        self.heartbeat_timeout = heartbeat_timeout
        self.aborted: Optional[str] = None
        self.lock = threading.RLock()
        self._next_worker = 0

    # -- helpers

    def _log(self, now, event, task_id, worker_id):
        t = self.tasks[task_id]
        self.events.append(QueueEvent(now, event, task_id, worker_id, (t.tile_row, t.tile_col)))

    def _worker(self, worker_id) -> WorkerState:
        try:
            return self.workers[worker_id]
        except KeyError:
            raise UnknownWorker(f"unknown worker {worker_id!r}") from None

    def _fail(self, worker: WorkerState, now: float) -> Optional[int]:
        """Release ``worker``'s task back to the front of the queue."""
        task_id = worker.current_task
        worker.current_task = None
        if task_id is None:
            return None
        self.owners.get(task_id, set()).discard(worker.worker_id)
        if task_id in self.completed or self.owners.get(task_id):
            return None
        task = self.tasks[task_id]
        task.retries_left -= 1
        self._log(now, "requeued", task_id, worker.worker_id)
        if task.retries_left <= 0:
            self.aborted = f"task for tile ({task.tile_row}, {task.tile_col}) exhausted its retry budget"
            return task_id
        if task_id not in self.pending:
            self.pending.appendleft(task_id)
        return task_id

    def _touch(self, worker: WorkerState, now: float) -> None:
        worker.last_heartbeat = now
        if worker.status in (WorkerStatus.SUSPECT, WorkerStatus.DEAD):
            worker.status = WorkerStatus.BUSY if worker.current_task is not None else WorkerStatus.IDLE

    # -- operations

    @property
    def done(self) -> bool:
        return len(self.completed) == len(self.tasks)

    def check(self) -> None:
        if self.aborted:
            raise RunAborted(self.aborted)

    def register(self, now: float) -> str:
        with self.lock:
            self._next_worker += 1
            wid = f"w{self._next_worker}"
            self.workers[wid] = WorkerState(wid, now)
            return wid

    def assign_next(self, worker_id: str, now: float):
        """Next task for an idle worker, ``DRAIN`` when everything is
        complete, or ``None`` when the remaining tasks are all in flight."""
        with self.lock:
            worker = self._worker(worker_id)
            if worker.current_task is not None:
                raise ProtocolViolation(f"worker {worker_id} requested work while busy")
            self._touch(worker, now)
            if self.aborted:
                return DRAIN
            while self.pending:
                task_id = self.pending.popleft()
                if task_id in self.completed:
                    continue
                worker.current_task = task_id
                worker.status = WorkerStatus.BUSY
                worker.history.add(task_id)
                worker.waiting = False
                self.owners.setdefault(task_id, set()).add(worker_id)
                self._log(now, "assigned", task_id, worker_id)
                return self.tasks[task_id]
            if self.done:
                worker.waiting = False
                return DRAIN
            worker.waiting = True
            return None

    def submit_result(self, worker_id: str, envelope: ResultEnvelope, now: float,
                      on_store: Optional[Callable[[ResultEnvelope], None]] = None) -> str:
        """Returns ``stored``, ``duplicate`` or ``rejected``.

        The first result for a task wins; ``on_store`` runs under the queue
        lock so the catalog sees each task exactly once.
        """
        with self.lock:
            worker = self._worker(worker_id)
            task_id = envelope.task_id
            if envelope.worker_id != worker_id:
                raise ProtocolViolation(f"result names worker {envelope.worker_id!r}, sent by {worker_id!r}")
            if task_id not in worker.history:
                raise UnknownTask(f"task {task_id} was never assigned to {worker_id}")
            self._touch(worker, now)
            holding = worker.current_task == task_id
            if task_id in self.completed:
                if holding:
                    worker.current_task = None
                    worker.status = WorkerStatus.IDLE
                    self.owners.get(task_id, set()).discard(worker_id)
                self._log(now, "duplicate", task_id, worker_id)
                return "duplicate"
            ok = stats_consistent(envelope.stats)
            if ok and on_store is not None:
                try:
                    on_store(envelope)
                except Exception as exc:  # a malformed result must not take the server down
                    log.warning("result for task %d from %s rejected: %s", task_id, worker_id, exc)
                    ok = False
            if not ok:
                self._log(now, "rejected", task_id, worker_id)
                if holding:
                    self._fail(worker, now)
                worker.status = WorkerStatus.SUSPECT
                return "rejected"
            self.completed[task_id] = worker_id
            self.owners.pop(task_id, None)
            if task_id in self.pending:
                self.pending.remove(task_id)
            if holding:
                worker.current_task = None
            worker.status = WorkerStatus.IDLE
            self._log(now, "completed", task_id, worker_id)
            return "stored"

    def heartbeat(self, worker_id: str, now: float) -> None:
        with self.lock:
            self._touch(self._worker(worker_id), now)

    def reap(self, now: float) -> list:
        """Mark silent workers Suspect, then Dead; return requeued task ids."""
        requeued = []
        with self.lock:
            for worker in self.workers.values():
                if worker.status is WorkerStatus.DEAD:
                    continue
                silent = now - worker.last_heartbeat
                if silent > self.heartbeat_timeout + self.heartbeat_interval:
                    worker.status = WorkerStatus.DEAD
                    worker.waiting = False
                    tid = self._fail(worker, now)
                    if tid is not None:
                        requeued.append(tid)
                elif silent > self.heartbeat_timeout:
                    worker.status = WorkerStatus.SUSPECT
        return requeued

    def disconnect(self, worker_id: str, now: float) -> Optional[int]:
        with self.lock:
            worker = self.workers.get(worker_id)
            if worker is None:
                return None
            worker.status = WorkerStatus.DEAD
            worker.waiting = False
            return self._fail(worker, now)

    def live_workers(self) -> int:
        with self.lock:
            return sum(w.status is not WorkerStatus.DEAD for w in self.workers.values())

    def waiting_workers(self) -> list:
        with self.lock:
            return [w.worker_id for w in self.workers.values()
                    if w.waiting and w.status is not WorkerStatus.DEAD]

    def assignment_history(self) -> list:
        with self.lock:
            return [{"time": e.time, "event": e.event, "task_id": e.task_id, "worker_id": e.worker_id,
                     "tile": list(e.tile)} for e in self.events]


class _Session:
    def __init__(self, sock: socket.socket, addr):
        self.sock = sock
        self.addr = addr
        self.worker_id: Optional[str] = None
        self.send_lock = threading.Lock()
        self.open = True
        self.drained = False

    def send(self, mtype: MsgType, payload: dict) -> bool:
        with self.send_lock:
            if not self.open:
                return False
            try:
                send_message(self.sock, mtype, payload)
                return True
            except OSError:
                return False

    def close(self):
        with self.send_lock:
            self.open = False
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


@dataclass
class ServeSummary:
    completed: dict
    history: list
    workers: list
    wall_time: float
    aborted: Optional[str] = None
    extra: dict = field(default_factory=dict)


class TaskServer:
    """Connection-concurrent server; one reader thread per worker connection."""

    def __init__(self, queue: TaskQueue, on_result: Optional[Callable[[ResultEnvelope], None]] = None,
                 bind=("127.0.0.1", 0), worker_deadline: float = 30.0, reap_interval: Optional[float] = None,
                 clock: Callable[[], float] = time.monotonic):
        self.queue = queue
        self.on_result = on_result
        self.bind_addr = bind
        self.worker_deadline = worker_deadline
        self.reap_interval = reap_interval or min(queue.heartbeat_interval, 1.0)
        self.clock = clock
        self.sessions: dict = {}
        self._threads: list = []
        self._stop = threading.Event()
        self._changed = threading.Condition()
        self._listener: Optional[socket.socket] = None

    @property
    def address(self):
        return self._listener.getsockname()

    def start(self) -> "TaskServer":
        try:
            lst = socket.create_server(self.bind_addr, reuse_port=False)
        except OSError as exc:
            raise BindFailure(f"cannot bind {self.bind_addr[0]}:{self.bind_addr[1]}: {exc}") from exc
        lst.settimeout(0.2)
        self._listener = lst
        for target, name in ((self._accept_loop, "accept"), (self._reap_loop, "reaper")):
            th = threading.Thread(target=target, name=name, daemon=True)
            th.start()
            self._threads.append(th)
        return self

    def _notify(self):
        with self._changed:
            self._changed.notify_all()

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sess = _Session(conn, addr)
            th = threading.Thread(target=self._session_loop, args=(sess,), daemon=True)
            th.start()

    def _reap_loop(self):
        while not self._stop.wait(self.reap_interval):
            if self.queue.reap(self.clock()):
                self._dispatch_waiting()
            self._notify()

    def _dispatch_waiting(self):
        for wid in self.queue.waiting_workers():
            sess = self.sessions.get(wid)
            if sess is None:
                continue
            try:
                nxt = self.queue.assign_next(wid, self.clock())
            except ProtocolError:
                continue
            self._send_assignment(sess, nxt)

    def _send_assignment(self, sess: _Session, nxt) -> None:
        if nxt is None:
            return
        if nxt == DRAIN:
            sess.drained = sess.send(MsgType.DRAIN, {})
        elif not sess.send(MsgType.TASK, nxt.to_payload()):
            self.queue.disconnect(sess.worker_id, self.clock())

    def _session_loop(self, sess: _Session):
        try:
            while not self._stop.is_set():
                try:
                    mtype, payload = recv_message(sess.sock)
                except FramingError as exc:
                    sess.send(MsgType.ERROR, error_payload(exc))
                    break
                except ProtocolViolation as exc:
                    sess.send(MsgType.ERROR, error_payload(exc))
                    continue
                try:
                    if not self._handle(sess, mtype, payload):
                        break
                except VersionMismatch as exc:
                    sess.send(MsgType.ERROR, error_payload(exc))
                    break
                except ProtocolError as exc:
                    sess.send(MsgType.ERROR, error_payload(exc))
        except (ConnectionError, OSError):
            pass
        finally:
            if sess.worker_id is not None and self.sessions.get(sess.worker_id) is sess:
                if self.queue.disconnect(sess.worker_id, self.clock()) is not None:
                    self._dispatch_waiting()
            sess.close()
            self._notify()

    def _handle(self, sess: _Session, mtype: MsgType, payload: dict) -> bool:
        now = self.clock()
        if mtype is MsgType.HELLO:
            if sess.worker_id is not None:
                raise ProtocolViolation("duplicate HELLO on this connection")
            if payload["version"] != PROTOCOL_VERSION:
                raise VersionMismatch(f"server speaks v{PROTOCOL_VERSION}, worker sent v{payload['version']}")
            sess.worker_id = self.queue.register(now)
            self.sessions[sess.worker_id] = sess
            sess.send(MsgType.ACK, {"worker_id": sess.worker_id})
            self._notify()
            return True
        if sess.worker_id is None:
            raise ProtocolViolation(f"{mtype.name} before HELLO")
        if mtype in (MsgType.HEARTBEAT, MsgType.ACK, MsgType.RESULT) and "worker_id" in payload \
                and payload["worker_id"] != sess.worker_id:
            raise ProtocolViolation(f"message names worker {payload['worker_id']!r} on {sess.worker_id}'s connection")
        if mtype is MsgType.HEARTBEAT:
            self.queue.heartbeat(sess.worker_id, now)
            return True
        if mtype is MsgType.ACK:
            if "worker_id" not in payload:
                raise ProtocolViolation("workers acknowledge with their worker_id to request work")
            self._send_assignment(sess, self.queue.assign_next(sess.worker_id, now))
            return True
        if mtype is MsgType.RESULT:
            env = ResultEnvelope.from_payload(payload)
            outcome = self.queue.submit_result(sess.worker_id, env, now, self.on_result)
            if outcome == "rejected":
                sess.send(MsgType.ERROR, {"code": ProtocolViolation.code,
                                          "detail": f"result for task {env.task_id} rejected: inconsistent counters"})
            else:
                sess.send(MsgType.ACK, {"task_id": env.task_id})
            self._dispatch_waiting()
            self._notify()
            return True
        if mtype is MsgType.ERROR:
            log.warning("worker %s reported %s: %s", sess.worker_id, payload["code"], payload["detail"])
            self.queue.disconnect(sess.worker_id, now)
            self._dispatch_waiting()
            self._notify()
            return False
        raise ProtocolViolation(f"{mtype.name} is not valid from a worker")

    def wait(self, timeout: Optional[float] = None) -> ServeSummary:
        """Block until every task is complete; raise ``RunAborted`` when the
        retry budget runs out or no worker is alive for ``worker_deadline``."""
        start = self.clock()
        lonely_since = start
        with self._changed:
            while True:
                now = self.clock()
                self.queue.check()
                if self.queue.done:
                    break
                if self.queue.live_workers() == 0:
                    if now - lonely_since > self.worker_deadline:
                        raise RunAborted(f"no live worker for {self.worker_deadline:g} s")
                else:
                    lonely_since = now
                if timeout is not None and now - start > timeout:
                    raise RunAborted(f"run did not finish within {timeout:g} s")
                self._changed.wait(0.2)
        self._dispatch_waiting()
        return ServeSummary(dict(self.queue.completed), self.queue.assignment_history(),
                            sorted(self.queue.workers), self.clock() - start)

    def shutdown(self, grace: float = 2.0) -> None:
        """Give connected workers ``grace`` seconds to ask for work and be
        told to drain, then close everything."""
        if self.queue.done:
            deadline = time.monotonic() + grace
            while time.monotonic() < deadline and any(
                s.open and not s.drained for s in list(self.sessions.values())
            ):
                time.sleep(0.02)
        self._stop.set()
        for sess in list(self.sessions.values()):
            if not sess.drained:
                sess.send(MsgType.DRAIN, {})
            sess.close()
        if self._listener is not None:
            self._listener.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()


def serve(tasks, on_result=None, bind=("127.0.0.1", 0), heartbeat_interval=2.0, heartbeat_timeout=5.0,
          retry_budget=3, worker_deadline=30.0, on_ready: Optional[Callable[[tuple], None]] = None) -> ServeSummary:
    """Run a task set to completion; ``on_ready`` receives the bound address."""
    queue = TaskQueue(tasks, heartbeat_interval, heartbeat_timeout, retry_budget)
    server = TaskServer(queue, on_result, bind, worker_deadline)
    with server:
        if on_ready is not None:
            on_ready(server.address)
        return server.wait()
