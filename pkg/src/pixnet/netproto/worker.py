"""Worker loop: pull tile tasks, process them, return result envelopes."""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Callable

from ..errors import ConfigMismatch, ProtocolError, ProtocolViolation
from .messages import ResultEnvelope, TileTask
from .wire import PROTOCOL_VERSION, MsgType, error_payload, recv_message, send_message

log = logging.getLogger(__name__)

# (task) -> (candidate records, stats)
ProcessFn = Callable[[TileTask], tuple]


class _Heartbeat(threading.Thread):
    def __init__(self, send, worker_id: str, interval: float):
        super().__init__(name=f"heartbeat-{worker_id}", daemon=True)
        self.send = send
        self.worker_id = worker_id
        self.interval = interval
        self.stop = threading.Event()

    def run(self):
        while not self.stop.wait(self.interval):
            try:
                self.send(MsgType.HEARTBEAT, {"worker_id": self.worker_id})
            except OSError:
                return


def _raise_error(payload: dict):
    code = payload["code"]
    for cls in ProtocolError.__subclasses__():
        if cls.code == code:
            raise cls(payload["detail"])
    raise ProtocolError(f"{code}: {payload['detail']}")


def run_worker(host: str, port: int, process: ProcessFn, config_digest: str,
               heartbeat_interval: float = 2.0, connect_timeout: float = 10.0) -> int:
    """Serve tasks until the server sends DRAIN; return the number processed.

    Tasks whose config digest differs from ``config_digest`` are refused
    with a ConfigMismatch error and the worker stops.
    """
    sock = socket.create_connection((host, port), timeout=connect_timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    lock = threading.Lock()

    def send(mtype, payload):
        with lock:
            send_message(sock, mtype, payload)

    processed = 0
    beat = None
    try:
        send(MsgType.HELLO, {"version": PROTOCOL_VERSION, "capabilities": ["inline", "path"]})
        mtype, payload = recv_message(sock)
        if mtype is MsgType.ERROR:
            _raise_error(payload)
        if mtype is not MsgType.ACK or "worker_id" not in payload:
            raise ProtocolViolation(f"expected ACK with worker_id, got {mtype.name}")
        worker_id = payload["worker_id"]
        beat = _Heartbeat(send, worker_id, heartbeat_interval)
        beat.start()

        while True:
            send(MsgType.ACK, {"worker_id": worker_id})
            mtype, payload = recv_message(sock)
            if mtype is MsgType.DRAIN:
                return processed
            if mtype is MsgType.ERROR:
                _raise_error(payload)
            if mtype is not MsgType.TASK:
                raise ProtocolViolation(f"expected TASK or DRAIN, got {mtype.name}")
            task = TileTask.from_payload(payload)
            if task.config_digest != config_digest:
                exc = ConfigMismatch(f"task digest {task.config_digest} != worker digest {config_digest}")
                send(MsgType.ERROR, error_payload(exc))
                raise exc
            started = time.perf_counter()
            candidates, stats = process(task)
            env = ResultEnvelope(task.task_id, worker_id, candidates, stats, time.perf_counter() - started)
            send(MsgType.RESULT, env.to_payload())
            mtype, payload = recv_message(sock)
            if mtype is MsgType.DRAIN:
                return processed + 1
            if mtype is MsgType.ERROR:
                log.warning("server refused result for task %d: %s", task.task_id, payload["detail"])
            elif mtype is not MsgType.ACK:
                raise ProtocolViolation(f"expected ACK for result, got {mtype.name}")
            processed += 1
    finally:
        if beat is not None:
            beat.stop.set()
        sock.close()
