"""Wire protocol v1 framing.

Every message is ``u32 payload_length | u8 message_type | payload`` with the
length big-endian and the payload UTF-8 JSON. The length counts payload bytes
only. Payload key sets are exact; unknown or missing keys are rejected.
"""

from __future__ import annotations

import enum
import json
import socket
import struct

from ..errors import FramingError, ProtocolViolation

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">IB")
MAX_PAYLOAD = 1 << 30


class MsgType(enum.IntEnum):
    HELLO = 0x01
    ACK = 0x02
    TASK = 0x03
    RESULT = 0x04
    HEARTBEAT = 0x05
    DRAIN = 0x06
    ERROR = 0x07


_TASK_BASE = {"task_id", "run_id", "tile_row", "tile_col", "config_digest", "payload_mode"}

# allowed exact key sets per message type
SCHEMAS = {
    MsgType.HELLO: [{"version", "capabilities"}],
    MsgType.ACK: [{"worker_id"}, {"task_id"}],
    MsgType.TASK: [_TASK_BASE | {"data_b64"}, _TASK_BASE | {"path"}],
    MsgType.RESULT: [{"task_id", "worker_id", "stats", "candidates"}],
    MsgType.HEARTBEAT: [{"worker_id"}],
    MsgType.DRAIN: [set()],
    MsgType.ERROR: [{"code", "detail"}],
}


def validate(mtype: MsgType, payload) -> None:
    if not isinstance(payload, dict):
        raise ProtocolViolation(f"{mtype.name} payload must be a JSON object")
    keys = set(payload)
    if keys not in SCHEMAS[mtype]:
        allowed = " or ".join(str(sorted(s)) for s in SCHEMAS[mtype])
        raise ProtocolViolation(f"{mtype.name} keys {sorted(keys)}; expected {allowed}")
    if mtype is MsgType.TASK:
        mode = payload["payload_mode"]
        if (mode == "inline") != ("data_b64" in payload) or mode not in ("inline", "path"):
            raise ProtocolViolation(f"TASK payload_mode {mode!r} inconsistent with payload keys")


def encode(mtype: MsgType, payload: dict) -> bytes:
    mtype = MsgType(mtype)
    validate(mtype, payload)
    body = json.dumps(payload, separators=(",", ":"), allow_nan=False).encode("utf-8")
    if len(body) > MAX_PAYLOAD:
        raise FramingError(f"payload of {len(body)} bytes exceeds limit")
    return HEADER.pack(len(body), int(mtype)) + body


def decode_payload(mtype_code: int, body: bytes):
    try:
        mtype = MsgType(mtype_code)
    except ValueError:
        raise ProtocolViolation(f"unknown message type 0x{mtype_code:02x}") from None
    try:
        payload = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolViolation(f"{mtype.name} payload is not UTF-8 JSON: {exc}") from None
    validate(mtype, payload)
    return mtype, payload


class FrameDecoder:
    """Incremental parser: feed arbitrary chunks, collect complete messages."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER.size:
            length, code = HEADER.unpack_from(self._buf)
            if length > MAX_PAYLOAD:
                raise FramingError(f"declared payload {length} exceeds limit")
            end = HEADER.size + length
            if len(self._buf) < end:
                break
            body = bytes(self._buf[HEADER.size:end])
            del self._buf[:end]
            out.append(decode_payload(code, body))
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed by peer")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def recv_message(sock: socket.socket):
    """Blocking read of one message; raises ``ConnectionError`` on EOF."""
    length, code = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if length > MAX_PAYLOAD:
        raise FramingError(f"declared payload {length} exceeds limit")
    return decode_payload(code, _recv_exact(sock, length))


def send_message(sock: socket.socket, mtype: MsgType, payload: dict) -> None:
    sock.sendall(encode(mtype, payload))


def error_payload(exc_or_code, detail: str = "") -> dict:
    if isinstance(exc_or_code, Exception):
        return {"code": getattr(exc_or_code, "code", type(exc_or_code).__name__), "detail": str(exc_or_code)}
    return {"code": str(exc_or_code), "detail": detail}
