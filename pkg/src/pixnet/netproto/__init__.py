"""Task distribution between one server and many tile workers."""

from .messages import ResultEnvelope, TileTask, WorkerState, WorkerStatus, make_task_id
from .wire import PROTOCOL_VERSION, FrameDecoder, MsgType, decode_payload, encode

__all__ = [
    "PROTOCOL_VERSION",
    "FrameDecoder",
    "MsgType",
    "ResultEnvelope",
    "TileTask",
    "WorkerState",
    "WorkerStatus",
    "decode_payload",
    "encode",
    "make_task_id",
]
