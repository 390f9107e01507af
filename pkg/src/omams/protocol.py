"""Framed wire protocol between scan units and the central unit.

Frame layout: a 4-byte big-endian payload length, then that many bytes of
canonical JSON (sorted keys, no whitespace). Every payload carries ``v`` (the
protocol version, 1) and ``t`` (the message type). See docs/protocol.md.
"""

from __future__ import annotations

import json
import struct
from enum import Enum
from typing import Iterator, Mapping, Optional

from .core import BadgeFormat, DisplayBoard, InvalidEvent, OmamsError, ScanEvent, canonical_json

VERSION = 1
HEADER = struct.Struct(">I")
MAX_PAYLOAD = 65_536
SCAN_FRAME_BUDGET = 256

# type -> required fields besides v and t
MESSAGE_FIELDS = {
    "hello": {"unit"},
    "scan": {"event"},
    "ack": {"unit", "seq"},
    "reject": {"unit", "seq", "reason"},
    "board": {"board"},
    "notify": {"operator", "text"},
    "ping": set(),
    "pong": set(),
}
OPTIONAL_FIELDS = {
    "hello": {"role"},
    "ack": {"result"},
}


class ProtocolError(OmamsError):
    pass


class Oversize(ProtocolError):
    pass


class BadJson(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class UnknownType(ProtocolError):
    pass


class BadMessage(ProtocolError):
    pass


def validate_message(msg: Mapping) -> None:
    if not isinstance(msg, Mapping):
        raise BadMessage("message must be a JSON object")
    if msg.get("v") != VERSION or isinstance(msg.get("v"), bool):
        raise BadVersion(f"unsupported protocol version {msg.get('v')!r}")
    t = msg.get("t")
    if t not in MESSAGE_FIELDS:
        raise UnknownType(f"unknown message type {t!r}")
    required = MESSAGE_FIELDS[t]
    allowed = required | OPTIONAL_FIELDS.get(t, set()) | {"v", "t"}
    missing = required - set(msg)
    if missing:
        raise BadMessage(f"{t}: missing fields {sorted(missing)}")
    extra = set(msg) - allowed
    if extra:
        raise BadMessage(f"{t}: unexpected fields {sorted(extra)}")
    if t == "scan":
        try:
            ScanEvent.from_dict(msg["event"])
        except (InvalidEvent, BadgeFormat) as e:
            raise BadMessage(f"scan: {e}") from None
    elif t in ("ack", "reject"):
        if not isinstance(msg["unit"], str) or not isinstance(msg["seq"], int):
            raise BadMessage(f"{t}: unit must be text and seq an integer")


def encode_frame(msg: Mapping) -> bytes:
    validate_message(msg)
    payload = canonical_json(msg).encode("utf-8")
    if len(payload) > MAX_PAYLOAD:
        raise Oversize(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(len(payload)) + payload


def decode_frame(buffer: bytes) -> Optional[tuple[dict, int]]:
    """Decode the first frame in ``buffer``.

    Returns ``(message, consumed)`` or ``None`` when the frame is not complete
    yet. Bytes after the frame are left alone.
    """
    if len(buffer) < HEADER.size:
        return None
    (length,) = HEADER.unpack_from(buffer)
    if length > MAX_PAYLOAD:
        raise Oversize(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
    end = HEADER.size + length
    if len(buffer) < end:
        return None
    try:
        msg = json.loads(bytes(buffer[HEADER.size:end]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BadJson(str(e)) from None
    validate_message(msg)
    return msg, end


class FrameReader:
    """Incremental decoder for a byte stream split at arbitrary points."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> Iterator[dict]:
        self._buf += data
        while True:
            got = decode_frame(self._buf)
            if got is None:
                return
            msg, used = got
            del self._buf[:used]
            yield msg

    @property
    def pending(self) -> int:
        return len(self._buf)


# -- message builders --------------------------------------------------------


def msg_hello(unit: str, role: str = "scan") -> dict:
    return {"v": VERSION, "t": "hello", "unit": unit, "role": role}


def msg_scan(ev: ScanEvent) -> dict:
    return {"v": VERSION, "t": "scan", "event": ev.to_dict()}


def msg_ack(unit: str, seq: int, result: Optional[Mapping] = None) -> dict:
    m = {"v": VERSION, "t": "ack", "unit": unit, "seq": seq}
    if result:
        m["result"] = dict(result)
    return m


def msg_reject(unit: str, seq: int, reason: str) -> dict:
    return {"v": VERSION, "t": "reject", "unit": unit, "seq": seq, "reason": reason}


def msg_board(board: DisplayBoard) -> dict:
    return {"v": VERSION, "t": "board", "board": board.to_dict()}


def msg_notify(operator: str, text: str) -> dict:
    return {"v": VERSION, "t": "notify", "operator": operator, "text": text}


def msg_ping() -> dict:
    return {"v": VERSION, "t": "ping"}


def msg_pong() -> dict:
    return {"v": VERSION, "t": "pong"}


# -- delivery bookkeeping ----------------------------------------------------


class Delivery(Enum):
    FIRST = "FirstDelivery"
    DUPLICATE = "Duplicate"


class DedupeLedger:
    """Which ``(unit_id, unit_seq)`` keys the central unit has seen.

    Seeded from ``FloorState.applied`` after a restart so the two agree. The
    reply sent for each key is cached so a retransmission gets the same
    answer (ack with result, or reject) as the original.
    """

    def __init__(self, applied: Optional[Mapping[str, frozenset]] = None):
        self._seen: dict[str, set[int]] = {u: set(s) for u, s in (applied or {}).items()}
        self._replies: dict[tuple[str, int], dict] = {}

    def check(self, unit_id: str, unit_seq: int) -> Delivery:
        seen = self._seen.setdefault(unit_id, set())
        if unit_seq in seen:
            return Delivery.DUPLICATE
        seen.add(unit_seq)
        return Delivery.FIRST

    def remember_reply(self, unit_id: str, unit_seq: int, reply: dict) -> None:
        self._replies[(unit_id, unit_seq)] = reply

    def reply_for(self, unit_id: str, unit_seq: int) -> dict:
        return self._replies.get((unit_id, unit_seq)) or msg_ack(unit_id, unit_seq)


def dedupe_check(ledger: DedupeLedger, unit_id: str, unit_seq: int) -> Delivery:
    return ledger.check(unit_id, unit_seq)


# -- sender retry policy -----------------------------------------------------

BACKOFF_START_MS = 1_000
BACKOFF_FACTOR = 2
BACKOFF_CAP_MS = 30_000


def backoff_ms(attempt: int) -> int:
    """Wait before retransmission number ``attempt`` (1-based)."""
    return min(BACKOFF_START_MS * BACKOFF_FACTOR ** (attempt - 1), BACKOFF_CAP_MS)
