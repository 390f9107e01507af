"""Central unit: the single writer that owns floor state, journal and dedup.

Both the TCP daemon and the simulator drive a ``CentralUnit``; the transport
only decides how frames arrive and where replies go.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from .allocator import process_scan
from .core import (
    Ack,
    DisplayBoard,
    DisplayUpdate,
    FloorState,
    JournalAppend,
    Notify,
    Reject,
    ScanEvent,
    snapshot,
)
from .journal import AdminMark, Applied, DuplicateAck, Journal, JournalRecord, Rejected, replay
from .protocol import DedupeLedger, Delivery, msg_ack, msg_reject
from .registry import Registry

log = logging.getLogger(__name__)


@dataclass
class Dispatch:
    """What the transport must do after one scan was handled."""

    reply: dict
    board: Optional[DisplayBoard] = None
    notifies: list[Notify] = field(default_factory=list)
    duplicate: bool = False


class CentralUnit:
    def __init__(self, registry: Registry, journal: Optional[Journal] = None,
                 state: Optional[FloorState] = None):
        self.registry = registry
        self.journal = journal if journal is not None else Journal()
        self.state = state if state is not None else FloorState.initial(registry.machines)
        self.ledger = DedupeLedger(self.state.applied)
        self.board = snapshot(self.state)
        self.outbox: list[Notify] = []

    @classmethod
    def recover(cls, registry: Registry, journal: Journal) -> "CentralUnit":
        """Rebuild from an existing journal, including cached replies."""
        state = replay(journal.records, registry)
        unit = cls(registry, journal, state)
        for rec in journal.records:
            ev = rec.event
            if not isinstance(ev, ScanEvent):
                continue
            if isinstance(rec.outcome, Applied):
                unit.ledger.remember_reply(ev.unit_id, ev.unit_seq,
                                           msg_ack(ev.unit_id, ev.unit_seq, rec.outcome.summary))
            elif isinstance(rec.outcome, Rejected):
                unit.ledger.remember_reply(ev.unit_id, ev.unit_seq,
                                           msg_reject(ev.unit_id, ev.unit_seq, rec.outcome.reason))
        return unit

    @property
    def now_floor(self) -> int:
        last = self.journal.records[-1].central_time if self.journal.records else 0
        return max(last, self.state.last_event_time)

    def mark(self, what: str, now: int) -> None:
        now = max(now, self.now_floor)
        self.journal.stamp_and_append(
            JournalRecord(0, now, AdminMark(what, dict(self.registry.machines)))
        )

    def handle_scan(self, ev: ScanEvent, now: int) -> Dispatch:
        if self.ledger.check(ev.unit_id, ev.unit_seq) is Delivery.DUPLICATE:
            self.journal.stamp_and_append(JournalRecord(0, now, ev, DuplicateAck()))
            return Dispatch(self.ledger.reply_for(ev.unit_id, ev.unit_seq), duplicate=True)

        state, effects = process_scan(self.state, self.registry, ev, now)
        reply = None
        out = Dispatch(reply={})
        for eff in effects:
            if isinstance(eff, JournalAppend):
                # write-ahead: the record is durable before any reply is built
                self.journal.stamp_and_append(eff.record)
            elif isinstance(eff, Ack):
                reply = msg_ack(eff.unit_id, eff.unit_seq, eff.result)
            elif isinstance(eff, Reject):
                reply = msg_reject(eff.unit_id, eff.unit_seq, eff.reason)
            elif isinstance(eff, DisplayUpdate):
                out.board = eff.board
            elif isinstance(eff, Notify):
                out.notifies.append(eff)
        self.state = state
        if out.board is not None:
            self.board = out.board
        self.outbox.extend(out.notifies)
        out.reply = reply
        self.ledger.remember_reply(ev.unit_id, ev.unit_seq, reply)
        return out
