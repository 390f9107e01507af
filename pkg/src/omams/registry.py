"""Authorized operators, machines and scan units.

Registry file (UTF-8 JSON)::

    {
      "workshops": ["W1", "W2"],
      "machines":  [{"id": "M01", "workshop": "W1"}, ...],
      "operators": [{"badge": "A24564", "name": "...", "workshop": "W1", "active": true}, ...],
      "units":     [{"id": "U1", "workshop": "W1"}, ...]        # optional
    }

``units`` binds a scan unit to the workshop it stands in. A check-in is queued
in the unit's workshop; scans from an unbound unit fall back to the
operator's home workshop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Mapping, Union

from .core import EventKind, OmamsError, ScanEvent, parse_badge_code


class RegistryError(OmamsError):
    pass


class ParseError(RegistryError):
    pass


class DuplicateBadge(RegistryError):
    pass


class DuplicateMachine(RegistryError):
    pass


class UnknownWorkshop(RegistryError):
    pass


class Unauthorized(OmamsError):
    """Badge not accepted; ``reason`` is ``UnknownBadge`` or ``Inactive``."""

    def __init__(self, badge: str, reason: str):
        super().__init__(f"{badge}: {reason}")
        self.badge = badge
        self.reason = reason


@dataclass(frozen=True)
class OperatorRecord:
    badge: str
    name: str
    home_workshop: str
    active: bool = True


@dataclass(frozen=True)
class Registry:
    operators: Mapping[str, OperatorRecord]
    machines: Mapping[str, str]
    workshops: tuple[str, ...] = ()
    units: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "workshops": list(self.workshops),
            "machines": [{"id": m, "workshop": w} for m, w in self.machines.items()],
            "operators": [
                {"badge": r.badge, "name": r.name, "workshop": r.home_workshop, "active": r.active}
                for r in self.operators.values()
            ],
            "units": [{"id": u, "workshop": w} for u, w in self.units.items()],
        }


@dataclass(frozen=True)
class VerifiedScan:
    """A scan whose badge passed ``verify_badge``, resolved to a workshop."""

    event: ScanEvent
    workshop: str

    @property
    def operator(self) -> str:
        return self.event.badge


def _require(d: dict, key: str, typ, where: str):
    if key not in d:
        raise ParseError(f"{where}: missing {key!r}")
    v = d[key]
    if not isinstance(v, typ) or isinstance(v, bool) and typ is not bool:
        raise ParseError(f"{where}: {key!r} has wrong type")
    return v


def _check_keys(d, allowed: set, where: str):
    if not isinstance(d, dict):
        raise ParseError(f"{where}: expected an object")
    extra = set(d) - allowed
    if extra:
        raise ParseError(f"{where}: unknown keys {sorted(extra)}")


def registry_from_dict(doc) -> Registry:
    _check_keys(doc, {"workshops", "machines", "operators", "units"}, "registry")
    workshops = _require(doc, "workshops", list, "registry")
    for w in workshops:
        if not isinstance(w, str) or not w:
            raise ParseError("registry: workshop ids must be nonempty text")
    if len(set(workshops)) != len(workshops):
        raise ParseError("registry: duplicate workshop id")
    declared = set(workshops)

    machines: dict[str, str] = {}
    for i, m in enumerate(_require(doc, "machines", list, "registry")):
        where = f"machines[{i}]"
        _check_keys(m, {"id", "workshop"}, where)
        mid = _require(m, "id", str, where)
        ws = _require(m, "workshop", str, where)
        if not mid:
            raise ParseError(f"{where}: empty machine id")
        if mid in machines:
            raise DuplicateMachine(mid)
        if ws not in declared:
            raise UnknownWorkshop(f"machine {mid} references undeclared workshop {ws!r}")
        machines[mid] = ws
    empty = declared - set(machines.values())
    if empty:
        raise ParseError(f"registry: workshops without machines {sorted(empty)}")

    operators: dict[str, OperatorRecord] = {}
    for i, o in enumerate(_require(doc, "operators", list, "registry")):
        where = f"operators[{i}]"
        _check_keys(o, {"badge", "name", "workshop", "active"}, where)
        try:
            badge = parse_badge_code(_require(o, "badge", str, where))
        except ValueError as e:
            raise ParseError(f"{where}: {e}") from None
        ws = _require(o, "workshop", str, where)
        if ws not in declared:
            raise UnknownWorkshop(f"operator {badge} references undeclared workshop {ws!r}")
        if badge in operators:
            raise DuplicateBadge(badge)
        operators[badge] = OperatorRecord(
            badge=badge,
            name=o.get("name", ""),
            home_workshop=ws,
            active=o.get("active", True),
        )
        if not isinstance(operators[badge].name, str) or not isinstance(operators[badge].active, bool):
            raise ParseError(f"{where}: bad name/active field")

    units: dict[str, str] = {}
    for i, u in enumerate(doc.get("units", [])):
        where = f"units[{i}]"
        _check_keys(u, {"id", "workshop"}, where)
        uid = _require(u, "id", str, where)
        ws = _require(u, "workshop", str, where)
        if ws not in declared:
            raise UnknownWorkshop(f"unit {uid} references undeclared workshop {ws!r}")
        if uid in units:
            raise ParseError(f"{where}: duplicate unit {uid}")
        units[uid] = ws

    return Registry(operators=operators, machines=machines, workshops=tuple(workshops), units=units)


def load_registry(source: Union[bytes, str, IO]) -> Registry:
    """Parse and validate a registry document from bytes, text or a file object."""
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        try:
            source = source.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"registry is not UTF-8: {e}") from None
    if not source.strip():
        raise ParseError("registry is empty")
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as e:
        raise ParseError(f"registry is not valid JSON: {e}") from None
    return registry_from_dict(doc)


def verify_badge(reg: Registry, code: str) -> OperatorRecord:
    rec = reg.operators.get(code)
    if rec is None:
        raise Unauthorized(code, "UnknownBadge")
    if not rec.active:
        raise Unauthorized(code, "Inactive")
    return rec


def verify_scan(reg: Registry, ev: ScanEvent) -> VerifiedScan:
    rec = verify_badge(reg, ev.badge)
    workshop = rec.home_workshop
    if ev.kind is EventKind.CHECK_IN:
        workshop = reg.units.get(ev.unit_id, workshop)
    return VerifiedScan(ev, workshop)
