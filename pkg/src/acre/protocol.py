"""Interaction protocols as finite state machines, and their XML format."""

from __future__ import annotations

import enum
import io
import logging
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from typing import IO, Dict, Iterable, List, Mapping, Optional, Tuple, Union

from .terms import (
    ANONYMOUS,
    IDENT_RE,
    Term,
    TermSyntaxError,
    parse_term,
    render_term,
)

log = logging.getLogger(__name__)

ACRE_NS = "http://acre.lill.is"

__all__ = [
    "ACRE_NS",
    "UnresolvedImportError",
    "Protocol",
    "ProtocolError",
    "ProtocolId",
    "State",
    "StateKind",
    "Transition",
    "classify_states",
    "expand_regex_states",
    "export_dot",
    "parse_protocol",
    "resolve",
    "resolve_all",
    "write_protocol",
]


class ProtocolError(ValueError):
    """A protocol definition is malformed or fails validation."""


class UnresolvedImportError(ProtocolError):
    """An imported protocol is unknown or the imports form a cycle."""

    def __init__(self, message: str, missing: Optional["ProtocolId"] = None):
        super().__init__(message)
        self.missing = missing


@dataclass(frozen=True, order=True)
class ProtocolId:
    namespace: str
    name: str
    version: str

    def __post_init__(self):
        for part in ("namespace", "name", "version"):
            value = getattr(self, part)
            if not isinstance(value, str) or not value.strip():
                raise ProtocolError(f"protocol {part} must be non-empty")
            if "/" in value:
                raise ProtocolError(f"protocol {part} may not contain '/': {value!r}")

    @classmethod
    def parse(cls, text: str) -> "ProtocolId":
        parts = text.strip().split("/")
        if len(parts) != 3:
            raise ProtocolError(f"expected namespace/name/version, got {text!r}")
        return cls(*parts)

    def __str__(self) -> str:
        return f"{self.namespace}/{self.name}/{self.version}"


class StateKind(enum.Flag):
    INITIAL = 1
    TERMINAL = 2
    INTERMEDIATE = 4

    def label(self) -> str:
        if self == StateKind.INITIAL | StateKind.TERMINAL:
            return "initial+terminal"
        return self.name.lower()


@dataclass(frozen=True)
class State:
    name: str
    kind: Optional[StateKind] = None
    owner: Optional[ProtocolId] = None


@dataclass(frozen=True)
class Transition:
    from_state: str
    to_state: str
    performative: str
    sender: Term = ANONYMOUS
    receiver: Term = ANONYMOUS
    content: Term = ANONYMOUS

    @property
    def is_regex(self) -> bool:
        return is_regex_state(self.from_state)

    def label(self) -> str:
        return f"{self.performative}: {render_term(self.content)}"

    def describe(self) -> str:
        return (f"{self.from_state} -> {self.to_state} {self.performative} "
                f"{render_term(self.sender)}->{render_term(self.receiver)} "
                f"{render_term(self.content)}")


def is_regex_state(name: str) -> bool:
    return len(name) >= 2 and name.startswith("/") and name.endswith("/")


@dataclass(frozen=True, eq=False)
class Protocol:
    """A protocol definition.

    Freshly parsed protocols are unresolved: their states carry no
    classification and imports are only referenced.  ``resolve`` produces the
    merged FSM and keeps the original declaration in ``declared``.
    Equality ignores declaration order.
    """

    id: ProtocolId
    states: Tuple[State, ...] = ()
    transitions: Tuple[Transition, ...] = ()
    imports: Tuple[ProtocolId, ...] = ()
    resolved: bool = False
    declared: Optional["Protocol"] = field(default=None, repr=False)

    def _key(self):
        return (self.id, frozenset(self.states), frozenset(self.transitions),
                frozenset(self.imports), self.resolved)

    def __eq__(self, other):
        if not isinstance(other, Protocol):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    @property
    def source(self) -> "Protocol":
        """The protocol as declared, before import merging."""
        return self.declared if self.declared is not None else self

    @property
    def state_names(self) -> List[str]:
        return [s.name for s in self.states]

    def state(self, name: str) -> State:
        for s in self.states:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def initial_state(self) -> str:
        self._require_resolved()
        return next(s.name for s in self.states if s.kind & StateKind.INITIAL)

    @property
    def terminal_states(self) -> frozenset:
        self._require_resolved()
        return frozenset(s.name for s in self.states if s.kind & StateKind.TERMINAL)

    def is_terminal(self, name: str) -> bool:
        return name in self.terminal_states

    def transitions_from(self, name: str) -> List[Transition]:
        return [t for t in self.transitions if t.from_state == name]

    def _require_resolved(self):
        if not self.resolved:
            raise ProtocolError(f"protocol {self.id} has not been resolved")


# -- XML reading -------------------------------------------------------------

def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _children(elem: ET.Element, name: str) -> List[ET.Element]:
    return [c for c in elem if _local(c.tag) == name]


def _text_of(root: ET.Element, name: str) -> str:
    found = _children(root, name)
    if not found or not (found[0].text or "").strip():
        raise ProtocolError(f"missing <{name}>")
    if len(found) > 1:
        raise ProtocolError(f"duplicate <{name}>")
    return found[0].text.strip()


def _term_attr(elem: ET.Element, attr: str, where: str) -> Term:
    value = elem.get(attr)
    if value is None:
        return ANONYMOUS
    try:
        return parse_term(value)
    except TermSyntaxError as exc:
        raise ProtocolError(f"{where}: bad {attr} attribute: {exc}") from None


def _parse_performative(value: Optional[str], where: str) -> str:
    if value is None or not value.strip():
        raise ProtocolError(f"{where}: missing mandatory attribute 'performative'")
    value = value.strip()
    if value.startswith("?"):
        raise ProtocolError(f"{where}: variables are not permitted in the performative ({value!r})")
    if not IDENT_RE.fullmatch(value):
        raise ProtocolError(f"{where}: performative must be a constant token, got {value!r}")
    return value.lower()


def parse_protocol(source: Union[bytes, str, IO[bytes]]) -> Protocol:
    """Read an (unresolved) protocol from XML bytes, text or a binary stream."""
    if isinstance(source, (bytes, str)):
        data = source.encode() if isinstance(source, str) else source
        stream: IO[bytes] = io.BytesIO(data)
    else:
        stream = source
    try:
        root = ET.parse(stream).getroot()
    except ET.ParseError as exc:
        raise ProtocolError(f"malformed XML: {exc}") from None
    if _local(root.tag) != "protocol":
        raise ProtocolError(f"root element must be <protocol>, not <{_local(root.tag)}>")

    pid = ProtocolId(_text_of(root, "namespace"), _text_of(root, "name"), _text_of(root, "version"))

    imports = []
    for imp in _children(root, "import"):
        try:
            imports.append(ProtocolId(imp.get("namespace", ""), imp.get("name", ""), imp.get("version", "")))
        except ProtocolError as exc:
            raise ProtocolError(f"<import>: {exc}") from None

    states: List[State] = []
    seen = set()
    for block in _children(root, "states"):
        for elem in _children(block, "state"):
            name = (elem.get("name") or "").strip()
            if not name:
                raise ProtocolError("<state> without a name")
            if is_regex_state(name):
                raise ProtocolError(f"state name {name!r} looks like a regular expression")
            if name in seen:
                raise ProtocolError(f"duplicate state {name!r}")
            seen.add(name)
            states.append(State(name, owner=pid))

    transitions: List[Transition] = []
    for block in _children(root, "transitions"):
        for n, elem in enumerate(_children(block, "transition"), 1):
            where = f"transition {n}"
            performative = _parse_performative(elem.get("performative"), where)
            from_state = (elem.get("from-state") or "").strip()
            to_state = (elem.get("to-state") or "").strip()
            if not from_state:
                raise ProtocolError(f"{where}: missing mandatory attribute 'from-state'")
            if not to_state:
                raise ProtocolError(f"{where}: missing mandatory attribute 'to-state'")
            if is_regex_state(to_state):
                raise ProtocolError(f"{where}: to-state may not contain a regular expression ({to_state!r})")
            transitions.append(Transition(
                from_state, to_state, performative,
                _term_attr(elem, "sender", where),
                _term_attr(elem, "receiver", where),
                _term_attr(elem, "content", where),
            ))

    return Protocol(pid, tuple(states), tuple(transitions), tuple(imports))


# -- XML writing -------------------------------------------------------------

def write_protocol(protocol: Protocol) -> bytes:
    """Serialise the declared form of ``protocol`` (imports are not inlined)."""
    p = protocol.source
    root = ET.Element("protocol", {"xmlns": ACRE_NS})
    for tag in ("namespace", "name", "version"):
        ET.SubElement(root, tag).text = getattr(p.id, tag)
    for imp in p.imports:
        ET.SubElement(root, "import", {"namespace": imp.namespace, "name": imp.name, "version": imp.version})
    states = ET.SubElement(root, "states")
    for s in p.states:
        ET.SubElement(states, "state", {"name": s.name})
    transitions = ET.SubElement(root, "transitions")
    for t in p.transitions:
        attrs = {"performative": t.performative, "from-state": t.from_state, "to-state": t.to_state}
        for attr in ("sender", "receiver", "content"):
            value = getattr(t, attr)
            if value != ANONYMOUS:
                attrs[attr] = render_term(value)
        ET.SubElement(transitions, "transition", attrs)
    ET.indent(root, space="   ")
    return b'<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="utf-8") + b"\n"


# -- resolution --------------------------------------------------------------

def _import_closure(protocol: Protocol, registry: Mapping[ProtocolId, Protocol]) -> List[Protocol]:
    """Declared protocols reachable through imports, importer first."""
    order: List[Protocol] = []
    done = set()

    def visit(p: Protocol, path: Tuple[ProtocolId, ...]):
        for imp in p.imports:
            if imp in path:
                cycle = " -> ".join(str(x) for x in path + (imp,))
                raise UnresolvedImportError(f"import cycle: {cycle}")
            if imp in done:
                continue
            target = registry.get(imp)
            if target is None:
                raise UnresolvedImportError(f"{path[-1]} imports unknown protocol {imp}", missing=imp)
            done.add(imp)
            order.append(target.source)
            visit(target.source, path + (imp,))

    done.add(protocol.id)
    order.append(protocol.source)
    visit(protocol.source, (protocol.id,))
    return order


def expand_regex_states(protocol: Protocol) -> Protocol:
    """Replace every ``/regex/`` from-state with one copy per matching state.

    Patterns must match a whole state name.  The result has no duplicate
    transitions.
    """
    names = protocol.state_names
    out: List[Transition] = []
    for t in protocol.transitions:
        if not t.is_regex:
            out.append(t)
            continue
        try:
            rx = re.compile(t.from_state[1:-1])
        except re.error as exc:
            raise ProtocolError(f"invalid regular expression {t.from_state!r}: {exc}") from None
        hits = [n for n in names if rx.fullmatch(n)]
        if not hits:
            log.warning("%s: from-state %s matches no state; transition %s dropped",
                        protocol.id, t.from_state, t.performative)
        out.extend(replace(t, from_state=n) for n in hits)
    return replace(protocol, transitions=tuple(dict.fromkeys(out)))


def classify_states(protocol: Protocol) -> Dict[str, StateKind]:
    """Initial states have no incoming transitions, terminal ones no outgoing."""
    incoming = {t.to_state for t in protocol.transitions}
    outgoing = {t.from_state for t in protocol.transitions}
    kinds = {}
    for name in protocol.state_names:
        kind = StateKind(0)
        if name not in incoming:
            kind |= StateKind.INITIAL
        if name not in outgoing:
            kind |= StateKind.TERMINAL
        kinds[name] = kind or StateKind.INTERMEDIATE
    return kinds


def resolve(protocol: Protocol, registry: Optional[Mapping[ProtocolId, Protocol]] = None) -> Protocol:
    """Merge imports, expand regex from-states, classify and validate."""
    closure = _import_closure(protocol, registry or {})

    states: Dict[str, State] = {}
    transitions: List[Transition] = []
    for p in closure:
        for s in p.states:
            owner = s.owner or p.id
            known = states.get(s.name)
            if known is not None and known.owner != owner:
                raise ProtocolError(
                    f"state {s.name!r} is declared by both {known.owner} and {owner}")
            states[s.name] = State(s.name, owner=owner)
        transitions.extend(p.transitions)

    merged = expand_regex_states(
        Protocol(protocol.id, tuple(states.values()), tuple(transitions), protocol.source.imports))

    for t in merged.transitions:
        for end in (t.from_state, t.to_state):
            if end not in states:
                raise ProtocolError(f"{protocol.id}: transition {t.describe()} names unknown state {end!r}")

    kinds = classify_states(merged)
    initial = [n for n, k in kinds.items() if k & StateKind.INITIAL]
    if not initial:
        raise ProtocolError(f"{protocol.id}: no initial state (every state has an incoming transition)")
    if len(initial) > 1:
        raise ProtocolError(f"{protocol.id}: multiple initial states: {', '.join(initial)}")

    return replace(
        merged,
        states=tuple(replace(s, kind=kinds[s.name]) for s in merged.states),
        resolved=True,
        declared=protocol.source,
    )


# -- DOT export --------------------------------------------------------------

def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(protocol: Protocol, include_imported: bool = True) -> str:
    """Graphviz rendering: initial states dashed, terminal states double circles."""
    p = protocol if protocol.resolved else resolve(protocol)
    states = list(p.states)
    if not include_imported:
        states = [s for s in states if s.owner == p.id]
    names = {s.name for s in states}
    lines = [f"digraph {_dot_quote(str(p.id))} {{", "  rankdir=LR;", "  node [shape=circle];"]
    for s in states:
        attrs = []
        if s.kind & StateKind.TERMINAL:
            attrs.append("shape=doublecircle")
        if s.kind & StateKind.INITIAL:
            attrs.append("style=dashed")
        suffix = f" [{', '.join(attrs)}]" if attrs else ""
        lines.append(f"  {_dot_quote(s.name)}{suffix};")
    for t in p.transitions:
        if t.from_state in names and t.to_state in names:
            lines.append(f"  {_dot_quote(t.from_state)} -> {_dot_quote(t.to_state)} "
                         f"[label={_dot_quote(t.label())}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def resolve_all(protocols: Iterable[Protocol],
                registry: Optional[Mapping[ProtocolId, Protocol]] = None) -> Dict[ProtocolId, Protocol]:
    """Resolve a batch of declared protocols that may import each other."""
    pending = {p.id: p for p in protocols}
    lookup = dict(registry or {})
    lookup.update(pending)
    return {pid: resolve(p, lookup) for pid, p in pending.items()}
