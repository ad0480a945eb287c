"""Per-agent conversation manager.

Every message an agent sends or receives is fed to ``ConversationManager.ingest``,
which runs three stages:

1. find active conversations the message can advance (restricted to the one
   named by its conversation id, if any; that conversation fails when it
   cannot be advanced),
2. otherwise find protocols whose initial transitions accept the message and
   would start a new conversation,
3. advance the single candidate, or report the message as unmatched or
   ambiguous.
"""

from __future__ import annotations

import enum
import itertools
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from types import MappingProxyType
from typing import (
    Callable,
    Deque,
    Dict,
    Iterable,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

from .events import EngineEvent, EventKind
from .protocol import Protocol, ProtocolId, Transition
from .terms import (
    Bindings,
    Constant,
    Function,
    GroundTermError,
    Term,
    apply,
    get_bindings,
    is_ground,
    matches,
    parse_term,
    render_term,
)

__all__ = [
    "Candidate",
    "Conversation",
    "ConversationError",
    "ConversationManager",
    "ConversationSnapshot",
    "Direction",
    "HistoryEntry",
    "Message",
    "Status",
    "counter_ids",
    "transition_fires",
]


class Direction(str, enum.Enum):
    SENT = "sent"
    RECEIVED = "received"


class Status(str, enum.Enum):
    ACTIVE = "active"
    COMPLETED = "completed"
    FAILED = "failed"


class ConversationError(RuntimeError):
    """Raised by ``advance_conversation`` when no single move is possible."""


@dataclass(frozen=True)
class Message:
    sender: str
    receiver: str
    performative: str
    content: Term
    conversation_id: Optional[str] = None
    protocol_id: Optional[ProtocolId] = None

    def __post_init__(self):
        for name in ("sender", "receiver", "performative"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise ValueError(f"message {name} must be a non-empty string")
        object.__setattr__(self, "performative", self.performative.strip().lower())
        if isinstance(self.content, str):
            object.__setattr__(self, "content", parse_term(self.content))
        if not is_ground(self.content):
            raise GroundTermError(f"message content {render_term(self.content)!r} contains variables")
        if isinstance(self.protocol_id, str):
            object.__setattr__(self, "protocol_id", ProtocolId.parse(self.protocol_id))
        if self.conversation_id == "":
            object.__setattr__(self, "conversation_id", None)

    def __str__(self) -> str:
        parts = [f"({self.performative}", f":sender {self.sender}", f":receiver {self.receiver}",
                 f":content {render_term(self.content)}"]
        if self.conversation_id:
            parts.append(f":conversation-id {self.conversation_id}")
        if self.protocol_id:
            parts.append(f":protocol {self.protocol_id}")
        return " ".join(parts) + ")"


class HistoryEntry(NamedTuple):
    direction: Direction
    message: Message
    transition: Transition


@dataclass(eq=False)
class Conversation:
    protocol: ProtocolId
    participants: frozenset
    state: str
    id: Optional[str]
    bindings: Bindings = field(default_factory=dict)
    status: Status = Status.ACTIVE
    history: Deque[HistoryEntry] = field(default_factory=deque)

    @property
    def active(self) -> bool:
        return self.status is Status.ACTIVE

    def counterpart(self, agent: str) -> Optional[str]:
        others = sorted(self.participants - {agent})
        return others[0] if others and agent in self.participants else None


class Candidate(NamedTuple):
    conversation: Conversation
    transition: Transition
    fresh: bool = False


class ConversationSnapshot(NamedTuple):
    conversation_id: str
    protocol_id: ProtocolId
    participants: Tuple[str, ...]
    counterpart: Optional[str]
    state: str
    status: Status
    bindings: Mapping[str, Term]


def counter_ids(prefix: str = "acre-", start: int = 1) -> Callable[[], str]:
    counter = itertools.count(start)
    return lambda: f"{prefix}{next(counter)}"


def _message_term(m: Message) -> Function:
    return Function("message", (Constant(m.sender), Constant(m.receiver), m.content))


def _pattern(t: Transition, bindings: Mapping[str, Term]) -> Function:
    # sender, receiver and content are matched as one term so a variable
    # shared between fields must take one value
    return Function("message", (apply(bindings, t.sender), apply(bindings, t.receiver),
                                apply(bindings, t.content)))


def transition_fires(t: Transition, bindings: Mapping[str, Term], m: Message) -> bool:
    """Whether ``m`` triggers ``t`` in a conversation holding ``bindings``."""
    return t.performative == m.performative and matches(_pattern(t, bindings), _message_term(m))


class ConversationManager:
    """Tracks the conversations of one agent (or of an external observer).

    ``protocols`` maps protocol ids to resolved protocols; a live
    ``ProtocolRepository`` may be passed so later loads become visible.
    Mutating calls must be serialised by the caller.
    """

    def __init__(
        self,
        protocols: Union[Mapping[ProtocolId, Protocol], Iterable[Protocol], None] = None,
        *,
        agent: Optional[str] = None,
        id_generator: Optional[Callable[[], str]] = None,
        clock: Optional[Callable[[], datetime]] = None,
        history_limit: Optional[int] = None,
    ):
        if protocols is None:
            protocols = {}
        elif not isinstance(protocols, Mapping):
            protocols = {p.id: p for p in protocols}
        for p in protocols.values():
            if not p.resolved:
                raise ValueError(f"protocol {p.id} must be resolved before use")
        self.protocols = protocols
        self.agent = agent
        self._id_generator = id_generator or counter_ids()
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self._history_limit = history_limit
        self._conversations: Dict[str, Conversation] = {}
        self._listeners: List[Callable[[EngineEvent], None]] = []

    # -- queries ---------------------------------------------------------

    def __len__(self) -> int:
        return len(self._conversations)

    def conversation(self, conversation_id: str) -> Conversation:
        return self._conversations[conversation_id]

    @property
    def conversations(self) -> List[Conversation]:
        return list(self._conversations.values())

    def snapshot(self) -> List[ConversationSnapshot]:
        rows = []
        for c in self._conversations.values():
            rows.append(ConversationSnapshot(
                c.id, c.protocol, tuple(sorted(c.participants)),
                c.counterpart(self.agent) if self.agent else None,
                c.state, c.status, MappingProxyType(dict(c.bindings)),
            ))
        return rows

    def subscribe(self, listener: Callable[[EngineEvent], None]) -> None:
        self._listeners.append(listener)

    def next_id(self) -> str:
        return self._id_generator()

    def purge(self, statuses: Sequence[Status] = (Status.COMPLETED, Status.FAILED)) -> List[str]:
        """Forget terminated conversations; returns the removed ids."""
        gone = [cid for cid, c in self._conversations.items() if c.status in statuses]
        for cid in gone:
            del self._conversations[cid]
        return gone

    # -- the three stages ------------------------------------------------

    def _scan(self, m: Message) -> Tuple[List[Candidate], List[Conversation]]:
        candidates: List[Candidate] = []
        doomed: List[Conversation] = []
        for conv in self._conversations.values():
            if not conv.active:
                continue
            if m.conversation_id is not None and m.conversation_id != conv.id:
                continue
            hits: List[Transition] = []
            if m.protocol_id is None or m.protocol_id == conv.protocol:
                protocol = self.protocols[conv.protocol]
                hits = [t for t in protocol.transitions_from(conv.state)
                        if transition_fires(t, conv.bindings, m)]
            candidates.extend(Candidate(conv, t) for t in hits)
            if m.conversation_id is not None and not hits:
                doomed.append(conv)
        return candidates, doomed

    def candidate_conversations(self, m: Message) -> List[Candidate]:
        """Active conversations (with the matched transition) that ``m`` advances.

        Read-only: the failure of a named conversation that cannot advance is
        applied by ``ingest``.
        """
        return self._scan(m)[0]

    def _scan_new(self, m: Message) -> Tuple[List[Candidate], List[str]]:
        notes: List[str] = []
        cid = m.conversation_id
        if cid is not None and cid in self._conversations:
            notes.append(f"conversation id {cid} is already in use ({self._conversations[cid].status.value})")
            return [], notes
        if m.protocol_id is not None:
            protocol = self.protocols.get(m.protocol_id)
            if protocol is None:
                notes.append(f"unknown protocol {m.protocol_id}")
                return [], notes
            protocols: Iterable[Protocol] = [protocol]
        else:
            protocols = self.protocols.values()
        candidates = []
        for p in protocols:
            start = p.initial_state
            for t in p.transitions_from(start):
                if transition_fires(t, {}, m):
                    conv = Conversation(p.id, frozenset((m.sender, m.receiver)), start, cid,
                                        history=deque(maxlen=self._history_limit))
                    candidates.append(Candidate(conv, t, fresh=True))
        return candidates, notes

    def candidate_new_conversations(self, m: Message) -> List[Candidate]:
        """Fresh conversations that ``m`` would start.

        Their id is ``m.conversation_id``; when that is absent it stays None
        until the conversation is actually created, so no ids are consumed.
        """
        return self._scan_new(m)[0]

    def _event(self, kind: EventKind, subject: str, detail: str,
               conv: Optional[Conversation] = None, protocol: Optional[ProtocolId] = None) -> EngineEvent:
        return EngineEvent(kind, subject, detail, self._clock(),
                           conv.id if conv else None, conv.protocol if conv else protocol)

    def _advance(self, candidates: List[Candidate], m: Message, direction: Direction,
                 notes: List[str]) -> List[EngineEvent]:
        if not candidates:
            detail = "no conversation or protocol accepts the message"
            if notes:
                detail += ": " + "; ".join(notes)
            return [self._event(EventKind.UNMATCHED, str(m), detail, protocol=m.protocol_id)]
        if len(candidates) > 1:
            options = ", ".join(
                f"{'new ' + str(c.conversation.protocol) if c.fresh else c.conversation.id}"
                f" {c.transition.from_state}->{c.transition.to_state}"
                for c in candidates)
            return [self._event(EventKind.AMBIGUOUS, str(m), f"{len(candidates)} candidates: {options}",
                                protocol=m.protocol_id)]

        conv, t, fresh = candidates[0]
        events = []
        if fresh:
            if conv.id is None:
                conv.id = self.next_id()
                while conv.id in self._conversations:
                    conv.id = self.next_id()
            self._conversations[conv.id] = conv
            events.append(self._event(EventKind.CONVERSATION_BEGUN, conv.id,
                                      f"started at {conv.state}", conv))

        conv.bindings.update(get_bindings(_pattern(t, conv.bindings), _message_term(m)))
        previous, conv.state = conv.state, t.to_state
        conv.history.append(HistoryEntry(direction, m, t))
        detail = f"{previous} -> {conv.state} on {m.performative} {render_term(m.content)}"
        if self.protocols[conv.protocol].is_terminal(conv.state):
            conv.status = Status.COMPLETED
            events.append(self._event(EventKind.COMPLETED, conv.id, detail, conv))
        else:
            events.append(self._event(EventKind.ADVANCED, conv.id, detail, conv))
        return events

    def ingest(self, m: Message, direction: Union[Direction, str] = Direction.RECEIVED) -> List[EngineEvent]:
        """Match a sent or received message and return the events it caused."""
        direction = Direction(direction)
        candidates, doomed = self._scan(m)
        events = []
        for conv in doomed:
            conv.status = Status.FAILED
            events.append(self._event(
                EventKind.FAILED, conv.id,
                f"no transition from {conv.state} accepts {m.performative} {render_term(m.content)}", conv))
        notes: List[str] = []
        if not candidates:
            candidates, notes = self._scan_new(m)
        events.extend(self._advance(candidates, m, direction, notes))
        for event in events:
            for listener in self._listeners:
                listener(event)
        return events

    # -- convenience -----------------------------------------------------

    def advance_conversation(self, conversation_id: str, performative: str,
                             content: Union[Term, str]) -> Message:
        """Build the full outgoing message for a conversation move and ingest it as sent.

        Sender, receiver and protocol come from the conversation's bindings
        and participants.
        """
        conv = self._conversations.get(conversation_id)
        if conv is None:
            raise ConversationError(f"unknown conversation {conversation_id!r}")
        if not conv.active:
            raise ConversationError(f"conversation {conversation_id} is {conv.status.value}")
        if isinstance(content, str):
            content = parse_term(content)
        if not is_ground(content):
            raise GroundTermError(f"content {render_term(content)!r} contains variables")
        performative = performative.strip().lower()

        available = self.protocols[conv.protocol].transitions_from(conv.state)
        options = [t for t in available
                   if t.performative == performative and matches(apply(conv.bindings, t.content), content)]
        if len(options) != 1:
            listing = "; ".join(f"{t.performative} {render_term(apply(conv.bindings, t.content))}"
                                f" -> {t.to_state}" for t in available) or "none"
            problem = "no" if not options else f"{len(options)}"
            raise ConversationError(
                f"{problem} transitions from {conv.state} accept {performative} {render_term(content)}; "
                f"available: {listing}")
        t = options[0]

        sender = _agent_of(apply(conv.bindings, t.sender))
        receiver = _agent_of(apply(conv.bindings, t.receiver))
        if sender is None and self.agent in conv.participants and receiver != self.agent:
            sender = self.agent
        if sender is None and receiver is not None:
            sender = _other(conv.participants, receiver)
        if receiver is None and sender is not None:
            receiver = _other(conv.participants, sender)
        if sender is None or receiver is None:
            raise ConversationError(f"cannot determine the sender and receiver for {t.describe()}")

        message = Message(sender, receiver, performative, content, conv.id, conv.protocol)
        self.ingest(message, Direction.SENT)
        return message


def _agent_of(term: Term) -> Optional[str]:
    return term.text if isinstance(term, Constant) else None


def _other(participants: frozenset, agent: str) -> Optional[str]:
    others = sorted(participants - {agent})
    return others[0] if len(others) == 1 else None
