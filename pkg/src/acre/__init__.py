"""Conversation reasoning for agent interaction protocols.

Protocols are finite state machines whose transitions are triggered by
messages; conversations are tracked per agent by matching message fields
against transition patterns written in a small first-order term language.
"""

__version__ = "0.1.0"

from .engine import (  # noqa: E402
    Conversation,
    ConversationError,
    ConversationManager,
    Direction,
    Message,
    Status,
)
from .events import EngineEvent, EventKind  # noqa: E402
from .protocol import (  # noqa: E402
    Protocol,
    ProtocolError,
    ProtocolId,
    State,
    StateKind,
    Transition,
    UnresolvedImportError,
    classify_states,
    expand_regex_states,
    export_dot,
    parse_protocol,
    resolve,
    write_protocol,
)
from .repository import ProtocolRepository, RepositoryError  # noqa: E402
from .terms import (  # noqa: E402
    ANONYMOUS,
    Constant,
    Function,
    Variable,
    apply,
    get_bindings,
    matches,
    parse_term,
    render_term,
)
