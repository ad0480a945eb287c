"""Event notifications raised by the protocol and conversation managers."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from datetime import datetime
from typing import Optional

from .protocol import ProtocolId


class EventKind(str, enum.Enum):
    CONVERSATION_BEGUN = "conversation_begun"
    ADVANCED = "advanced"
    COMPLETED = "completed"
    FAILED = "failed"
    UNMATCHED = "unmatched"
    AMBIGUOUS = "ambiguous"
    PROTOCOL_LOADED = "protocol_loaded"


# exactly one of these closes every ingested message
OUTCOMES = frozenset({EventKind.ADVANCED, EventKind.COMPLETED, EventKind.UNMATCHED, EventKind.AMBIGUOUS})


@dataclass(frozen=True)
class EngineEvent:
    kind: EventKind
    subject: str
    detail: str
    timestamp: datetime
    conversation_id: Optional[str] = None
    protocol_id: Optional[ProtocolId] = None

    def to_line(self) -> str:
        """``timestamp kind conversation protocol detail``, '-' for absent fields."""
        return " ".join([
            self.timestamp.isoformat(),
            self.kind.value,
            self.conversation_id or "-",
            str(self.protocol_id) if self.protocol_id else "-",
            self.detail,
        ])

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp.isoformat(),
            "kind": self.kind.value,
            "conversation": self.conversation_id,
            "protocol": str(self.protocol_id) if self.protocol_id else None,
            "subject": self.subject,
            "detail": self.detail,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
