"""Audit-log records emitted by the round loop."""

from __future__ import annotations

import enum
from dataclasses import dataclass


class EventKind(str, enum.Enum):
    FILL = "Fill"
    REPLACE = "Replace"
    UPDATE = "Update"
    BROADCAST = "Broadcast"
    SAMPLE = "Sample"
    AGGREGATE = "Aggregate"
    PSEUDO_LABEL = "PseudoLabel"
    TRAIN = "Train"
    UPLOAD = "Upload"
    SKIP = "Skip"


DOWNLOAD_KINDS = frozenset({EventKind.FILL, EventKind.REPLACE, EventKind.UPDATE, EventKind.BROADCAST})


@dataclass(frozen=True)
class RoundEvent:
    round: int
    kind: EventKind
    client_id: int
    peer_id: int | None = None
    model_units: int = 0

    def __post_init__(self):
        if self.model_units < 0:
            raise ValueError("model_units must be non-negative")

    @property
    def is_download(self) -> bool:
        return self.kind in DOWNLOAD_KINDS and self.model_units > 0

    def row(self) -> list:
        return [self.round, self.kind.value, self.client_id,
                "" if self.peer_id is None else self.peer_id, self.model_units]


EVENT_COLUMNS = ("round", "kind", "client", "peer", "model_units")
