"""Line-oriented diagnostic events: ``timestamp kind digest-prefix peer [k=v ...]``."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable


@dataclass(frozen=True)
class Event:
    time: datetime
    kind: str
    digest: str = "-"
    peer: str = "-"
    detail: dict = field(default_factory=dict)

    def format(self) -> str:
        extra = "".join(f" {k}={v}" for k, v in sorted(self.detail.items()))
        stamp = self.time.strftime("%Y-%m-%dT%H:%M:%SZ")
        return f"{stamp} {self.kind} {self.digest or '-'} {self.peer or '-'}{extra}"


EventSink = Callable[[Event], None]


def discard(event: Event) -> None:
    pass


class EventLog:
    """Append events to a file, one per line."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def __call__(self, event: Event) -> None:
        line = event.format() + "\n"
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)
