"""In-process stand-ins for the slave mail server and the complaint transport."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field


@dataclass
class FakeSlave:
    """Answers like a permissive MTA; ``replies`` overrides by verb, ``unknown`` users get 550."""

    replies: dict[str, tuple[int, bytes]] = field(default_factory=dict)
    unknown: set[str] = field(default_factory=set)
    data_code: tuple[int, bytes] = (250, b"2.0.0 queued as X1")
    commands: list[tuple[str, str]] = field(default_factory=list)
    messages: list[bytes] = field(default_factory=list)
    closed: bool = False

    def docmd(self, cmd: str, args: str = "") -> tuple[int, bytes]:
        self.commands.append((cmd.upper(), args))
        verb = cmd.upper()
        if verb in self.replies:
            return self.replies[verb]
        if verb == "EHLO":
            return 250, b"slave.example Hello\nPIPELINING\nSIZE 1000000\nSTARTTLS\n8BITMIME"
        if verb == "RCPT" and any(u in args.lower() for u in self.unknown):
            return 550, b"5.1.1 no such user"
        if verb == "QUIT":
            return 221, b"bye"
        return 250, b"2.0.0 ok"

    def data(self, msg: bytes) -> tuple[int, bytes]:
        self.messages.append(msg)
        return self.data_code

    def close(self) -> None:
        self.closed = True


class SlavePool:
    """Slave factory for a server; every connection's slave shares one mail spool."""

    def __init__(self, **kwargs):
        self.kwargs = kwargs
        self.slaves: list[FakeSlave] = []
        self._lock = threading.Lock()

    def __call__(self) -> FakeSlave:
        slave = FakeSlave(**self.kwargs)
        with self._lock:
            self.slaves.append(slave)
        return slave

    @property
    def messages(self) -> list[bytes]:
        with self._lock:
            return [m for s in self.slaves for m in s.messages]


class RecordingTransport:
    """Complaint transport that answers every delivery with a fixed code."""

    def __init__(self, code: int = 250):
        self.code = code
        self.sent: list[tuple[str, object]] = []

    def __call__(self, peer, message, on_reply) -> None:
        self.sent.append((peer, message))
        on_reply(self.code, "ok" if self.code else "unreachable")
