"""Message model, Received trace stamps and the canonical header digest."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from email.utils import format_datetime, parsedate_to_datetime
from typing import Iterator

from .errors import MalformedMessage, MissingRequiredHeader, OriginReached, RelayNotOnPath

DIGEST_FIELDS = ("Date", "To", "From")
_WS_RUN = re.compile(r"[ \t\r\n]+")
_HEADER_NAME = re.compile(r"^[!-9;-~]+$")
_STAMP_RE = re.compile(
    r"^from\s+(?P<peer>\S+)(?:\s+\([^)]*\))?\s+by\s+(?P<relay>\S+)"
    r"(?:\s+with\s+(?P<proto>\S+))?[^;]*;\s*(?P<date>.+)$",
    re.IGNORECASE | re.DOTALL,
)
# RFC 3848 marker for authenticated submission.
AUTH_PROTOCOL = "ESMTPA"
RELAY_PROTOCOL = "SMTP"


def _surrogate_text(raw: bytes) -> str:
    return raw.decode("utf-8", "surrogateescape")


@dataclass(frozen=True)
class MailMessage:
    """An ordered header list plus an opaque body.

    Header names keep their original spelling but compare case-insensitively.
    Instances are immutable; every editing helper returns a new message.
    """

    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""

    @classmethod
    def parse(cls, raw: bytes | str) -> "MailMessage":
        if isinstance(raw, str):
            raw = raw.encode("utf-8", "surrogateescape")
        head, body = _split_head(raw)
        headers: list[list[str]] = []
        for line in head.splitlines():
            if not line:
                continue
            if line[:1] in (b" ", b"\t"):
                if not headers:
                    raise MalformedMessage("continuation line before first header")
                headers[-1][1] += " " + _surrogate_text(line).strip()
                continue
            name, sep, value = line.partition(b":")
            name_text = _surrogate_text(name).strip()
            if not sep or not _HEADER_NAME.match(name_text):
                raise MalformedMessage(f"bad header line: {line[:60]!r}")
            headers.append([name_text, _surrogate_text(value).strip()])
        return cls(tuple((n, v) for n, v in headers), body)

    def serialize(self) -> bytes:
        lines = [f"{name}: {value}\r\n" for name, value in self.headers]
        head = "".join(lines).encode("utf-8", "surrogateescape")
        return head + b"\r\n" + self.body

    def header_block(self) -> bytes:
        """Serialized headers only, terminated by the blank separator line."""
        return MailMessage(self.headers).serialize()

    def get_all(self, name: str) -> list[str]:
        key = name.lower()
        return [v for n, v in self.headers if n.lower() == key]

    def get(self, name: str, default: str | None = None) -> str | None:
        values = self.get_all(name)
        return values[0] if values else default

    def __contains__(self, name: str) -> bool:
        key = name.lower()
        return any(n.lower() == key for n, _ in self.headers)

    def with_body(self, body: bytes) -> "MailMessage":
        return MailMessage(self.headers, body)

    def with_header(self, name: str, value: str, *, top: bool = False) -> "MailMessage":
        if top:
            return MailMessage(((name, value),) + self.headers, self.body)
        return MailMessage(self.headers + ((name, value),), self.body)

    def without(self, name: str) -> "MailMessage":
        key = name.lower()
        return MailMessage(tuple(h for h in self.headers if h[0].lower() != key), self.body)

    def replace(self, name: str, value: str) -> "MailMessage":
        """Set ``name`` to ``value``, keeping the position of the first occurrence."""
        key = name.lower()
        out: list[tuple[str, str]] = []
        done = False
        for n, v in self.headers:
            if n.lower() == key:
                if not done:
                    out.append((n, value))
                    done = True
                continue
            out.append((n, v))
        if not done:
            out.append((name, value))
        return MailMessage(tuple(out), self.body)


def _split_head(raw: bytes) -> tuple[bytes, bytes]:
    if raw.startswith((b"\r\n", b"\n")):
        return b"", raw[2:] if raw.startswith(b"\r\n") else raw[1:]
    crlf = raw.find(b"\r\n\r\n")
    lf = raw.find(b"\n\n")
    if crlf != -1 and (lf == -1 or crlf < lf):
        return raw[:crlf], raw[crlf + 4:]
    if lf != -1:
        return raw[:lf], raw[lf + 2:]
    return raw, b""


@dataclass(frozen=True)
class ReceivedStamp:
    relay_id: str
    from_peer: str
    timestamp: datetime
    authenticated: bool = False

    def __post_init__(self):
        ts = self.timestamp
        if ts.tzinfo is None:
            ts = ts.replace(tzinfo=timezone.utc)
        object.__setattr__(self, "timestamp", ts.astimezone(timezone.utc).replace(microsecond=0))

    def render(self) -> str:
        proto = AUTH_PROTOCOL if self.authenticated else RELAY_PROTOCOL
        return (
            f"from {self.from_peer} by {self.relay_id} with {proto}; "
            f"{format_datetime(self.timestamp)}"
        )

    @classmethod
    def from_header(cls, value: str) -> "ReceivedStamp | None":
        """Parse a stamp written by :meth:`render`; foreign formats give None."""
        m = _STAMP_RE.match(value.strip())
        if not m:
            return None
        try:
            ts = parsedate_to_datetime(m.group("date").strip())
        except (TypeError, ValueError):
            return None
        proto = (m.group("proto") or "").upper()
        return cls(
            relay_id=m.group("relay").lower(),
            from_peer=m.group("peer").lower(),
            timestamp=ts,
            authenticated=proto == AUTH_PROTOCOL,
        )


def received_stamps(message: MailMessage) -> Iterator[tuple[int, ReceivedStamp | None]]:
    """Yield (header index, parsed stamp) for each Received header, newest first."""
    for idx, (name, value) in enumerate(message.headers):
        if name.lower() == "received":
            yield idx, ReceivedStamp.from_header(value)


@dataclass(frozen=True)
class HeaderDigest:
    value: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.value) != 32:
            raise ValueError(f"digest must be 32 bytes, got {len(self.value)}")

    def hex(self) -> str:
        return self.value.hex()

    @property
    def prefix(self) -> str:
        return self.value[:4].hex()

    @classmethod
    def fromhex(cls, text: str) -> "HeaderDigest":
        return cls(bytes.fromhex(text))

    def __repr__(self):
        return f"HeaderDigest({self.prefix}...)"


def canonical_digest_input(message: MailMessage) -> bytes:
    parts = []
    for name in DIGEST_FIELDS:
        values = message.get_all(name)
        if len(values) != 1:
            what = "missing" if not values else f"repeated {len(values)} times"
            raise MissingRequiredHeader(f"{name} header {what}")
        parts.append(values[0])
    parts.extend(message.get_all("Received"))
    return b"\n".join(
        _WS_RUN.sub(" ", p).strip(" ").encode("utf-8", "surrogateescape") for p in parts
    )


def compute_digest(message: MailMessage) -> HeaderDigest:
    return HeaderDigest(hashlib.sha256(canonical_digest_input(message)).digest())


def add_received_stamp(message: MailMessage, stamp: ReceivedStamp) -> MailMessage:
    return message.with_header("Received", stamp.render(), top=True)


def _own_stamp(message: MailMessage, relay_id: str) -> tuple[int, ReceivedStamp]:
    relay_id = relay_id.lower()
    for idx, stamp in received_stamps(message):
        if stamp is not None and stamp.relay_id == relay_id:
            return idx, stamp
    raise RelayNotOnPath(f"{relay_id} has no Received stamp on this message")


def strip_downstream_headers(message: MailMessage, relay_id: str) -> MailMessage:
    """Rebuild the header state ``relay_id`` saw before it stamped the message.

    Drops every Received header at or above the relay's topmost stamp.
    Non-trace headers are kept wherever they sit.
    """
    cut, _ = _own_stamp(message, relay_id)
    kept = tuple(
        h for i, h in enumerate(message.headers) if not (i <= cut and h[0].lower() == "received")
    )
    return MailMessage(kept, message.body)


def upstream_peer(message: MailMessage, relay_id: str) -> str:
    _, stamp = _own_stamp(message, relay_id)
    if stamp.authenticated:
        raise OriginReached(stamp.relay_id, stamp.from_peer)
    return stamp.from_peer


def message_date(message: MailMessage) -> datetime | None:
    value = message.get("Date")
    if value is None:
        return None
    try:
        dt = parsedate_to_datetime(value)
    except (TypeError, ValueError, IndexError):
        return None
    if dt is None:
        return None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt
