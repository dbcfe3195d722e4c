"""The ``X-Bulk-Mail`` classification header.

Wire grammar::

    value      = adv / list
    adv        = "ADV" ":" group *("," group)
    list       = "LIST" ":" identifier
    group      = segment *("." segment)      ; lowercase alphanumerics
    identifier = token *("." token)

Leaders are case-insensitive and whitespace around separators is ignored.
A message without the header is personal mail.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

from .errors import MalformedBulkHeader
from .mail import MailMessage

HEADER = "X-Bulk-Mail"
_SEGMENT = re.compile(r"^[a-z0-9]+$")
_ID_TOKEN = re.compile(r"^[A-Za-z0-9_-]+$")


@dataclass(frozen=True, order=True)
class InterestGroup:
    segments: tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> "InterestGroup":
        text = text.strip().lower()
        segments = tuple(text.split("."))
        if not text or not all(_SEGMENT.match(s) for s in segments):
            raise MalformedBulkHeader(f"invalid interest group {text!r}")
        return cls(segments)

    def covers(self, other: "InterestGroup") -> bool:
        """True when self equals ``other`` or is a dot-boundary ancestor of it."""
        n = len(self.segments)
        return n <= len(other.segments) and other.segments[:n] == self.segments

    def __str__(self):
        return ".".join(self.segments)


@dataclass(frozen=True)
class Personal:
    def __str__(self):
        return "personal"


@dataclass(frozen=True)
class Advertisement:
    groups: tuple[InterestGroup, ...]

    def __post_init__(self):
        if not self.groups:
            raise MalformedBulkHeader("ADV requires at least one interest group")
        if len(set(self.groups)) != len(self.groups):
            raise MalformedBulkHeader("duplicate interest group")

    def __str__(self):
        return "adv:" + ",".join(map(str, self.groups))


@dataclass(frozen=True)
class ListMail:
    identifier: str

    def __post_init__(self):
        parts = self.identifier.split(".")
        if not self.identifier or not all(_ID_TOKEN.match(p) for p in parts):
            raise MalformedBulkHeader(f"invalid list identifier {self.identifier!r}")

    def __str__(self):
        return "list:" + self.identifier


BulkClass = Union[Personal, Advertisement, ListMail]


def parse_bulk_value(value: str) -> BulkClass:
    leader, sep, rest = value.partition(":")
    if not sep:
        raise MalformedBulkHeader(f"missing leader in {value!r}")
    leader = leader.strip().upper()
    rest = rest.strip()
    if leader == "ADV":
        if not rest:
            raise MalformedBulkHeader("empty interest group list")
        groups: list[InterestGroup] = []
        for item in rest.split(","):
            group = InterestGroup.parse(item)
            if group in groups:
                raise MalformedBulkHeader(f"duplicate interest group {group}")
            groups.append(group)
        return Advertisement(tuple(groups))
    if leader == "LIST":
        if not rest:
            raise MalformedBulkHeader("empty list identifier")
        return ListMail(rest)
    raise MalformedBulkHeader(f"unknown leader {leader!r}")


def parse_bulk_header(message: MailMessage) -> BulkClass:
    values = message.get_all(HEADER)
    if not values:
        return Personal()
    if len(values) > 1:
        raise MalformedBulkHeader(f"{len(values)} {HEADER} headers")
    return parse_bulk_value(values[0])


def format_bulk_value(cls: BulkClass) -> str | None:
    if isinstance(cls, Advertisement):
        return "ADV: " + ", ".join(map(str, cls.groups))
    if isinstance(cls, ListMail):
        return "LIST: " + cls.identifier
    return None


def apply_bulk_header(message: MailMessage, cls: BulkClass) -> MailMessage:
    """Return ``message`` tagged with ``cls`` (untagged for personal mail)."""
    value = format_bulk_value(cls)
    if value is None:
        return message.without(HEADER)
    return message.replace(HEADER, value)


def parse_class_spec(text: str) -> BulkClass:
    """Parse the compact ``personal`` / ``adv:a.b,c`` / ``list:id`` form used by scripts."""
    if text.lower() == "personal":
        return Personal()
    return parse_bulk_value(text)
