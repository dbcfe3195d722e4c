"""Recipient filtering, list whitelists, send rate limits and sanctions.

All sliding windows share one boundary rule: an event at time ``t`` is in
the window at ``now`` iff ``now - t <= window``. Money is integer cents.
"""

from __future__ import annotations

import enum
import threading
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable

from .classify import Advertisement, BulkClass, InterestGroup, ListMail
from .errors import AccountTerminated, ConfigError, MalformedBulkHeader

SEND_WINDOW = timedelta(days=7)
LOG_WINDOW_WEEKS = 2


class Action(enum.Enum):
    KEEP = "keep"
    DISCARD = "discard"


class Decision(enum.Enum):
    DELIVER = "deliver"
    DISCARD = "discard"


@dataclass(frozen=True)
class FilterRule:
    prefix: InterestGroup
    action: Action


def filter_decision(cls: BulkClass, rules: Iterable[FilterRule]) -> Decision:
    """Apply first-match-wins rules to each interest group of an advertisement.

    The message is discarded only when every group's first matching rule
    says discard. Personal and list mail are never filtered here.
    """
    if not isinstance(cls, Advertisement):
        return Decision.DELIVER
    rules = list(rules)
    for group in cls.groups:
        first = next((r for r in rules if r.prefix.covers(group)), None)
        if first is None or first.action is Action.KEEP:
            return Decision.DELIVER
    return Decision.DISCARD


@dataclass(frozen=True)
class WhitelistEntry:
    list_id: str
    reverse_path: str | None = None

    def matches(self, list_id: str, remailer: str | None) -> bool:
        if self.list_id != list_id:
            return False
        return self.reverse_path is None or (
            remailer is not None and self.reverse_path.lower() == remailer.lower()
        )


class WhitelistResult(enum.Enum):
    ALLOWED = "allowed"
    DROP = "drop"


def whitelist_check(list_id: str, remailer: str | None, entries: Iterable[WhitelistEntry]) -> WhitelistResult:
    if any(e.matches(list_id, remailer) for e in entries):
        return WhitelistResult.ALLOWED
    return WhitelistResult.DROP


@dataclass
class RecipientPolicy:
    """One mailbox's filter rules and list subscriptions."""

    rules: list[FilterRule] = field(default_factory=list)
    whitelist: dict[str, WhitelistEntry] = field(default_factory=dict)

    def subscribe(self, list_id: str, reverse_path: str | None = None) -> None:
        self.whitelist[list_id] = WhitelistEntry(list_id, reverse_path)

    def unsubscribe(self, list_id: str) -> bool:
        return self.whitelist.pop(list_id, None) is not None

    def add_rule(self, action: Action | str, prefix: str) -> None:
        self.rules.append(FilterRule(InterestGroup.parse(prefix), Action(action)))

    def decide(self, cls: BulkClass, remailer: str | None = None) -> Decision | WhitelistResult:
        if isinstance(cls, ListMail):
            return whitelist_check(cls.identifier, remailer, self.whitelist.values())
        return filter_decision(cls, self.rules)


def parse_policy_lines(lines: Iterable[str]) -> RecipientPolicy:
    """Read ``discard rec.sports`` / ``keep x.y`` / ``list id [remailer]`` lines."""
    policy = RecipientPolicy()
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        verb = words[0].lower()
        try:
            if verb in ("discard", "keep") and len(words) == 2:
                policy.add_rule(verb, words[1])
            elif verb == "list" and len(words) in (2, 3):
                if words[1] in policy.whitelist:
                    raise ConfigError(f"line {lineno}: duplicate list {words[1]}")
                policy.subscribe(words[1], words[2] if len(words) == 3 else None)
            else:
                raise ConfigError(f"line {lineno}: cannot parse {line!r}")
        except MalformedBulkHeader as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    return policy


def load_policy(path: str | Path) -> RecipientPolicy:
    with open(path, encoding="utf-8") as fh:
        return parse_policy_lines(fh)


# -- rate limits and sanctions ------------------------------------------------


@dataclass(frozen=True)
class RateLimitConfig:
    send_limit_per_week: int = 100
    micro_penalty: int = 10
    complaint_limit: int = 10
    complaint_window_days: int = 90
    monthly_fee: int = 3000
    reset_fee: int = 100

    def __post_init__(self):
        for name in ("send_limit_per_week", "complaint_limit", "complaint_window_days"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("micro_penalty", "monthly_fee", "reset_fee"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must not be negative")
        if max_liability(self) > self.monthly_fee:
            raise ConfigError(
                f"liability bound {max_liability(self)} exceeds monthly fee {self.monthly_fee}"
            )

    @property
    def complaint_window(self) -> timedelta:
        return timedelta(days=self.complaint_window_days)


def max_liability(cfg: RateLimitConfig) -> int:
    """Worst-case penalties an ISP can owe for one client, in cents.

    Every message still inside the two-week log window can draw a complaint,
    on top of the complaints already absorbed short of termination.
    """
    in_window_sends = cfg.send_limit_per_week * LOG_WINDOW_WEEKS
    return in_window_sends * cfg.micro_penalty + (cfg.complaint_limit - 1) * cfg.micro_penalty


class SendResult(enum.Enum):
    ADMITTED = "Admitted"
    RATE_LIMITED = "RateLimited"
    ACCOUNT_TERMINATED = "AccountTerminated"


class ComplaintResult(enum.Enum):
    WARNED = "Warned"
    TERMINATED = "Terminated"


def _trim(events: deque, now: datetime, window: timedelta) -> None:
    while events and now - events[0] > window:
        events.popleft()


@dataclass
class ClientAccount:
    user_id: str
    send_timestamps: deque = field(default_factory=deque)
    complaint_timestamps: deque = field(default_factory=deque)
    terminated: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def sends_in_window(self, now: datetime) -> int:
        return sum(1 for t in self.send_timestamps if now - t <= SEND_WINDOW)

    def complaints_in_window(self, now: datetime, cfg: RateLimitConfig) -> int:
        return sum(1 for t in self.complaint_timestamps if now - t <= cfg.complaint_window)


def admit_send(account: ClientAccount, now: datetime, cfg: RateLimitConfig) -> SendResult:
    return admit_sends(account, 1, now, cfg)


def admit_sends(account: ClientAccount, count: int, now: datetime, cfg: RateLimitConfig) -> SendResult:
    """All-or-nothing admission of ``count`` sends (one per accepted recipient)."""
    with account.lock:
        if account.terminated:
            return SendResult.ACCOUNT_TERMINATED
        _trim(account.send_timestamps, now, SEND_WINDOW)
        if len(account.send_timestamps) + count > cfg.send_limit_per_week:
            return SendResult.RATE_LIMITED
        account.send_timestamps.extend([now] * count)
        return SendResult.ADMITTED


def register_complaint(account: ClientAccount, now: datetime, cfg: RateLimitConfig) -> ComplaintResult:
    with account.lock:
        account.complaint_timestamps.append(now)
        _trim(account.complaint_timestamps, now, cfg.complaint_window)
        if len(account.complaint_timestamps) >= cfg.complaint_limit:
            account.terminated = True
        return ComplaintResult.TERMINATED if account.terminated else ComplaintResult.WARNED


def reset_counter(account: ClientAccount, cfg: RateLimitConfig) -> int:
    with account.lock:
        if account.terminated:
            raise AccountTerminated(f"{account.user_id} is terminated")
        account.complaint_timestamps.clear()
        return cfg.reset_fee


class AccountBook:
    """Lazily created accounts keyed by user id."""

    def __init__(self):
        self._accounts: dict[str, ClientAccount] = {}
        self._lock = threading.Lock()

    def get(self, user_id: str) -> ClientAccount:
        with self._lock:
            acct = self._accounts.get(user_id)
            if acct is None:
                acct = self._accounts[user_id] = ClientAccount(user_id)
            return acct

    def __iter__(self):
        with self._lock:
            return iter(list(self._accounts.values()))
