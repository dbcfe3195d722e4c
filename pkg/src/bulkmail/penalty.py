"""Complaint validation, reverse-path forwarding and per-peer penalty ledgers."""

from __future__ import annotations

import enum
import json
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from email.utils import format_datetime
from pathlib import Path
from typing import Callable, Iterable, Union

from .classify import ListMail, parse_bulk_header
from .errors import (
    MalformedBulkHeader,
    MalformedComplaint,
    MalformedMessage,
    MissingRequiredHeader,
    OriginReached,
    RelayNotOnPath,
)
from .hashlog import CheckResult, LogStore
from .mail import HeaderDigest, MailMessage, compute_digest, strip_downstream_headers, upstream_peer
from .policy import AccountBook, ComplaintResult, RateLimitConfig, register_complaint

AGE_LIMIT = timedelta(days=7)
SPAMSINK = "spamsink"
COMPLAINT_DIGEST_HEADER = "X-Bulk-Complaint"


class Freshness(enum.Enum):
    FRESH = "Fresh"
    TOO_OLD = "TooOld"


def check_age(message_date: datetime | None, now: datetime, limit: timedelta = AGE_LIMIT) -> Freshness:
    """Refuse mail dated more than ``limit`` ago; an unparseable date counts as too old."""
    if message_date is None or now - message_date > limit:
        return Freshness.TOO_OLD
    return Freshness.FRESH


# -- complaints ---------------------------------------------------------------


@dataclass(frozen=True)
class Complaint:
    original: MailMessage
    reporter: str
    received_at_isp: datetime


@dataclass(frozen=True)
class LocalRecipient:
    user: str


@dataclass(frozen=True)
class Downstream:
    peer: str


ComplaintSource = Union[LocalRecipient, Downstream]


class RejectReason(enum.Enum):
    NOT_IN_LOG = "NotInLog"
    DUPLICATE = "Duplicate"
    TOO_OLD = "TooOld"
    UNKNOWN_DOWNSTREAM = "UnknownDownstream"
    LIST_MAIL = "ListMail"


@dataclass(frozen=True)
class ForwardedUpstream:
    peer: str
    complaint: MailMessage
    digest: HeaderDigest
    deadline: datetime


@dataclass(frozen=True)
class OriginSanctioned:
    """The chain ended here: ``origin`` is a local user or an uncontracted peer."""

    origin: str
    digest: HeaderDigest
    is_peer: bool = False
    status: ComplaintResult | None = None


@dataclass(frozen=True)
class Rejected:
    reason: RejectReason
    digest: HeaderDigest | None = None


ComplaintOutcome = Union[ForwardedUpstream, OriginSanctioned, Rejected]


def complaint_from_redirect(message: MailMessage, reporter: str, now: datetime) -> Complaint:
    """A user's bounce/redirect of received mail: the headers are the original ones.

    ``Resent-*`` headers added by the redirecting client are dropped.
    """
    kept = tuple(h for h in message.headers if not h[0].lower().startswith("resent-"))
    return Complaint(MailMessage(kept), reporter, now)


def complaint_from_peer(message: MailMessage, peer: str, now: datetime) -> Complaint:
    """Peer complaints carry the stripped original headers as the message body."""
    try:
        original = MailMessage.parse(message.body)
    except MalformedMessage as exc:
        raise MalformedComplaint(str(exc)) from exc
    if not original.headers:
        raise MalformedComplaint("complaint body holds no headers")
    return Complaint(original, f"{SPAMSINK}@{peer}", now)


def build_peer_complaint(stripped: MailMessage, digest: HeaderDigest, relay_id: str, peer: str, now: datetime) -> MailMessage:
    """Wire form of a complaint forwarded from ``relay_id`` to ``peer``."""
    return MailMessage(
        (
            ("From", f"{SPAMSINK}@{relay_id}"),
            ("To", f"{SPAMSINK}@{peer}"),
            ("Date", format_datetime(now)),
            ("Subject", "spam complaint"),
            (COMPLAINT_DIGEST_HEADER, digest.hex()),
        ),
        stripped.header_block(),
    )


# -- ledger -------------------------------------------------------------------


class PeerLedger:
    """Signed per-peer balances in cents; positive means the peer owes us."""

    def __init__(self, balances: dict[str, int] | None = None):
        self._balances: dict[str, int] = dict(balances or {})
        self._lock = threading.Lock()
        self.observers: list[Callable[[str, int, int], None]] = []

    def settle(self, peer: str, amount: int) -> int:
        with self._lock:
            balance = self._balances.get(peer, 0) + amount
            self._balances[peer] = balance
        for observer in self.observers:
            observer(peer, amount, balance)
        return balance

    def balance(self, peer: str) -> int:
        with self._lock:
            return self._balances.get(peer, 0)

    def balances(self) -> dict[str, int]:
        with self._lock:
            return dict(self._balances)

    def net(self) -> int:
        with self._lock:
            return sum(self._balances.values())

    def report(self) -> str:
        return "".join(f"{peer} {cents}\n" for peer, cents in sorted(self.balances().items()))

    @classmethod
    def parse_report(cls, lines: Iterable[str]) -> "PeerLedger":
        balances = {}
        for lineno, line in enumerate(lines, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected 'peer balance_cents'")
            balances[parts[0]] = int(parts[1])
        return cls(balances)

    def save(self, path: str | Path) -> None:
        tmp = Path(str(path) + ".tmp")
        tmp.write_text(self.report(), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "PeerLedger":
        with open(path, encoding="utf-8") as fh:
            return cls.parse_report(fh)


def settle(ledger: PeerLedger, peer: str, amount: int) -> int:
    return ledger.settle(peer, amount)


# -- the complaint step -------------------------------------------------------


def handle_complaint(
    relay_id: str,
    complaint: Complaint,
    source: ComplaintSource,
    log: LogStore,
    ledger: PeerLedger,
    now: datetime,
    *,
    cfg: RateLimitConfig = RateLimitConfig(),
    accounts: AccountBook | None = None,
    forwardable: Callable[[str], bool] = lambda peer: True,
) -> ComplaintOutcome:
    """Validate one complaint at ``relay_id`` and decide where it goes next.

    The next-hop check runs before the duplicate flag is set, so a complaint
    from the wrong peer cannot burn the one legitimate complaint per message.
    Ledger effects: a downstream source is paid ``micro_penalty``; a forward
    books the same amount as owed by the upstream peer. Callers must reverse
    that claim (``settle(peer, -p)``) if the upstream refuses the complaint.
    """
    original = complaint.original
    try:
        bulk = parse_bulk_header(original)
    except MalformedBulkHeader as exc:
        raise MalformedComplaint(str(exc)) from exc
    if isinstance(bulk, ListMail):
        return Rejected(RejectReason.LIST_MAIL)
    try:
        ingress = strip_downstream_headers(original, relay_id)
        digest = compute_digest(ingress)
    except RelayNotOnPath:
        return Rejected(RejectReason.NOT_IN_LOG)
    except MissingRequiredHeader as exc:
        raise MalformedComplaint(str(exc)) from exc

    entry = log.lookup(digest, now)
    if entry is None:
        return Rejected(RejectReason.NOT_IN_LOG, digest)
    expected_peer = source.peer if isinstance(source, Downstream) else relay_id
    if entry.peer != expected_peer:
        return Rejected(RejectReason.UNKNOWN_DOWNSTREAM, digest)
    result = log.check_and_mark(digest, now)
    if result is CheckResult.ALREADY_COMPLAINED:
        return Rejected(RejectReason.DUPLICATE, digest)
    if result is not CheckResult.ACCEPTED:
        return Rejected(RejectReason.NOT_IN_LOG, digest)

    penalty = cfg.micro_penalty
    if isinstance(source, Downstream):
        ledger.settle(source.peer, -penalty)
    try:
        peer = upstream_peer(original, relay_id)
    except OriginReached as origin:
        status = None
        if accounts is not None:
            status = register_complaint(accounts.get(origin.user), now, cfg)
        return OriginSanctioned(origin.user, digest, is_peer=False, status=status)
    if not forwardable(peer):
        return OriginSanctioned(peer, digest, is_peer=True)
    ledger.settle(peer, penalty)
    wire = build_peer_complaint(ingress, digest, relay_id, peer, now)
    return ForwardedUpstream(peer, wire, digest, entry.logged_at + log.retention)


# -- delivery retries ---------------------------------------------------------


@dataclass
class PendingComplaint:
    peer: str
    message: MailMessage
    digest: HeaderDigest
    deadline: datetime
    attempts: int = 0
    next_attempt: datetime | None = None


@dataclass
class RetryQueue:
    """Bounded exponential backoff for complaints whose upstream is unreachable.

    Items are retried until their log-window deadline, then handed to the
    dead-letter sink (a JSON-lines file when ``dead_letter_path`` is set).
    """

    base_delay: timedelta = timedelta(minutes=1)
    max_delay: timedelta = timedelta(hours=6)
    dead_letter_path: Path | None = None
    pending: list[PendingComplaint] = field(default_factory=list)
    dead: list[PendingComplaint] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def defer(self, item: PendingComplaint, now: datetime) -> bool:
        """Schedule another attempt; False (and dead-lettered) once past the deadline."""
        # cap the exponent first so long outages cannot overflow timedelta
        steps = max(0, (self.max_delay // self.base_delay).bit_length())
        delay = min(self.base_delay * (2 ** min(item.attempts, steps)), self.max_delay)
        item.attempts += 1
        item.next_attempt = now + delay
        with self._lock:
            if item.next_attempt > item.deadline:
                self._dead_letter(item, now)
                return False
            self.pending.append(item)
            return True

    def due(self, now: datetime) -> list[PendingComplaint]:
        with self._lock:
            ready = [p for p in self.pending if p.next_attempt <= now]
            self.pending = [p for p in self.pending if p.next_attempt > now]
        return ready

    def next_due(self) -> datetime | None:
        with self._lock:
            return min((p.next_attempt for p in self.pending), default=None)

    def _dead_letter(self, item: PendingComplaint, now: datetime) -> None:
        self.dead.append(item)
        if self.dead_letter_path is not None:
            record = {
                "at": now.isoformat(),
                "peer": item.peer,
                "digest": item.digest.hex(),
                "attempts": item.attempts,
                "complaint": item.message.serialize().decode("utf-8", "replace"),
            }
            with open(self.dead_letter_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
