"""Relay policy core shared by the TCP proxy and the simulator.

:class:`RelayNode` owns the hash log, ledger, accounts and peer table of one
administrative domain. It never touches sockets: the SMTP session hands it
messages together with a slave connection, and complaint forwarding goes
through an injected transport callable.
"""

from __future__ import annotations

import enum
import logging
import smtplib
from dataclasses import dataclass
from datetime import datetime
from typing import Callable, Protocol, Union

from ..classify import Advertisement, BulkClass, ListMail, parse_bulk_header
from ..errors import MalformedBulkHeader, MalformedComplaint, MissingRequiredHeader
from ..hashlog import LogStore
from ..mail import HeaderDigest, MailMessage, ReceivedStamp, add_received_stamp, compute_digest, message_date
from ..penalty import (
    SPAMSINK,
    ComplaintOutcome,
    Downstream,
    Freshness,
    LocalRecipient,
    OriginSanctioned,
    PeerLedger,
    PendingComplaint,
    Rejected,
    RetryQueue,
    build_peer_complaint,
    check_age,
    complaint_from_peer,
    complaint_from_redirect,
    handle_complaint,
)
from ..policy import (
    AccountBook,
    Decision,
    RecipientPolicy,
    SendResult,
    WhitelistResult,
    admit_sends,
    filter_decision,
    whitelist_check,
)
from .config import ProxyConfig, Relationship
from .events import Event, EventSink, discard

log = logging.getLogger(__name__)

REMEDY_TEXT = (
    "5.7.1 {domain}: mail from {peer} refused, that ISP has been identified as a source of spam. "
    "Remedies: switch to a compliant ISP, or ask your ISP to become compliant."
)


class ConnectionDecision(enum.Enum):
    ACCEPT = "Accept"
    REFUSE_UNKNOWN = "RefuseUnknown"
    BOUNCE_CUT_OFF = "BounceCutOff"


class DeliveryResult(enum.Enum):
    DELIVER = "Deliver"
    DROP_LIST = "DropList"
    DISCARDED = "Discarded"


class SlaveConnection(Protocol):
    def docmd(self, cmd: str, args: str = "") -> tuple[int, bytes]: ...

    def data(self, msg: bytes) -> tuple[int, bytes]: ...


@dataclass(frozen=True)
class SessionInfo:
    peer: str
    internal: bool = False
    user: str | None = None


@dataclass
class Envelope:
    reverse_path: str
    recipients: list[str]


@dataclass(frozen=True)
class Forwarded:
    digest: HeaderDigest
    code: int
    text: str
    logged: bool
    via_slave: bool = True


@dataclass(frozen=True)
class RelayRejected:
    reason: str
    code: int
    text: str


RelayResult = Union[Forwarded, RelayRejected]
# transport(peer, complaint, on_reply) delivers a complaint to spamsink@peer and
# eventually calls on_reply(code, text). Unreachable peers: raise ConnectionError
# or report code 0.
ComplaintTransport = Callable[[str, MailMessage, Callable[[int, str], None]], None]


def address_domain(addr: str) -> str:
    return addr.rpartition("@")[2].lower()


def slave_transfer(slave: SlaveConnection, payload: bytes) -> tuple[int, str]:
    try:
        code, text = slave.data(payload)
    except smtplib.SMTPResponseException as exc:
        code, text = exc.smtp_code, exc.smtp_error
    except (smtplib.SMTPServerDisconnected, OSError):
        return 421, "4.4.2 slave server connection lost"
    return code, text.decode("utf-8", "replace") if isinstance(text, bytes) else text


class RelayNode:
    def __init__(
        self,
        config: ProxyConfig,
        clock: Callable[[], datetime],
        *,
        log_store: LogStore | None = None,
        ledger: PeerLedger | None = None,
        accounts: AccountBook | None = None,
        policies: dict[str, RecipientPolicy] | None = None,
        events: EventSink = discard,
        resolve_next_hop: Callable[[str], str] | None = None,
        transport: ComplaintTransport | None = None,
        retry: RetryQueue | None = None,
        deployed: bool = True,
    ):
        self.config = config
        self.domain = config.local_domain
        self.clock = clock
        self.log = log_store if log_store is not None else LogStore(config.log_window, clock)
        self.ledger = ledger if ledger is not None else PeerLedger()
        self.accounts = accounts if accounts is not None else AccountBook()
        self.policies = policies if policies is not None else {}
        self.events = events
        self.resolve_next_hop = resolve_next_hop
        self.transport = transport
        self.retry = retry if retry is not None else RetryQueue()
        self.deployed = deployed

    # -- helpers -----------------------------------------------------------

    def emit(self, kind: str, digest: HeaderDigest | None = None, peer: str | None = None, **detail) -> None:
        self.events(Event(self.clock(), kind, digest.prefix if digest else "-", peer or "-", detail))

    def is_local(self, addr: str) -> bool:
        return address_domain(addr) == self.domain

    def is_spamsink(self, addr: str) -> bool:
        return self.deployed and addr.lower() == f"{SPAMSINK}@{self.domain}"

    def next_hop(self, domain: str) -> str:
        domain = domain.lower()
        if domain == self.domain:
            return self.domain
        if domain in self.config.routes:
            return self.config.routes[domain]
        if self.resolve_next_hop is not None:
            return self.resolve_next_hop(domain)
        return domain

    def policy_for(self, recipient: str) -> RecipientPolicy:
        return self.policies.get(recipient.lower()) or self.policies.get(recipient.partition("@")[0].lower()) or RecipientPolicy()

    def authenticate(self, user: str, password: str) -> bool:
        expected = self.config.users.get(user)
        return expected is not None and expected == password

    def _forwardable(self, peer: str) -> bool:
        return self.config.peers.relationship(peer) is Relationship.CONTRACTED

    # -- connection admission ---------------------------------------------

    def admit_connection(self, peer: str | None) -> ConnectionDecision:
        if not self.deployed or (peer is not None and peer.lower() == self.domain):
            return ConnectionDecision.ACCEPT
        cfg = self.config.peers.get(peer)
        if cfg is None or cfg.relationship is Relationship.UNKNOWN:
            return ConnectionDecision.REFUSE_UNKNOWN
        if cfg.relationship is Relationship.UNCONTRACTED and cfg.cut_off:
            return ConnectionDecision.BOUNCE_CUT_OFF
        return ConnectionDecision.ACCEPT

    def greeting(self, peer: str | None) -> tuple[int, str, ConnectionDecision]:
        decision = self.admit_connection(peer)
        if decision is ConnectionDecision.ACCEPT:
            return 220, f"{self.domain} ESMTP bulkmail proxy", decision
        if decision is ConnectionDecision.BOUNCE_CUT_OFF:
            self.emit("refused", peer=peer, reason="BounceCutOff")
            return 554, REMEDY_TEXT.format(domain=self.domain, peer=peer), decision
        self.emit("refused", peer=peer or "unidentified", reason="RefuseUnknown")
        return 554, f"5.7.1 {self.domain} does not accept mail from unknown peers", decision

    # -- mail path ---------------------------------------------------------

    def final_delivery(self, bulk: BulkClass, policy: RecipientPolicy, remailer: str | None = None) -> DeliveryResult:
        if isinstance(bulk, ListMail):
            if whitelist_check(bulk.identifier, remailer, policy.whitelist.values()) is WhitelistResult.DROP:
                return DeliveryResult.DROP_LIST
        elif isinstance(bulk, Advertisement):
            if filter_decision(bulk, policy.rules) is Decision.DISCARD:
                return DeliveryResult.DISCARDED
        return DeliveryResult.DELIVER

    def _reject(self, reason: str, code: int, text: str, peer: str | None, digest=None) -> RelayRejected:
        self.emit("rejected", digest, peer, reason=reason, code=code)
        return RelayRejected(reason, code, text)

    def relay_message(
        self,
        session: SessionInfo,
        envelope: Envelope,
        message: MailMessage,
        slave: SlaveConnection,
    ) -> RelayResult:
        now = self.clock()
        origin = session.user or session.peer
        if not self.deployed:
            stamped = add_received_stamp(message, ReceivedStamp(self.domain, origin, now, session.user is not None))
            code, text = slave_transfer(slave, stamped.serialize())
            if code >= 400:
                return self._reject("SlaveRejected", code, text, origin)
            return Forwarded(compute_digest_or_zero(message), code, text, False)

        if check_age(message_date(message), now, self.config.age_limit) is Freshness.TOO_OLD:
            return self._reject("TooOld", 554, "5.7.1 message Date is over 7 days in the past", origin)
        try:
            bulk = parse_bulk_header(message)
        except MalformedBulkHeader as exc:
            return self._reject("MalformedBulkHeader", 554, f"5.6.0 {exc}", origin)
        try:
            digest = compute_digest(message)
        except MissingRequiredHeader as exc:
            return self._reject("MissingRequiredHeader", 554, f"5.6.0 {exc}", origin)

        if session.user is not None and not isinstance(bulk, ListMail):
            verdict = admit_sends(self.accounts.get(session.user), len(envelope.recipients), now, self.config.rate)
            if verdict is SendResult.RATE_LIMITED:
                return self._reject("RateLimited", 452, "4.7.0 weekly send limit reached", origin, digest)
            if verdict is SendResult.ACCOUNT_TERMINATED:
                return self._reject("AccountTerminated", 554, "5.7.1 account terminated for spam complaints", origin, digest)

        remailer = address_domain(envelope.reverse_path) if envelope.reverse_path else None
        deliver_to: list[str] = []
        list_drops = 0
        for rcpt in envelope.recipients:
            if not self.is_local(rcpt):
                deliver_to.append(rcpt)
                continue
            outcome = self.final_delivery(bulk, self.policy_for(rcpt), remailer)
            if outcome is DeliveryResult.DELIVER:
                deliver_to.append(rcpt)
            else:
                list_drops += outcome is DeliveryResult.DROP_LIST
                reason = "ListNotWhitelisted" if outcome is DeliveryResult.DROP_LIST else "FilterDiscard"
                self.emit("drop", digest, origin, reason=reason, rcpt=rcpt)
        if not deliver_to:
            if list_drops:
                return RelayRejected("ListNotWhitelisted", 550, "5.7.1 list mail not whitelisted by recipient")
            return Forwarded(digest, 250, "2.0.0 accepted; discarded by recipient filter", False, via_slave=False)

        if deliver_to != envelope.recipients:
            code, text = self._reissue(slave, envelope.reverse_path, deliver_to)
            if code >= 400:
                return self._reject("SlaveRejected", code, text, origin, digest)

        stamp = ReceivedStamp(self.domain, origin, now, authenticated=session.user is not None)
        stamped = add_received_stamp(message, stamp)
        code, text = slave_transfer(slave, stamped.serialize())
        if code >= 400:
            return self._reject("SlaveRejected", code, text, origin, digest)

        logged = not isinstance(bulk, ListMail)
        hop = self.next_hop(address_domain(deliver_to[0]))
        if logged:
            self.log.record(digest, hop, now)
        self.emit("forwarded", digest, hop, origin=origin, logged=int(logged), rcpts=len(deliver_to))
        return Forwarded(digest, code, text, logged)

    def _reissue(self, slave: SlaveConnection, reverse_path: str, recipients: list[str]) -> tuple[int, str]:
        slave.docmd("RSET")
        code, text = slave.docmd("MAIL", f"FROM:<{reverse_path}>")
        if code >= 400:
            return code, text.decode("utf-8", "replace")
        for rcpt in recipients:
            code, text = slave.docmd("RCPT", f"TO:<{rcpt}>")
            if code >= 400:
                return code, text.decode("utf-8", "replace")
        return 250, "2.0.0 ok"

    # -- complaints --------------------------------------------------------

    def intercept_spamsink(self, session: SessionInfo, message: MailMessage) -> ComplaintOutcome:
        now = self.clock()
        if session.user is not None:
            source = LocalRecipient(session.user)
            complaint = complaint_from_redirect(message, f"{session.user}@{self.domain}", now)
        elif not session.internal:
            source = Downstream(session.peer)
            complaint = complaint_from_peer(message, session.peer, now)
        else:
            raise MalformedComplaint("complaints from local users require authentication")
        outcome = handle_complaint(
            self.domain,
            complaint,
            source,
            self.log,
            self.ledger,
            now,
            cfg=self.config.rate,
            accounts=self.accounts,
            forwardable=self._forwardable,
        )
        who = session.user or session.peer
        if isinstance(outcome, Rejected):
            self.emit("complaint", outcome.digest, who, outcome="Rejected", reason=outcome.reason.value)
        elif isinstance(outcome, OriginSanctioned):
            self.emit("complaint", outcome.digest, who, outcome="OriginSanctioned", origin=outcome.origin)
            if outcome.is_peer:
                if self.config.peers.note_complaint(outcome.origin, now):
                    self.emit("cutoff", outcome.digest, outcome.origin)
            else:
                status = outcome.status.value if outcome.status else "-"
                self.emit("notify", outcome.digest, outcome.origin, status=status)
        else:
            self.emit("complaint", outcome.digest, who, outcome="ForwardedUpstream", upstream=outcome.peer)
            self.dispatch(PendingComplaint(outcome.peer, outcome.complaint, outcome.digest, outcome.deadline))
        return outcome

    def forge_complaint(self, upstream: str, ingress: MailMessage) -> None:
        """Send a complaint upstream without any validation (simulator misbehaviour)."""
        now = self.clock()
        digest = compute_digest(ingress)
        self.ledger.settle(upstream, self.config.rate.micro_penalty)
        wire = build_peer_complaint(ingress, digest, self.domain, upstream, now)
        self.emit("complaint", digest, upstream, outcome="Forged")
        self.dispatch(PendingComplaint(upstream, wire, digest, now + self.log.retention))

    def dispatch(self, item: PendingComplaint) -> None:
        def on_reply(code: int, text: str) -> None:
            if code == 0:
                self._unreachable(item)
            elif 200 <= code < 300:
                self.emit("settled", item.digest, item.peer)
            else:
                self.ledger.settle(item.peer, -self.config.rate.micro_penalty)
                self.emit("dispute", item.digest, item.peer, code=code)

        try:
            if self.transport is None:
                raise ConnectionError("no complaint transport configured")
            self.transport(item.peer, item.message, on_reply)
        except ConnectionError:
            self._unreachable(item)

    def _unreachable(self, item: PendingComplaint) -> None:
        if self.retry.defer(item, self.clock()):
            self.emit("deferred", item.digest, item.peer, attempts=item.attempts)
        else:
            self.ledger.settle(item.peer, -self.config.rate.micro_penalty)
            self.emit("dead_letter", item.digest, item.peer, attempts=item.attempts)

    def tick(self) -> None:
        """Retry due complaint deliveries."""
        for item in self.retry.due(self.clock()):
            self.dispatch(item)


def compute_digest_or_zero(message: MailMessage) -> HeaderDigest:
    try:
        return compute_digest(message)
    except MissingRequiredHeader:
        return HeaderDigest(bytes(32))
