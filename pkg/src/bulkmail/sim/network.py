"""Deterministic in-process network of relay nodes on a virtual clock.

Every deployed node runs the same :class:`RelayNode` and :class:`SmtpSession`
code as the TCP proxy; only the transport differs. Sessions are driven
in-process and each node's slave server is a :class:`SimSlave` that delivers
to local mailboxes or queues a transfer to the next hop.

Events run from a heap ordered by (virtual time, sequence number), so a run
is a pure function of the scenario, its seed, the topology and the MX table.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
import random
import re
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from email.utils import format_datetime
from typing import Callable

from ..classify import BulkClass, apply_bulk_header, format_bulk_value, parse_bulk_header, parse_class_spec
from ..errors import MalformedBulkHeader, NoRouteAccepted, ScriptError
from ..mail import MailMessage, ReceivedStamp, add_received_stamp, strip_downstream_headers, upstream_peer
from ..penalty import SPAMSINK
from ..policy import RateLimitConfig, RecipientPolicy
from ..proxy.config import PeerConfig, PeerTable, ProxyConfig, Relationship
from ..proxy.events import Event
from ..proxy.relay import ConnectionDecision, RelayNode, address_domain
from ..proxy.session import SmtpSession, parse_path, transact

SIM_EPOCH = datetime(2005, 3, 1, tzinfo=timezone.utc)
HOP_LATENCY = timedelta(seconds=1)
PARTITION_RETRY = timedelta(minutes=5)
PARTITION_GIVE_UP = timedelta(days=5)
DEFAULT_PASSWORD = "secret"
_WORDS = ("offer", "meeting", "lunch", "report", "deal", "notes", "update", "hello", "invoice", "photos")


class NodeKind(enum.Enum):
    PROXY = "proxy"
    LEGACY = "legacy"
    MISBEHAVING = "misbehaving"


@dataclass
class NodeSpec:
    domain: str
    kind: NodeKind = NodeKind.PROXY
    users: dict[str, str] = field(default_factory=dict)
    policies: dict[str, RecipientPolicy] = field(default_factory=dict)
    routes: dict[str, str] = field(default_factory=dict)

    def policy(self, local: str) -> RecipientPolicy:
        return self.policies.setdefault(local.lower(), RecipientPolicy())


@dataclass
class Topology:
    nodes: dict[str, NodeSpec] = field(default_factory=dict)
    contracts: set[frozenset] = field(default_factory=set)
    # (host, guest) -> complaint threshold: host tolerates guest as uncontracted
    tolerated: dict[tuple[str, str], int] = field(default_factory=dict)

    def add_node(self, domain: str, kind: NodeKind = NodeKind.PROXY) -> NodeSpec:
        domain = domain.lower()
        if domain in self.nodes:
            raise ScriptError(f"duplicate node {domain}")
        spec = self.nodes[domain] = NodeSpec(domain, kind)
        return spec

    def node(self, domain: str) -> NodeSpec:
        try:
            return self.nodes[domain.lower()]
        except KeyError:
            raise ScriptError(f"unknown node {domain}") from None

    def contract(self, a: str, b: str) -> None:
        self.node(a), self.node(b)
        if a.lower() == b.lower():
            raise ScriptError(f"{a} cannot contract with itself")
        self.contracts.add(frozenset((a.lower(), b.lower())))

    def tolerate(self, host: str, guest: str, threshold: int = 100) -> None:
        self.node(host), self.node(guest)
        self.tolerated[(host.lower(), guest.lower())] = threshold

    def add_user(self, address: str, password: str = DEFAULT_PASSWORD) -> None:
        local, _, domain = address.lower().partition("@")
        self.node(domain).users[local] = password

    def peers_of(self, domain: str) -> PeerTable:
        table = PeerTable()
        for pair in sorted(self.contracts, key=sorted):
            if domain in pair:
                (other,) = pair - {domain}
                table.add(PeerConfig(other, Relationship.CONTRACTED))
        for (host, guest), threshold in sorted(self.tolerated.items()):
            if host == domain and table.get(guest) is None:
                table.add(PeerConfig(guest, Relationship.UNCONTRACTED, threshold=threshold))
        return table


@dataclass
class MxTable:
    entries: dict[str, list[str]] = field(default_factory=dict)

    def add(self, dest: str, relays: list[str]) -> None:
        self.entries[dest.lower()] = [r.lower() for r in relays]

    def lookup(self, dest: str) -> list[str]:
        return self.entries.get(dest.lower(), [dest.lower()])

    def validate(self, topology: Topology) -> None:
        for dest, relays in self.entries.items():
            for relay in relays:
                if relay not in topology.nodes:
                    raise ScriptError(f"MX for {dest} lists unknown relay {relay}")


@dataclass(frozen=True)
class RouteChoice:
    relay: str
    decision: ConnectionDecision
    refused: tuple[str, ...] = ()


def route_with_fallback(
    dest: str,
    mx: MxTable,
    topology: Topology,
    admit: Callable[[str], ConnectionDecision],
    *,
    candidates: list[str] | None = None,
) -> RouteChoice:
    """Try MX entries in preference order, skipping relays that refuse us as unknown.

    A relay that answers with the cut-off bounce ends the search: that reply
    is a policy bounce, not a reason to try elsewhere.
    """
    refused = []
    for relay in mx.lookup(dest) if candidates is None else candidates:
        if relay not in topology.nodes:
            raise ScriptError(f"route to {dest} names unknown relay {relay}")
        decision = admit(relay)
        if decision is ConnectionDecision.REFUSE_UNKNOWN:
            refused.append(relay)
            continue
        return RouteChoice(relay, decision, tuple(refused))
    raise NoRouteAccepted(f"no MX entry for {dest} accepted the connection (tried {', '.join(refused) or 'none'})")


# -- trace --------------------------------------------------------------------


def _fmt_value(value) -> str:
    text = str(value)
    if not text or re.search(r'[\s"=]', text):
        return json.dumps(text)
    return text


@dataclass(frozen=True)
class TraceEvent:
    time: datetime
    seq: int
    node: str
    kind: str
    fields: tuple[tuple[str, str], ...] = ()

    def get(self, key: str, default: str | None = None) -> str | None:
        for k, v in self.fields:
            if k == key:
                return v
        return default

    def format(self) -> str:
        extra = "".join(f" {k}={_fmt_value(v)}" for k, v in self.fields)
        return f"{self.time.strftime('%Y-%m-%dT%H:%M:%SZ')} {self.node} {self.kind}{extra}"


# -- scenario actions ---------------------------------------------------------


@dataclass(frozen=True)
class Action:
    at: timedelta
    verb: str
    args: tuple[str, ...] = ()
    opts: tuple[tuple[str, str], ...] = ()
    line: int = 0

    def opt(self, key: str, default: str | None = None) -> str | None:
        return dict(self.opts).get(key, default)


_OPS: dict[str, Callable[[int, int], bool]] = {
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    ">=": lambda a, b: a >= b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    "<": lambda a, b: a < b,
}


@dataclass(frozen=True)
class Expect:
    key: str
    op: str
    value: int
    origin: str = ""

    def __post_init__(self):
        if self.op not in _OPS:
            raise ScriptError(f"unknown comparison {self.op!r}")

    def check(self, metrics: dict[str, int]) -> str | None:
        actual = metrics.get(self.key, 0)
        if _OPS[self.op](actual, self.value):
            return None
        where = f" ({self.origin})" if self.origin else ""
        return f"expected {self.key} {self.op} {self.value}, got {actual}{where}"


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    actions: list[Action] = field(default_factory=list)
    expectations: list[Expect] = field(default_factory=list)
    rate: RateLimitConfig = field(default_factory=RateLimitConfig)


@dataclass
class SimResult:
    trace: list[TraceEvent]
    metrics: dict[str, int]
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures

    def trace_text(self) -> str:
        return "".join(ev.format() + "\n" for ev in self.trace)

    def metrics_text(self) -> str:
        return "".join(f"{k} {v}\n" for k, v in sorted(self.metrics.items()))


# -- nodes --------------------------------------------------------------------


@dataclass
class _Transfer:
    sender: str
    relay: str
    reverse_path: str
    recipients: list[str]
    payload: bytes
    ref: str | None
    first_try: datetime


class SimSlave:
    """Stand-in for a site's own MTA: local mailboxes plus a store-and-forward queue."""

    def __init__(self, node: "SimNode"):
        self.node = node
        self.reverse_path: str | None = None
        self.recipients: list[str] = []

    def docmd(self, cmd: str, args: str = "") -> tuple[int, bytes]:
        cmd = cmd.upper()
        if cmd in ("EHLO", "HELO"):
            return 250, f"{self.node.domain}\nPIPELINING\n8BITMIME".encode()
        if cmd == "MAIL":
            path = parse_path(args)
            if path is None:
                return 501, b"5.5.4 syntax error"
            self.reverse_path, self.recipients = path, []
            return 250, b"2.1.0 sender ok"
        if cmd == "RCPT":
            path = parse_path(args)
            if self.reverse_path is None:
                return 503, b"5.5.1 need MAIL first"
            if not path:
                return 501, b"5.5.4 syntax error"
            if address_domain(path) == self.node.domain and not self.node.has_user(path):
                return 550, b"5.1.1 no such user"
            self.recipients.append(path)
            return 250, b"2.1.5 recipient ok"
        if cmd == "RSET":
            self.reverse_path, self.recipients = None, []
            return 250, b"2.0.0 reset"
        if cmd == "NOOP":
            return 250, b"2.0.0 ok"
        if cmd == "QUIT":
            return 221, b"2.0.0 bye"
        return 502, b"5.5.1 command not implemented"

    def data(self, payload: bytes) -> tuple[int, bytes]:
        if self.reverse_path is None or not self.recipients:
            return 503, b"5.5.1 need RCPT first"
        self.node.accept(self.reverse_path, list(self.recipients), payload)
        self.reverse_path, self.recipients = None, []
        return 250, b"2.0.0 queued"

    def close(self) -> None:
        pass


class SimNode:
    def __init__(self, sim: "Simulator", spec: NodeSpec, peers: PeerTable, rate: RateLimitConfig):
        self.sim = sim
        self.spec = spec
        self.domain = spec.domain
        config = ProxyConfig(local_domain=spec.domain, rate=rate, peers=peers, users=dict(spec.users), routes=dict(spec.routes))
        self.relay = RelayNode(
            config,
            sim.clock,
            policies=spec.policies,
            events=self._on_event,
            resolve_next_hop=lambda dest: sim.choose_hop(self, dest) or dest,
            transport=self._send_complaint,
            deployed=spec.kind is not NodeKind.LEGACY,
        )
        self.relay.ledger.observers.append(self._on_settle)
        self.mailbox: dict[tuple[str, str], list[MailMessage]] = {}
        self.relayed: dict[str, MailMessage] = {}
        self.hijack: set[str | None] = set()

    def has_user(self, address: str) -> bool:
        return address.partition("@")[0].lower() in self.spec.users

    def _on_event(self, event: Event) -> None:
        fields = {"digest": event.digest, "peer": event.peer, **event.detail}
        self.sim.trace(self.domain, event.kind, **fields)

    def _on_settle(self, peer: str, amount: int, balance: int) -> None:
        self.sim.trace(self.domain, "ledger", peer=peer, delta=amount, balance=balance)

    def _send_complaint(self, peer: str, message: MailMessage, on_reply: Callable[[int, str], None]) -> None:
        self.sim.schedule(self.sim.now + HOP_LATENCY, lambda: self.sim.deliver_complaint(self.domain, peer, message, on_reply))

    def accept(self, reverse_path: str, recipients: list[str], payload: bytes) -> None:
        """The slave took responsibility for a message: deliver or queue it."""
        message = MailMessage.parse(payload)
        ref = self.sim.ref_of(message)
        if ref is not None:
            self.relayed[ref] = message
        outbound: dict[str, list[str]] = {}
        for rcpt in recipients:
            if address_domain(rcpt) == self.domain:
                self.sim.deliver_local(self, rcpt, message, ref)
                continue
            hop = self.sim.choose_hop(self, address_domain(rcpt))
            if hop is None:
                self.sim.trace(self.domain, "bounced", ref=ref or "-", rcpt=rcpt, reason="NoRouteAccepted")
                continue
            outbound.setdefault(hop, []).append(rcpt)
        if outbound and (None in self.hijack or ref in self.hijack):
            payload = message.with_body(self.sim.junk_body()).serialize()
        for hop, rcpts in outbound.items():
            self.sim.send_transfer(_Transfer(self.domain, hop, reverse_path, rcpts, payload, ref, self.sim.now))


# -- simulator ----------------------------------------------------------------


class Simulator:
    def __init__(self, topology: Topology, mx: MxTable, *, seed: int = 0, rate: RateLimitConfig | None = None):
        mx.validate(topology)
        self.topology = topology
        self.mx = mx
        self.now = SIM_EPOCH
        self.rng = random.Random(seed)
        self._heap: list[tuple[datetime, int, Callable[[], None]]] = []
        self._seq = 0
        self._trace_seq = 0
        self._ticks: set[tuple[str, datetime]] = set()
        self.events: list[TraceEvent] = []
        self.partitions: set[frozenset] = set()
        self.refs: dict[str, str] = {}
        self.originals: dict[str, bytes] = {}
        self.submitted: set[str] = set()
        self._context_ref: str | None = None
        self._ref_counter = 0
        rate = rate or RateLimitConfig()
        self.nodes = {d: SimNode(self, spec, topology.peers_of(d), rate) for d, spec in sorted(topology.nodes.items())}

    # -- plumbing ----------------------------------------------------------

    def clock(self) -> datetime:
        return self.now

    def schedule(self, at: datetime, fn: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, fn))

    def trace(self, node: str, kind: str, /, **fields) -> None:
        if self._context_ref is not None and "ref" not in fields:
            fields["ref"] = self._context_ref
        self._trace_seq += 1
        items = tuple((k, str(v)) for k, v in fields.items())
        self.events.append(TraceEvent(self.now, self._trace_seq, node, kind, items))

    def node(self, domain: str) -> SimNode:
        try:
            return self.nodes[domain.lower()]
        except KeyError:
            raise ScriptError(f"unknown node {domain}") from None

    def linked(self, a: str, b: str) -> bool:
        return frozenset((a, b)) not in self.partitions

    def ref_of(self, message: MailMessage) -> str | None:
        return self.refs.get(message.get("Message-ID", ""))

    def junk_body(self) -> bytes:
        words = " ".join(self.rng.choice(_WORDS) for _ in range(12))
        return f"Replacement text: {words}\r\n".encode()

    def run(self) -> None:
        while self._heap:
            at, _, fn = heapq.heappop(self._heap)
            self.now = max(self.now, at)
            fn()
            self._schedule_retries()

    def _schedule_retries(self) -> None:
        for domain, node in self.nodes.items():
            due = node.relay.retry.next_due()
            if due is not None and (domain, due) not in self._ticks:
                self._ticks.add((domain, due))
                self.schedule(max(due, self.now), lambda n=node, d=due: self._tick(n, d))

    def _tick(self, node: SimNode, due: datetime) -> None:
        self._ticks.discard((node.domain, due))
        node.relay.tick()

    # -- routing -----------------------------------------------------------

    def candidates(self, node: SimNode, dest: str) -> list[str]:
        if dest in node.spec.routes:
            return [node.spec.routes[dest]]
        relays = self.mx.lookup(dest)
        if node.domain in relays:
            # only more preferred exchangers; we are the final stop otherwise
            relays = relays[: relays.index(node.domain)]
        return [r for r in relays if r in self.nodes]

    def choose_hop(self, node: SimNode, dest: str) -> str | None:
        if dest == node.domain:
            return node.domain
        try:
            choice = route_with_fallback(
                dest,
                self.mx,
                self.topology,
                lambda relay: self.nodes[relay].relay.admit_connection(node.domain),
                candidates=self.candidates(node, dest),
            )
        except NoRouteAccepted:
            return None
        return choice.relay

    def _open(self, target: SimNode, sender: str) -> tuple[SmtpSession, int, str]:
        session = SmtpSession(target.relay, SimSlave(target), sender, internal=False)
        greeting = session.open()
        return session, greeting.code, greeting.text

    # -- mail --------------------------------------------------------------

    def send_transfer(self, transfer: _Transfer) -> None:
        digest = hashlib.sha256(MailMessage.parse(transfer.payload).body).hexdigest()[:8]
        self.trace(transfer.sender, "transfer", ref=transfer.ref or "-", to=transfer.relay, body=digest, rcpts=len(transfer.recipients))
        self.schedule(self.now + HOP_LATENCY, lambda: self._run_transfer(transfer))

    def _run_transfer(self, t: _Transfer) -> None:
        if not self.linked(t.sender, t.relay):
            if self.now - t.first_try >= PARTITION_GIVE_UP:
                self.trace(t.sender, "bounced", ref=t.ref or "-", to=t.relay, reason="LinkDown")
            else:
                self.trace(t.sender, "deferred", ref=t.ref or "-", to=t.relay, reason="LinkDown")
                self.schedule(self.now + PARTITION_RETRY, lambda: self._run_transfer(t))
            return
        target = self.nodes[t.relay]
        self._context_ref = t.ref
        try:
            session, code, text = self._open(target, t.sender)
            if code >= 400:
                self.trace(t.sender, "bounced", ref=t.ref or "-", to=t.relay, code=code, text=text)
                return
            reply = transact(session, helo=t.sender, mail_from=t.reverse_path, rcpts=t.recipients, payload=t.payload)
            if reply.ok:
                self.trace(t.relay, "received", ref=t.ref or "-", sender=t.sender)
            else:
                self.trace(t.sender, "bounced", ref=t.ref or "-", to=t.relay, code=reply.code, text=reply.text)
        finally:
            self._context_ref = None

    def deliver_local(self, node: SimNode, rcpt: str, message: MailMessage, ref: str | None) -> None:
        key = (rcpt.lower(), ref or "-")
        node.mailbox.setdefault(key, []).append(message)
        try:
            cls = format_bulk_value(parse_bulk_header(message)) or "personal"
        except MalformedBulkHeader:
            cls = "malformed"
        cls = cls.split(":", 1)[0].lower()
        self.trace(node.domain, "delivered", ref=ref or "-", rcpt=rcpt, cls=cls)
        if ref is not None and ref in self.originals and message.body != self.originals[ref]:
            self.trace(node.domain, "mismatch", ref=ref, rcpt=rcpt)
            culprit = self.identify_culprit(ref)
            if culprit is not None:
                self.trace(node.domain, "culprit", ref=ref, node=culprit)

    def identify_culprit(self, ref: str) -> str | None:
        """First node that put a body other than the original on the wire."""
        original = hashlib.sha256(self.originals[ref]).hexdigest()[:8]
        for ev in self.events:
            if ev.kind == "transfer" and ev.get("ref") == ref and ev.get("body") != original:
                return ev.node
        return None

    def new_ref(self) -> str:
        self._ref_counter += 1
        return f"m{self._ref_counter}"

    def compose(
        self,
        sender: str,
        recipients: list[str],
        bulk: BulkClass,
        ref: str,
        *,
        date: datetime | None = None,
        from_header: str | None = None,
    ) -> MailMessage:
        node = address_domain(sender)
        msg_id = f"<{self.rng.getrandbits(64):016x}.{ref}@{node}>"
        words = [self.rng.choice(_WORDS) for _ in range(3)]
        body = "".join(f"{' '.join(self.rng.choice(_WORDS) for _ in range(8))}\r\n" for _ in range(3)).encode()
        message = MailMessage(
            (
                ("Date", format_datetime(date or self.now)),
                ("From", from_header or sender),
                ("To", ", ".join(recipients)),
                ("Subject", " ".join(words)),
                ("Message-ID", msg_id),
            ),
            body,
        )
        message = apply_bulk_header(message, bulk)
        if ref in self.originals:
            raise ScriptError(f"message reference {ref} used twice")
        self.refs[msg_id] = ref
        self.originals[ref] = body
        return message

    def submit(self, sender: str, recipients: list[str], message: MailMessage, ref: str, *, mail_from: str | None = None) -> int:
        node = self.node(address_domain(sender))
        local = sender.partition("@")[0].lower()
        if local not in node.spec.users:
            raise ScriptError(f"{sender} is not a user of {node.domain}")
        self.submitted.add(ref)
        session = SmtpSession(node.relay, SimSlave(node), None, internal=True)
        self._context_ref = ref
        try:
            session.open()
            reply = transact(
                session,
                helo=node.domain,
                mail_from=mail_from or sender,
                rcpts=recipients,
                payload=message.serialize(),
                auth=(local, node.spec.users[local]),
            )
        finally:
            self._context_ref = None
        self.trace(node.domain, "submit", ref=ref, user=sender, code=reply.code)
        return reply.code

    # -- complaints --------------------------------------------------------

    def complain(self, user: str, ref: str) -> int | None:
        node = self.node(address_domain(user))
        copies = node.mailbox.get((user.lower(), ref))
        if not copies:
            self.trace(node.domain, "complaint_skipped", ref=ref, user=user, reason="NotDelivered")
            return None
        local = user.partition("@")[0].lower()
        redirect = copies[0].with_header("Resent-From", user, top=True)
        session = SmtpSession(node.relay, SimSlave(node), None, internal=True)
        self._context_ref = ref
        try:
            session.open()
            reply = transact(
                session,
                helo=node.domain,
                mail_from=user,
                rcpts=[f"{SPAMSINK}@{node.domain}"],
                payload=redirect.serialize(),
                auth=(local, node.spec.users.get(local, "")),
            )
        finally:
            self._context_ref = None
        self.trace(node.domain, "complaint_filed", ref=ref, user=user, code=reply.code)
        return reply.code

    def deliver_complaint(self, sender: str, peer: str, message: MailMessage, on_reply: Callable[[int, str], None]) -> None:
        if peer not in self.nodes or not self.linked(sender, peer):
            on_reply(0, "unreachable")
            return
        target = self.nodes[peer]
        session, code, text = self._open(target, sender)
        if code >= 400:
            on_reply(code, text)
            return
        reply = transact(
            session,
            helo=sender,
            mail_from=f"{SPAMSINK}@{sender}",
            rcpts=[f"{SPAMSINK}@{peer}"],
            payload=message.serialize(),
        )
        on_reply(reply.code, reply.text)

    def forge(self, attacker: str, ref: str, *, to: str | None = None, copy_of: str | None = None) -> None:
        """Have ``attacker`` file a complaint it has no business filing."""
        node = self.node(attacker)
        if copy_of is not None:
            copies = self.node(address_domain(copy_of)).mailbox.get((copy_of.lower(), ref))
            if not copies:
                raise ScriptError(f"{copy_of} never received {ref}")
            ingress = copies[0]
            upstream = to
        else:
            seen = node.relayed.get(ref)
            if seen is None:
                raise ScriptError(f"{attacker} never relayed {ref}")
            ingress = strip_downstream_headers(seen, node.domain)
            upstream = to or upstream_peer(seen, node.domain)
        if upstream is None:
            raise ScriptError("forge needs a target (to=)")
        node.relay.forge_complaint(upstream, ingress)

    def inject(self, attacker: str, rcpt: str, via: str, ref: str, bulk: BulkClass) -> None:
        """Spam made up by ``attacker`` and passed off as received from ``via``."""
        node = self.node(attacker)
        sender = f"promo@{via}"
        message = self.compose(sender, [rcpt], bulk, ref)
        forged = ReceivedStamp(via, "dialup.invalid", self.now - timedelta(minutes=1), False)
        message = add_received_stamp(message, forged)
        self.submitted.add(ref)
        session = SmtpSession(node.relay, SimSlave(node), via, internal=False)
        self._context_ref = ref
        try:
            reply = session.open()
            if reply.ok:
                reply = transact(session, helo=via, mail_from=sender, rcpts=[rcpt], payload=message.serialize())
        finally:
            self._context_ref = None
        self.trace(node.domain, "injected", ref=ref, via=via, code=reply.code)

    # -- metrics -----------------------------------------------------------

    def metrics(self) -> dict[str, int]:
        counts: dict[str, int] = {}

        def bump(key: str, node: str | None = None, by: int = 1) -> None:
            counts[key] = counts.get(key, 0) + by
            if node is not None:
                counts[f"{key}@{node}"] = counts.get(f"{key}@{node}", 0) + by

        terminal: set[str] = set()
        for ev in self.events:
            bump(ev.kind, ev.node)
            ref = ev.get("ref")
            if ev.kind == "complaint":
                bump(f"complaint.{ev.get('outcome')}", ev.node)
                if ev.get("reason"):
                    bump(f"complaint.rejected.{ev.get('reason')}", ev.node)
            elif ev.kind in ("rejected", "drop", "bounced"):
                bump(f"{ev.kind}.{ev.get('reason') or ev.get('code')}", ev.node)
                terminal.add(ref)
            elif ev.kind == "delivered":
                bump(f"delivered.{ev.get('cls')}", ev.node)
                terminal.add(ref)
            elif ev.kind == "notify":
                bump(f"sanctioned.{ev.get('peer')}@{ev.node}")
            elif ev.kind == "culprit":
                bump(f"culprit.{ev.get('node')}")
            elif ev.kind == "received":
                bump("ingress", ev.node)
            elif ev.kind == "submit" and int(ev.get("code", "0")) >= 400:
                bump("submit.failed", ev.node)
                terminal.add(ref)
            elif ev.kind == "injected" and int(ev.get("code", "0")) >= 400:
                terminal.add(ref)
        counts["silent"] = len(self.submitted - terminal)
        moved = 0
        for domain, node in self.nodes.items():
            net = node.relay.ledger.net()
            counts[f"ledger.{domain}"] = net
            moved += sum(abs(v) for v in node.relay.ledger.balances().values())
            counts[f"log.{domain}"] = len(node.relay.log)
            for account in node.relay.accounts:
                counts[f"terminated.{account.user_id}@{domain}"] = int(account.terminated)
            for peer in node.relay.config.peers:
                if peer.cut_off:
                    counts[f"cutoff.{peer.domain}@{domain}"] = 1
        counts["ledger.sum"] = sum(counts[f"ledger.{d}"] for d in self.nodes)
        counts["ledger.moved"] = moved
        return counts


_DURATION = re.compile(r"^([+-]?)(\d+(?:\.\d+)?)([smhd]?)$")
_UNITS = {"": 1, "s": 1, "m": 60, "h": 3600, "d": 86400}


def parse_duration(text: str) -> timedelta:
    """``90``, ``90s``, ``15m``, ``2h``, ``-8d``; bare numbers are seconds."""
    m = _DURATION.match(text.strip())
    if not m:
        raise ScriptError(f"bad duration {text!r}")
    seconds = float(m.group(2)) * _UNITS[m.group(3)]
    return timedelta(seconds=-seconds if m.group(1) == "-" else seconds)


def validate_action(action: Action, sim: Simulator) -> None:
    def domain_of(addr: str) -> str:
        return address_domain(addr) if "@" in addr else addr.lower()

    try:
        if action.verb == "send":
            for addr in [action.args[0], *action.args[1].split(",")]:
                sim.node(domain_of(addr))
        elif action.verb in ("complain", "forge", "corrupt", "inject"):
            sim.node(domain_of(action.args[0]))
        elif action.verb in ("partition", "heal"):
            sim.node(action.args[0]), sim.node(action.args[1])
    except ScriptError as exc:
        raise ScriptError(f"line {action.line}: {exc}") from None


def perform(sim: Simulator, action: Action) -> None:
    verb, args = action.verb, action.args
    if verb == "send":
        sender, rcpts = args[0], args[1].split(",")
        ref = action.opt("ref") or sim.new_ref()
        date = action.opt("date")
        message = sim.compose(
            sender,
            rcpts,
            parse_class_spec(args[2] if len(args) > 2 else "personal"),
            ref,
            date=sim.now + parse_duration(date) if date else None,
            from_header=action.opt("from-header"),
        )
        sim.submit(sender, rcpts, message, ref, mail_from=action.opt("mail-from"))
    elif verb == "complain":
        sim.complain(args[0], args[1])
    elif verb == "forge":
        sim.forge(args[0], args[1], to=action.opt("to"), copy_of=action.opt("copy"))
    elif verb == "corrupt":
        sim.node(args[0]).hijack.add(args[1] if len(args) > 1 else None)
    elif verb == "inject":
        via = action.opt("via")
        if via is None:
            raise ScriptError(f"line {action.line}: inject needs via=<peer>")
        sim.inject(args[0], args[1], via, action.opt("ref") or sim.new_ref(), parse_class_spec(action.opt("class", "adv:biz.offers")))
    elif verb == "partition":
        sim.partitions.add(frozenset((args[0].lower(), args[1].lower())))
        sim.trace(args[0].lower(), "partition", peer=args[1].lower())
    elif verb == "heal":
        sim.partitions.discard(frozenset((args[0].lower(), args[1].lower())))
        sim.trace(args[0].lower(), "heal", peer=args[1].lower())
    elif verb == "advance":
        pass
    else:
        raise ScriptError(f"line {action.line}: unknown action {verb!r}")
