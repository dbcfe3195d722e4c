import json
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bulkmail.errors import MalformedComplaint
from bulkmail.hashlog import LogStore
from bulkmail.mail import MailMessage, ReceivedStamp, add_received_stamp, compute_digest
from bulkmail.penalty import (
    Complaint,
    Downstream,
    ForwardedUpstream,
    Freshness,
    LocalRecipient,
    OriginSanctioned,
    PeerLedger,
    PendingComplaint,
    Rejected,
    RejectReason,
    RetryQueue,
    check_age,
    complaint_from_peer,
    complaint_from_redirect,
    handle_complaint,
)
from bulkmail.policy import AccountBook, ComplaintResult, RateLimitConfig

T0 = datetime(2005, 3, 1, 10, tzinfo=timezone.utc)
P = RateLimitConfig().micro_penalty


def original(bulk: str | None = "ADV: biz.offers") -> MailMessage:
    headers = [
        ("Date", "Tue, 1 Mar 2005 10:00:00 +0000"),
        ("From", "alice@r0.example"),
        ("To", "bob@dest.example"),
    ]
    if bulk:
        headers.append(("X-Bulk-Mail", bulk))
    return MailMessage(tuple(headers), b"buy now\r\n")


class Chain:
    """Relays r0 (origin ISP) .. r{n-1} (recipient ISP), each with its own log and ledger."""

    def __init__(self, hops: int, message: MailMessage | None = None):
        self.names = [f"r{i}.example" for i in range(hops)]
        self.logs = {n: LogStore() for n in self.names}
        self.ledgers = {n: PeerLedger() for n in self.names}
        self.accounts = AccountBook()
        msg = message or original()
        prev = "alice"
        for i, name in enumerate(self.names):
            nxt = self.names[i + 1] if i + 1 < hops else name
            self.logs[name].record(compute_digest(msg), nxt, T0)
            msg = add_received_stamp(msg, ReceivedStamp(name, prev, T0, authenticated=(i == 0)))
            prev = name
        self.delivered = msg

    def complain(self, now=T0 + timedelta(hours=1), message: MailMessage | None = None):
        """Walk the complaint back hop by hop; returns every outcome in order."""
        relay = self.names[-1]
        complaint = Complaint(message or self.delivered, "bob", now)
        source = LocalRecipient("bob")
        outcomes = []
        while True:
            out = handle_complaint(
                relay, complaint, source, self.logs[relay], self.ledgers[relay], now, accounts=self.accounts
            )
            outcomes.append(out)
            if not isinstance(out, ForwardedUpstream):
                return outcomes
            complaint = complaint_from_peer(out.complaint, relay, now)
            source = Downstream(relay)
            relay = out.peer

    def net(self, name: str) -> int:
        return self.ledgers[name].net()


def test_three_hop_chain_settles():
    chain = Chain(3)
    outcomes = chain.complain()
    assert [type(o) for o in outcomes] == [ForwardedUpstream, ForwardedUpstream, OriginSanctioned]
    assert outcomes[-1].origin == "alice"
    assert outcomes[-1].status is ComplaintResult.WARNED
    assert (chain.net("r2.example"), chain.net("r1.example"), chain.net("r0.example")) == (P, 0, -P)
    assert chain.ledgers["r1.example"].balances() == {"r2.example": -P, "r0.example": P}


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6))
def test_chain_conservation(hops):
    chain = Chain(hops)
    outcomes = chain.complain()
    assert isinstance(outcomes[-1], OriginSanctioned)
    nets = [chain.net(n) for n in chain.names]
    assert sum(nets) == 0
    if hops > 1:
        assert nets[-1] == P and nets[0] == -P
        assert all(v == 0 for v in nets[1:-1])
    else:
        assert nets == [0]


def test_duplicate_complaint_rejected():
    chain = Chain(2)
    chain.complain()
    again = chain.complain()
    assert again == [Rejected(RejectReason.DUPLICATE, again[0].digest)]
    assert chain.net("r1.example") == P


def test_list_mail_complaint_rejected():
    chain = Chain(2, original("LIST: news.1"))
    assert chain.complain() == [Rejected(RejectReason.LIST_MAIL)]
    assert all(chain.net(n) == 0 for n in chain.names)


def test_unknown_message_not_in_log():
    chain = Chain(2)
    other = chain.delivered.replace("Date", "Wed, 2 Mar 2005 10:00:00 +0000")
    out = chain.complain(message=other)
    assert len(out) == 1 and out[0].reason is RejectReason.NOT_IN_LOG


def test_relay_not_on_path_is_not_in_log():
    chain = Chain(2)
    out = handle_complaint(
        "x.example", Complaint(chain.delivered, "bob", T0), LocalRecipient("bob"), LogStore(), PeerLedger(), T0
    )
    assert out == Rejected(RejectReason.NOT_IN_LOG)


def test_expired_entry_rejected():
    chain = Chain(2)
    out = chain.complain(now=T0 + timedelta(days=15))
    assert out[0].reason is RejectReason.NOT_IN_LOG


def test_wrong_downstream_does_not_burn_the_flag():
    chain = Chain(3)
    mid = "r1.example"  # logged the message as sent to r2
    wrong = handle_complaint(
        mid,
        Complaint(chain.delivered, "x", T0),
        Downstream("evil.example"),
        chain.logs[mid],
        chain.ledgers[mid],
        T0,
    )
    assert wrong.reason is RejectReason.UNKNOWN_DOWNSTREAM
    assert chain.logs[mid].lookup(wrong.digest, T0).complaint_filed is False
    assert chain.ledgers[mid].balances() == {}
    assert isinstance(chain.complain()[-1], OriginSanctioned)


def test_uncontracted_upstream_is_sanctioned_as_peer():
    chain = Chain(2)
    relay = "r1.example"
    out = handle_complaint(
        relay,
        Complaint(chain.delivered, "bob", T0),
        LocalRecipient("bob"),
        chain.logs[relay],
        chain.ledgers[relay],
        T0,
        forwardable=lambda peer: False,
    )
    assert out == OriginSanctioned("r0.example", out.digest, is_peer=True)
    assert chain.ledgers[relay].balances() == {}


def test_tenth_complaint_terminates_origin_account():
    book = AccountBook()
    for i in range(10):
        msg = original().replace("Date", f"Tue, 1 Mar 2005 10:00:{i:02d} +0000")
        chain = Chain(2, msg)
        chain.accounts = book
        last = chain.complain()[-1]
    assert last.status is ComplaintResult.TERMINATED


def test_malformed_complaint():
    bad = Complaint(MailMessage((("X-Bulk-Mail", "ADV:"),)), "bob", T0)
    with pytest.raises(MalformedComplaint):
        handle_complaint("r.example", bad, LocalRecipient("bob"), LogStore(), PeerLedger(), T0)
    with pytest.raises(MalformedComplaint):
        complaint_from_peer(MailMessage((("From", "x"),), b""), "p", T0)


def test_redirect_drops_resent_headers():
    msg = original().with_header("Resent-From", "bob@dest.example", top=True)
    assert complaint_from_redirect(msg, "bob", T0).original.get("Resent-From") is None


def test_check_age():
    now = T0 + timedelta(days=7)
    assert check_age(T0, now) is Freshness.FRESH
    assert check_age(T0 - timedelta(seconds=1), now) is Freshness.TOO_OLD
    assert check_age(None, now) is Freshness.TOO_OLD


def test_ledger_report_round_trip(tmp_path):
    ledger = PeerLedger()
    seen = []
    ledger.observers.append(lambda peer, amount, bal: seen.append((peer, amount, bal)))
    ledger.settle("b.example", 10)
    ledger.settle("a.example", -30)
    ledger.settle("b.example", 10)
    assert seen[-1] == ("b.example", 10, 20)
    assert ledger.report() == "a.example -30\nb.example 20\n"
    path = tmp_path / "ledger.txt"
    ledger.save(path)
    again = PeerLedger.load(path)
    assert again.balances() == ledger.balances()
    assert again.net() == -10
    with pytest.raises(ValueError):
        PeerLedger.parse_report(["just-one-field"])


def _pending(deadline: datetime) -> PendingComplaint:
    msg = original()
    return PendingComplaint("up.example", msg, compute_digest(msg), deadline)


def test_retry_backoff_and_due():
    q = RetryQueue()
    item = _pending(T0 + timedelta(days=1))
    assert q.defer(item, T0)
    assert q.next_due() == T0 + timedelta(minutes=1)
    assert q.due(T0) == []
    assert q.due(T0 + timedelta(minutes=1)) == [item]
    assert q.defer(item, T0 + timedelta(minutes=1))
    assert item.next_attempt == T0 + timedelta(minutes=3)
    assert q.next_due() == item.next_attempt


def test_backoff_is_capped():
    q = RetryQueue()
    item = _pending(T0 + timedelta(days=30))
    item.attempts = 20
    q.defer(item, T0)
    assert item.next_attempt == T0 + timedelta(hours=6)


def test_dead_letter_after_deadline(tmp_path):
    path = tmp_path / "dead.jsonl"
    q = RetryQueue(dead_letter_path=path)
    item = _pending(T0 + timedelta(seconds=30))
    assert not q.defer(item, T0)
    assert q.dead == [item] and q.pending == []
    record = json.loads(path.read_text().splitlines()[0])
    assert record["peer"] == "up.example" and record["attempts"] == 1
