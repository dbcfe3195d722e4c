"""Attack scripts: each kind expands into plain actions plus the outcome it must produce.

Expectations assume the attack is the only source of complaints and ledger
movement in its scenario.
"""

from __future__ import annotations

import enum
import re
from datetime import timedelta

from ..errors import ScriptError, UnknownAttackKind
from ..proxy.relay import address_domain
from .network import Action, Expect

COMPLAIN_AFTER = timedelta(hours=1)


class AttackKind(enum.Enum):
    FAKE_RETURN_ADDRESS = "FakeReturnAddress"
    OFF_PATH_COMPLAINT = "OffPathComplaint"
    DUPLICATE_COMPLAINT = "DuplicateComplaint"
    STALE_MAIL = "StaleMail"
    ON_PATH_FORGED_COMPLAINT = "OnPathForgedComplaint"
    BODY_HIJACK = "BodyHijack"
    FORGED_SPAM_BY_RELAY = "ForgedSpamByRelay"

    @classmethod
    def parse(cls, text: str) -> "AttackKind":
        """Accepts ``BodyHijack``, ``body-hijack`` or ``body_hijack``."""
        squashed = re.sub(r"[-_]", "", text).lower()
        for kind in cls:
            if kind.value.lower() == squashed:
                return kind
        raise UnknownAttackKind(f"unknown attack kind {text!r}")


_REQUIRED = {
    AttackKind.FAKE_RETURN_ADDRESS: ("sender", "rcpt"),
    AttackKind.OFF_PATH_COMPLAINT: ("attacker", "target", "sender", "rcpt"),
    AttackKind.DUPLICATE_COMPLAINT: ("sender", "rcpt"),
    AttackKind.STALE_MAIL: ("sender", "rcpt"),
    AttackKind.ON_PATH_FORGED_COMPLAINT: ("attacker", "sender", "rcpt"),
    AttackKind.BODY_HIJACK: ("attacker", "sender", "rcpt"),
    AttackKind.FORGED_SPAM_BY_RELAY: ("attacker", "upstream", "rcpt"),
}


def inject_attack(
    kind: AttackKind,
    params: dict[str, str],
    *,
    at: timedelta = timedelta(0),
    penalty: int = 10,
    line: int = 0,
) -> tuple[list[Action], list[Expect]]:
    """Script actions for one attack and the trace outcome they must produce."""
    missing = [k for k in _REQUIRED[kind] if k not in params]
    if missing:
        raise ScriptError(f"line {line}: {kind.value} needs {', '.join(f'{k}=' for k in missing)}")
    p = params
    ref = p.get("ref", f"atk{line}")
    later = at + COMPLAIN_AFTER
    origin = f"attack {kind.value} line {line}"

    def act(when: timedelta, verb: str, *args: str, **opts: str) -> Action:
        return Action(when, verb, args, tuple(sorted(opts.items())), line)

    def expect(key: str, op: str, value: int) -> Expect:
        return Expect(key, op, value, origin)

    rnode = address_domain(p["rcpt"])
    if "sender" in p:
        snode = address_domain(p["sender"])
        suser = f"{p['sender'].partition('@')[0].lower()}@{snode}"
        send = act(at, "send", p["sender"], p["rcpt"], p.get("class", "adv:biz.offers"), ref=ref)

    if kind is AttackKind.FAKE_RETURN_ADDRESS:
        forged = p.get("forged", "ceo@bank.example")
        actions = [
            act(at, "send", p["sender"], p["rcpt"], p.get("class", "adv:biz.offers"), ref=ref, **{"from-header": forged, "mail-from": forged}),
            act(later, "complain", p["rcpt"], ref),
        ]
        checks = [
            expect(f"sanctioned.{suser}", "==", 1),
            expect(f"ledger.{snode}", "==", -penalty),
            expect(f"ledger.{rnode}", "==", penalty),
            expect("ledger.sum", "==", 0),
        ]
    elif kind is AttackKind.OFF_PATH_COMPLAINT:
        actions = [send, act(later, "forge", p["attacker"], ref, to=p["target"], copy=p["rcpt"])]
        checks = [
            expect(f"complaint.Rejected@{p['target']}", "==", 1),
            expect("complaint.ForwardedUpstream", "==", 0),
            expect("complaint.OriginSanctioned", "==", 0),
            expect("ledger.moved", "==", 0),
            expect(f"ledger@{p['target']}", "==", 0),
        ]
    elif kind is AttackKind.DUPLICATE_COMPLAINT:
        actions = [send, act(later, "complain", p["rcpt"], ref), act(later + COMPLAIN_AFTER, "complain", p["rcpt"], ref)]
        checks = [
            expect(f"complaint.rejected.Duplicate@{rnode}", "==", 1),
            expect(f"sanctioned.{suser}", "==", 1),
            expect(f"ledger.{rnode}", "==", penalty),
            expect("ledger.sum", "==", 0),
        ]
    elif kind is AttackKind.STALE_MAIL:
        age = p.get("age", "8d")
        actions = [act(at, "send", p["sender"], p["rcpt"], p.get("class", "personal"), ref=ref, date=f"-{age.lstrip('-')}")]
        checks = [
            expect("rejected.TooOld", "==", 1),
            expect("delivered", "==", 0),
            expect("silent", "==", 0),
        ]
    elif kind is AttackKind.ON_PATH_FORGED_COMPLAINT:
        actions = [send, act(later, "forge", p["attacker"], ref)]
        checks = [
            expect("complaint_filed", "==", 0),
            expect(f"notify@{snode}", "==", 1),
            expect(f"sanctioned.{suser}", "==", 1),
            expect("ledger.sum", "==", 0),
        ]
    elif kind is AttackKind.BODY_HIJACK:
        actions = [act(at, "corrupt", p["attacker"], ref), send]
        checks = [
            expect(f"mismatch@{rnode}", "==", 1),
            expect(f"culprit.{p['attacker']}", "==", 1),
            expect("culprit", "==", 1),
        ]
    else:
        actions = [
            act(at, "inject", p["attacker"], p["rcpt"], ref=ref, via=p["upstream"], **({"class": p["class"]} if "class" in p else {})),
            act(later, "complain", p["rcpt"], ref),
        ]
        checks = [
            expect(f"ledger.{p['attacker']}", "==", -penalty),
            expect(f"ledger.{rnode}", "==", penalty),
            expect(f"ledger.{p['upstream']}", "==", 0),
            expect(f"complaint.rejected.NotInLog@{p['upstream']}", "==", 1),
            expect("ledger.sum", "==", 0),
        ]
    return actions, checks


def expand_actions(actions: list[Action], penalty: int) -> tuple[list[Action], list[Expect]]:
    """Replace ``attack`` actions with their expansion, keeping time order stable."""
    out: list[Action] = []
    checks: list[Expect] = []
    for action in actions:
        if action.verb != "attack":
            out.append(action)
            continue
        if not action.args:
            raise ScriptError(f"line {action.line}: attack needs a kind")
        kind = AttackKind.parse(action.args[0])
        more, expectations = inject_attack(kind, dict(action.opts), at=action.at, penalty=penalty, line=action.line)
        out.extend(more)
        checks.extend(expectations)
    out.sort(key=lambda a: a.at)
    return out, checks
