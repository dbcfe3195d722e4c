"""Scenario files: topology declarations, timed actions and expectations.

One statement per line, ``#`` starts a comment::

    name two-hop complaint
    seed 7
    rate send_limit_per_week=5 complaint_limit=3
    node a.example
    node l.example legacy
    contract a.example b.example
    tolerate b.example l.example threshold=100
    mx b.example b.example
    route a.example c.example b.example
    user alice@a.example
    subscribe bob@b.example announce-list
    filter bob@b.example discard rec.sports
    0s   send alice@a.example bob@b.example adv:rec.sports.swimming ref=m1
    1h   complain bob@b.example m1
    2h   attack BodyHijack attacker=m.example sender=alice@a.example rcpt=bob@b.example
    15d  advance
    expect ledger.sum == 0

Lines that start with a time (``90``, ``90s``, ``15m``, ``2h``, ``1.5d``) are
actions, run in time order; ties keep file order.
"""

from __future__ import annotations

import shlex
from pathlib import Path

from ..errors import ConfigError, ScriptError
from ..policy import RateLimitConfig
from .attacks import expand_actions
from .network import (
    SIM_EPOCH,
    Action,
    Expect,
    MxTable,
    NodeKind,
    Scenario,
    SimResult,
    Simulator,
    Topology,
    parse_duration,
    perform,
    validate_action,
)

_RATE_KEYS = {
    "send_limit_per_week": "send_limit_per_week",
    "micro_penalty_cents": "micro_penalty",
    "complaint_limit": "complaint_limit",
    "complaint_window_days": "complaint_window_days",
    "monthly_fee_cents": "monthly_fee",
    "reset_fee_cents": "reset_fee",
}
_VERBS = {"send", "complain", "forge", "corrupt", "inject", "partition", "heal", "advance", "attack"}


def _split_opts(words: list[str]) -> tuple[list[str], dict[str, str]]:
    args, opts = [], {}
    for w in words:
        key, eq, value = w.partition("=")
        if eq and key and not key[0].isdigit():
            opts[key] = value
        else:
            args.append(w)
    return args, opts


def _need(words: list[str], count: int, lineno: int, usage: str) -> None:
    if len(words) < count:
        raise ScriptError(f"line {lineno}: usage: {usage}")


def parse_scenario(text: str, name: str = "scenario") -> tuple[Scenario, Topology, MxTable]:
    scenario = Scenario(name=name)
    topology = Topology()
    mx = MxTable()
    rate_fields: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            words = shlex.split(line)
        except ValueError as exc:
            raise ScriptError(f"line {lineno}: {exc}") from None
        head, rest = words[0], words[1:]
        if head[0].isdigit():
            _need(rest, 1, lineno, "<time> <action> ...")
            verb = rest[0].lower()
            if verb not in _VERBS:
                raise ScriptError(f"line {lineno}: unknown action {rest[0]!r}")
            args, opts = _split_opts(rest[1:])
            minimum = {"send": 2, "complain": 2, "forge": 2, "corrupt": 1, "inject": 2, "partition": 2, "heal": 2, "attack": 1}
            _need(args, minimum.get(verb, 0), lineno, f"<time> {verb} ...")
            scenario.actions.append(Action(parse_duration(head), verb, tuple(args), tuple(sorted(opts.items())), lineno))
            continue
        kw = head.lower()
        if kw == "name":
            scenario.name = " ".join(rest) or name
        elif kw == "seed":
            _need(rest, 1, lineno, "seed <int>")
            try:
                scenario.seed = int(rest[0], 0)
            except ValueError:
                raise ScriptError(f"line {lineno}: seed must be an integer") from None
        elif kw == "rate":
            for item in rest:
                key, _, value = item.partition("=")
                if key not in _RATE_KEYS or not value.isdigit():
                    raise ScriptError(f"line {lineno}: bad rate setting {item!r}")
                rate_fields[_RATE_KEYS[key]] = int(value)
        elif kw == "node":
            _need(rest, 1, lineno, "node <domain> [proxy|legacy|misbehaving]")
            try:
                kind = NodeKind(rest[1].lower()) if len(rest) > 1 else NodeKind.PROXY
            except ValueError:
                raise ScriptError(f"line {lineno}: unknown node kind {rest[1]!r}") from None
            topology.add_node(rest[0], kind)
        elif kw == "contract":
            _need(rest, 2, lineno, "contract <a> <b>")
            topology.contract(rest[0], rest[1])
        elif kw == "tolerate":
            _need(rest, 2, lineno, "tolerate <host> <guest> [threshold=N]")
            args, opts = _split_opts(rest)
            topology.tolerate(args[0], args[1], int(opts.get("threshold", 100)))
        elif kw == "mx":
            _need(rest, 2, lineno, "mx <dest> <relay> [<relay> ...]")
            mx.add(rest[0], rest[1:])
        elif kw == "route":
            _need(rest, 3, lineno, "route <node> <dest> <relay>")
            topology.node(rest[0]).routes[rest[1].lower()] = rest[2].lower()
        elif kw == "user":
            _need(rest, 1, lineno, "user <address> [password]")
            topology.add_user(*rest[:2])
        elif kw == "subscribe":
            _need(rest, 2, lineno, "subscribe <address> <list-id> [remailer]")
            local, _, domain = rest[0].lower().partition("@")
            topology.node(domain).policy(local).subscribe(rest[1], rest[2] if len(rest) > 2 else None)
        elif kw == "filter":
            _need(rest, 3, lineno, "filter <address> discard|keep <group>")
            local, _, domain = rest[0].lower().partition("@")
            try:
                topology.node(domain).policy(local).add_rule(rest[1].lower(), rest[2])
            except ValueError as exc:
                raise ScriptError(f"line {lineno}: {exc}") from None
        elif kw == "expect":
            _need(rest, 3, lineno, "expect <metric> <op> <int>")
            try:
                value = int(rest[2])
            except ValueError:
                raise ScriptError(f"line {lineno}: expected value must be an integer") from None
            scenario.expectations.append(Expect(rest[0], rest[1], value, f"line {lineno}"))
        else:
            raise ScriptError(f"line {lineno}: unknown statement {head!r}")
    scenario.actions.sort(key=lambda a: a.at)
    try:
        scenario.rate = RateLimitConfig(**rate_fields)
    except ConfigError as exc:
        raise ScriptError(str(exc)) from None
    mx.validate(topology)
    return scenario, topology, mx


def load_scenario(path: str | Path) -> tuple[Scenario, Topology, MxTable]:
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), name=path.stem)


def run_scenario(scenario: Scenario, topology: Topology, mx: MxTable, *, seed: int | None = None) -> SimResult:
    """Execute a scenario; the trace depends only on the inputs and the seed."""
    actions, attack_checks = expand_actions(scenario.actions, scenario.rate.micro_penalty)
    sim = Simulator(topology, mx, seed=scenario.seed if seed is None else seed, rate=scenario.rate)
    for action in actions:
        validate_action(action, sim)
        sim.schedule(SIM_EPOCH + action.at, lambda a=action: perform(sim, a))
    sim.run()
    metrics = sim.metrics()
    checks = [*scenario.expectations, *attack_checks]
    failures = [msg for exp in checks if (msg := exp.check(metrics)) is not None]
    return SimResult(sim.events, metrics, failures)
