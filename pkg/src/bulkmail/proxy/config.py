"""Proxy configuration and the peer table.

The config file is INI-style. Top-level keys need no section header::

    local_domain = c.example
    slave_addr = 127.0.0.1:2525
    listen_addr = 127.0.0.1:2526
    micro_penalty_cents = 10

    [peer b.example]
    relationship = contracted
    addresses = 10.0.0.2
    smtp_addr = 10.0.0.2:25

    [users]
    alice = secret

    [routes]
    far.example = b.example
"""

from __future__ import annotations

import configparser
import enum
import ipaddress
import threading
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

from ..errors import ConfigError
from ..policy import RateLimitConfig

UNCONTRACTED_WINDOW = timedelta(days=30)
_TOP = "proxy"


class Relationship(enum.Enum):
    CONTRACTED = "contracted"
    UNCONTRACTED = "uncontracted"
    UNKNOWN = "unknown"


@dataclass
class PeerConfig:
    domain: str
    relationship: Relationship = Relationship.CONTRACTED
    threshold: int = 100
    addresses: tuple[str, ...] = ()
    smtp_addr: str | None = None
    complaint_times: deque = field(default_factory=deque, repr=False)
    cut_off: bool = False

    def complaints_this_month(self, now: datetime) -> int:
        return sum(1 for t in self.complaint_times if now - t <= UNCONTRACTED_WINDOW)


class PeerTable:
    def __init__(self, peers: list[PeerConfig] | None = None):
        self._peers: dict[str, PeerConfig] = {}
        self._lock = threading.Lock()
        for p in peers or []:
            self.add(p)

    def add(self, peer: PeerConfig) -> None:
        with self._lock:
            self._peers[peer.domain.lower()] = peer

    def get(self, domain: str | None) -> PeerConfig | None:
        if domain is None:
            return None
        with self._lock:
            return self._peers.get(domain.lower())

    def relationship(self, domain: str | None) -> Relationship:
        peer = self.get(domain)
        return peer.relationship if peer else Relationship.UNKNOWN

    def by_address(self, address: str) -> PeerConfig | None:
        with self._lock:
            for p in self._peers.values():
                if address in p.addresses:
                    return p
        return None

    def note_complaint(self, domain: str, now: datetime) -> bool:
        """Count an absorbed complaint against an uncontracted peer.

        Returns True when this complaint cut the peer off.
        """
        with self._lock:
            peer = self._peers.get(domain.lower())
            if peer is None or peer.relationship is not Relationship.UNCONTRACTED:
                return False
            peer.complaint_times.append(now)
            while peer.complaint_times and now - peer.complaint_times[0] > UNCONTRACTED_WINDOW:
                peer.complaint_times.popleft()
            if not peer.cut_off and len(peer.complaint_times) >= peer.threshold:
                peer.cut_off = True
                return True
            return False

    def __iter__(self):
        with self._lock:
            return iter(list(self._peers.values()))


def parse_hostport(text: str, default_port: int = 25) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    try:
        return host.strip("[]"), int(port)
    except ValueError as exc:
        raise ConfigError(f"bad address {text!r}") from exc


@dataclass
class ProxyConfig:
    local_domain: str
    slave_addr: str = "127.0.0.1:25"
    listen_addr: str = "127.0.0.1:2525"
    rate: RateLimitConfig = field(default_factory=RateLimitConfig)
    log_window_days: int = 14
    age_limit_days: int = 7
    uncontracted_threshold: int = 100
    peers: PeerTable = field(default_factory=PeerTable)
    users: dict[str, str] = field(default_factory=dict)
    routes: dict[str, str] = field(default_factory=dict)
    client_networks: tuple[str, ...] = ("127.0.0.0/8",)
    state_dir: Path | None = None
    event_log: Path | None = None
    policy_dir: Path | None = None

    def __post_init__(self):
        if not self.local_domain:
            raise ConfigError("local_domain must be set")
        self.local_domain = self.local_domain.lower()

    @property
    def log_window(self) -> timedelta:
        return timedelta(days=self.log_window_days)

    @property
    def age_limit(self) -> timedelta:
        return timedelta(days=self.age_limit_days)

    def is_client_address(self, address: str) -> bool:
        try:
            ip = ipaddress.ip_address(address)
        except ValueError:
            return False
        return any(ip in ipaddress.ip_network(net, strict=False) for net in self.client_networks)

    @classmethod
    def load(cls, path: str | Path) -> "ProxyConfig":
        text = Path(path).read_text(encoding="utf-8")
        return cls.parse(text, base=Path(path).parent)

    @classmethod
    def parse(cls, text: str, base: Path | None = None) -> "ProxyConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(f"[{_TOP}]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        top = parser[_TOP]

        def num(key: str, default: int) -> int:
            try:
                return int(top.get(key, default))
            except ValueError as exc:
                raise ConfigError(f"{key} must be an integer") from exc

        def path_of(key: str) -> Path | None:
            value = top.get(key)
            if not value:
                return None
            p = Path(value)
            return p if p.is_absolute() or base is None else base / p

        rate = RateLimitConfig(
            send_limit_per_week=num("send_limit_per_week", 100),
            micro_penalty=num("micro_penalty_cents", 10),
            complaint_limit=num("complaint_limit", 10),
            complaint_window_days=num("complaint_window_days", 90),
            monthly_fee=num("monthly_fee_cents", 3000),
            reset_fee=num("reset_fee_cents", 100),
        )
        threshold = num("uncontracted_threshold", 100)
        peers = PeerTable()
        for section in parser.sections():
            if not section.startswith("peer "):
                continue
            domain = section[5:].strip().lower()
            sec = parser[section]
            try:
                rel = Relationship(sec.get("relationship", "contracted").strip().lower())
            except ValueError as exc:
                raise ConfigError(f"{section}: bad relationship") from exc
            addresses = tuple(a.strip() for a in sec.get("addresses", "").split(",") if a.strip())
            peers.add(
                PeerConfig(
                    domain=domain,
                    relationship=rel,
                    threshold=int(sec.get("threshold", threshold)),
                    addresses=addresses,
                    smtp_addr=sec.get("smtp_addr"),
                )
            )
        networks = tuple(n.strip() for n in top.get("client_networks", "127.0.0.0/8").split(",") if n.strip())
        return cls(
            local_domain=top.get("local_domain", ""),
            slave_addr=top.get("slave_addr", "127.0.0.1:25"),
            listen_addr=top.get("listen_addr", "127.0.0.1:2525"),
            rate=rate,
            log_window_days=num("log_window_days", 14),
            age_limit_days=num("age_limit_days", 7),
            uncontracted_threshold=threshold,
            peers=peers,
            users=dict(parser["users"]) if parser.has_section("users") else {},
            routes={k.lower(): v.lower() for k, v in parser["routes"].items()} if parser.has_section("routes") else {},
            client_networks=networks,
            state_dir=path_of("state_dir"),
            event_log=path_of("event_log"),
            policy_dir=path_of("policy_dir"),
        )
