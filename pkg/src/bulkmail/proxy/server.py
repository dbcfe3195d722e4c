"""TCP front end: one thread per SMTP session, a slave connection per session."""

from __future__ import annotations

import logging
import queue
import smtplib
import socketserver
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

from ..hashlog import LogStore
from ..mail import MailMessage
from ..penalty import SPAMSINK, PeerLedger, RetryQueue
from ..policy import load_policy
from .config import ProxyConfig, parse_hostport
from .events import EventLog, discard
from .relay import RelayNode
from .session import Reply, SmtpSession, dot_unstuff

log = logging.getLogger(__name__)

MAX_LINE = 4096
MAX_MESSAGE = 32 * 1024 * 1024
SNAPSHOT_NAME = "hashlog.bglg"
LEDGER_NAME = "ledger.txt"
DEAD_LETTER_NAME = "dead-letter.jsonl"


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


class SmtpComplaintTransport:
    """Deliver peer complaints over SMTP from a background worker."""

    def __init__(self, config: ProxyConfig, timeout: float = 30.0):
        self.config = config
        self.timeout = timeout
        self._queue: queue.Queue = queue.Queue()
        self._worker = threading.Thread(target=self._run, name="complaint-transport", daemon=True)
        self._worker.start()

    def __call__(self, peer: str, message: MailMessage, on_reply: Callable[[int, str], None]) -> None:
        self._queue.put((peer, message, on_reply))

    def _run(self) -> None:
        while True:
            job = self._queue.get()
            if job is None:
                return
            peer, message, on_reply = job
            on_reply(*self.deliver(peer, message))

    def deliver(self, peer: str, message: MailMessage) -> tuple[int, str]:
        cfg = self.config.peers.get(peer)
        target = (cfg.smtp_addr if cfg and cfg.smtp_addr else peer)
        host, port = parse_hostport(target)
        sender = f"{SPAMSINK}@{self.config.local_domain}"
        try:
            with smtplib.SMTP(host, port, local_hostname=self.config.local_domain, timeout=self.timeout) as smtp:
                smtp.ehlo(self.config.local_domain)
                smtp.sendmail(sender, [f"{SPAMSINK}@{peer}"], message.serialize())
        except smtplib.SMTPRecipientsRefused as exc:
            code, text = next(iter(exc.recipients.values()))
            return code, text.decode("utf-8", "replace")
        except smtplib.SMTPResponseException as exc:
            return exc.smtp_code, exc.smtp_error.decode("utf-8", "replace")
        except (OSError, smtplib.SMTPException) as exc:
            log.warning("complaint to %s undeliverable: %s", peer, exc)
            return 0, str(exc)
        return 250, "ok"

    def close(self) -> None:
        self._queue.put(None)
        self._worker.join(timeout=5)


class _Handler(socketserver.StreamRequestHandler):
    def _send(self, reply: Reply) -> None:
        self.wfile.write(reply.render())
        self.wfile.flush()

    def _read_payload(self) -> bytes | None:
        lines: list[bytes] = []
        size = 0
        while True:
            line = self.rfile.readline(MAX_LINE + 2)
            if not line:
                return None
            if line in (b".\r\n", b".\n"):
                return dot_unstuff(lines)
            size += len(line)
            if size > MAX_MESSAGE:
                return None
            lines.append(line)

    def handle(self) -> None:
        proxy: ProxyServer = self.server.proxy  # type: ignore[attr-defined]
        peer, internal = proxy.identify(self.client_address[0])
        session = SmtpSession(proxy.relay, None, peer, internal=internal)  # type: ignore[arg-type]
        greeting = session.open()
        if greeting.ok:
            try:
                session.slave = proxy.slave_factory()
            except (OSError, smtplib.SMTPException) as exc:
                log.error("slave unavailable: %s", exc)
                greeting = Reply(421, "4.3.2 service temporarily unavailable", close=True)
        self._send(greeting)
        if greeting.close:
            return
        try:
            while not session.closed:
                line = self.rfile.readline(MAX_LINE)
                if not line:
                    break
                reply = session.command(line.decode("utf-8", "replace").rstrip("\r\n"))
                self._send(reply)
                if reply.code == 354:
                    payload = self._read_payload()
                    if payload is None:
                        break
                    self._send(session.data(payload))
                if reply.close:
                    break
        finally:
            try:
                session.slave.close()
            except Exception:  # slave already gone
                pass


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True


class ProxyServer:
    """The deployable proxy: owns the relay core, its state files and the listener."""

    def __init__(
        self,
        config: ProxyConfig,
        *,
        clock: Callable[[], datetime] = utc_now,
        slave_factory: Callable[[], object] | None = None,
        transport=None,
        tick_seconds: float = 30.0,
        snapshot_seconds: float = 600.0,
    ):
        self.config = config
        self.clock = clock
        state = config.state_dir
        if state is not None:
            state.mkdir(parents=True, exist_ok=True)
        log_store = self._load_log(state)
        ledger = PeerLedger.load(state / LEDGER_NAME) if state and (state / LEDGER_NAME).exists() else PeerLedger()
        self.transport = transport if transport is not None else SmtpComplaintTransport(config)
        self.relay = RelayNode(
            config,
            clock,
            log_store=log_store,
            ledger=ledger,
            policies=self._load_policies(),
            events=EventLog(config.event_log) if config.event_log else discard,
            transport=self.transport,
            retry=RetryQueue(dead_letter_path=state / DEAD_LETTER_NAME if state else None),
        )
        self.slave_factory = slave_factory or self._connect_slave
        self.tick_seconds = tick_seconds
        self.snapshot_seconds = snapshot_seconds
        self._server: _ThreadingServer | None = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    def _load_log(self, state: Path | None) -> LogStore:
        path = state / SNAPSHOT_NAME if state else None
        if path and path.exists():
            with open(path, "rb") as fh:
                return LogStore.restore(fh, self.clock)
        return LogStore(self.config.log_window, self.clock)

    def _load_policies(self) -> dict:
        policies = {}
        if self.config.policy_dir and self.config.policy_dir.is_dir():
            for path in sorted(self.config.policy_dir.glob("*.rules")):
                policies[path.stem.lower()] = load_policy(path)
        return policies

    def _connect_slave(self):
        host, port = parse_hostport(self.config.slave_addr)
        return smtplib.SMTP(host, port, local_hostname=self.config.local_domain, timeout=60)

    def identify(self, address: str) -> tuple[str | None, bool]:
        """Map a connection source to (peer domain, internal client flag)."""
        peer = self.config.peers.by_address(address)
        if peer is not None:
            return peer.domain, False
        if self.config.is_client_address(address):
            return self.config.local_domain, True
        return None, False

    def start(self) -> tuple[str, int]:
        host, port = parse_hostport(self.config.listen_addr)
        self._server = _ThreadingServer((host, port), _Handler)
        self._server.proxy = self  # type: ignore[attr-defined]
        serve = threading.Thread(target=self._server.serve_forever, name="smtp-listener", daemon=True)
        ticker = threading.Thread(target=self._tick_loop, name="proxy-ticker", daemon=True)
        self._threads = [serve, ticker]
        for t in self._threads:
            t.start()
        return self._server.server_address[:2]

    def _tick_loop(self) -> None:
        elapsed = 0.0
        while not self._stop.wait(self.tick_seconds):
            self.relay.tick()
            elapsed += self.tick_seconds
            if elapsed >= self.snapshot_seconds:
                elapsed = 0.0
                self.save_state()

    def save_state(self) -> None:
        state = self.config.state_dir
        if state is None:
            return
        tmp = state / (SNAPSHOT_NAME + ".tmp")
        with open(tmp, "wb") as fh:
            self.relay.log.snapshot(fh)
        tmp.replace(state / SNAPSHOT_NAME)
        self.relay.ledger.save(state / LEDGER_NAME)

    def shutdown(self) -> None:
        """Stop accepting, wait for in-flight sessions, persist state."""
        self._stop.set()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        if hasattr(self.transport, "close"):
            self.transport.close()
        self.save_state()

    def request_stop(self) -> None:
        self._stop.set()

    def wait(self) -> None:
        # short waits keep the main thread responsive to signals
        while not self._stop.wait(0.5):
            pass

    def serve_forever(self) -> None:
        self.start()
        try:
            self.wait()
        except KeyboardInterrupt:
            pass
        finally:
            self.shutdown()
