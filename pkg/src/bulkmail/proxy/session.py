"""One SMTP dialogue between a client and the proxy.

The session is a plain state machine: feed it command lines and message
payloads, get replies back. Commands the proxy has no stake in go to the
slave server verbatim and the slave's reply comes back unchanged.
"""

from __future__ import annotations

import base64
import binascii
import re
import smtplib
from dataclasses import dataclass

from ..errors import MalformedComplaint, MalformedMessage
from ..mail import MailMessage
from ..penalty import ForwardedUpstream, OriginSanctioned, Rejected
from .relay import ConnectionDecision, Envelope, Forwarded, RelayNode, SessionInfo, SlaveConnection

_PATH = re.compile(r"^\s*(?:FROM|TO)\s*:\s*<([^>]*)>", re.IGNORECASE)
_INTERCEPTED = {"EHLO", "HELO", "AUTH", "MAIL", "RCPT", "DATA", "RSET", "QUIT"}
_REFUSED = {"STARTTLS", "BDAT"}


@dataclass(frozen=True)
class Reply:
    code: int
    text: str
    close: bool = False

    def render(self) -> bytes:
        lines = self.text.split("\n") or [""]
        out = [f"{self.code}-{line}" for line in lines[:-1]]
        out.append(f"{self.code} {lines[-1]}")
        return ("\r\n".join(out) + "\r\n").encode("utf-8", "replace")

    @property
    def ok(self) -> bool:
        return 200 <= self.code < 400


def _passthrough(slave: SlaveConnection, cmd: str, args: str = "") -> Reply:
    try:
        code, text = slave.docmd(cmd, args)
    except (smtplib.SMTPServerDisconnected, OSError):
        return Reply(421, "4.4.2 slave server unavailable", close=True)
    return Reply(code, text.decode("utf-8", "replace") if isinstance(text, bytes) else text)


def parse_path(args: str) -> str | None:
    m = _PATH.match(args)
    return m.group(1).strip() if m else None


class SmtpSession:
    """SMTP state for one client connection.

    ``peer`` is the domain the connection source maps to, or None when the
    source is unknown. ``internal`` marks the site's own client network,
    whose users must authenticate before sending.
    """

    def __init__(self, relay: RelayNode, slave: SlaveConnection, peer: str | None, *, internal: bool = False):
        self.relay = relay
        self.slave = slave
        self.peer = peer
        self.internal = internal
        self.user: str | None = None
        self.helo: str | None = None
        self.envelope: Envelope | None = None
        self.complaint_mode = False
        self.awaiting_data = False
        self.awaiting_auth = False
        self.closed = False
        self.decision: ConnectionDecision | None = None

    @property
    def info(self) -> SessionInfo:
        return SessionInfo(
            peer=self.relay.domain if self.internal else (self.peer or "unknown"),
            internal=self.internal,
            user=self.user,
        )

    def open(self) -> Reply:
        if self.internal:
            self.decision = ConnectionDecision.ACCEPT
            return Reply(220, f"{self.relay.domain} ESMTP bulkmail proxy")
        code, text, self.decision = self.relay.greeting(self.peer)
        if self.decision is not ConnectionDecision.ACCEPT:
            self.closed = True
            return Reply(code, text, close=True)
        return Reply(code, text)

    def _reset(self) -> None:
        self.envelope = None
        self.complaint_mode = False
        self.awaiting_data = False

    def command(self, line: str) -> Reply:
        if self.closed:
            return Reply(421, "4.3.0 session closed", close=True)
        if self.awaiting_auth:
            self.awaiting_auth = False
            return self._auth_response(line.strip())
        verb, _, args = line.strip().partition(" ")
        verb = verb.upper()
        args = args.strip()
        if verb in _REFUSED:
            return Reply(502, "5.5.1 command not implemented")
        if verb not in _INTERCEPTED:
            return _passthrough(self.slave, verb, args)
        return getattr(self, f"_do_{verb.lower()}")(args)

    # -- command handlers --------------------------------------------------

    def _check_identity(self, name: str) -> Reply | None:
        if self.internal or self.peer is None or name.lower() == self.peer.lower():
            return None
        self.closed = True
        self.relay.emit("refused", peer=self.peer, reason="RefuseUnknown", helo=name)
        return Reply(554, f"5.7.1 greeting {name} does not match peer identity", close=True)

    def _do_ehlo(self, args: str) -> Reply:
        if not args:
            return Reply(501, "5.5.4 EHLO requires a domain")
        mismatch = self._check_identity(args)
        if mismatch:
            return mismatch
        reply = _passthrough(self.slave, "EHLO", args)
        if reply.code != 250:
            return reply
        self.helo = args
        self._reset()
        # advertise only what the proxy itself implements
        lines = [reply.text.split("\n")[0]]
        if self.internal:
            lines.append("AUTH PLAIN")
        return Reply(250, "\n".join(lines))

    def _do_helo(self, args: str) -> Reply:
        if not args:
            return Reply(501, "5.5.4 HELO requires a domain")
        mismatch = self._check_identity(args)
        if mismatch:
            return mismatch
        reply = _passthrough(self.slave, "HELO", args)
        if reply.code == 250:
            self.helo = args
            self._reset()
        return reply

    def _do_auth(self, args: str) -> Reply:
        if not self.internal:
            return Reply(503, "5.5.1 AUTH is only offered to local clients")
        if self.user is not None:
            return Reply(503, "5.5.1 already authenticated")
        mech, _, initial = args.partition(" ")
        if mech.upper() != "PLAIN":
            return Reply(504, "5.5.4 only AUTH PLAIN is supported")
        if not initial.strip():
            self.awaiting_auth = True
            return Reply(334, "")
        return self._auth_response(initial.strip())

    def _auth_response(self, blob: str) -> Reply:
        if blob == "*":
            return Reply(501, "5.0.0 authentication cancelled")
        try:
            _, user, password = base64.b64decode(blob, validate=True).decode("utf-8").split("\0")
        except (binascii.Error, UnicodeDecodeError, ValueError):
            return Reply(501, "5.5.2 cannot decode AUTH PLAIN response")
        if not self.relay.authenticate(user, password):
            return Reply(535, "5.7.8 authentication failed")
        self.user = user
        return Reply(235, "2.7.0 authentication successful")

    def _do_mail(self, args: str) -> Reply:
        if self.helo is None:
            return Reply(503, "5.5.1 send EHLO/HELO first")
        if self.envelope is not None:
            return Reply(503, "5.5.1 nested MAIL command")
        if self.internal and self.user is None:
            return Reply(530, "5.7.0 authentication required")
        path = parse_path(args)
        if path is None:
            return Reply(501, "5.5.4 syntax: MAIL FROM:<address>")
        reply = _passthrough(self.slave, "MAIL", args)
        if reply.code // 100 == 2:
            self.envelope = Envelope(path, [])
        return reply

    def _do_rcpt(self, args: str) -> Reply:
        if self.envelope is None:
            return Reply(503, "5.5.1 need MAIL before RCPT")
        path = parse_path(args)
        if not path:
            return Reply(501, "5.5.4 syntax: RCPT TO:<address>")
        if self.relay.is_spamsink(path):
            if self.envelope.recipients:
                return Reply(503, "5.5.1 spamsink must be the only recipient")
            self.complaint_mode = True
            self.envelope.recipients.append(path)
            return Reply(250, "2.1.5 complaint recipient ok")
        if self.complaint_mode:
            return Reply(503, "5.5.1 spamsink must be the only recipient")
        reply = _passthrough(self.slave, "RCPT", args)
        if reply.code // 100 == 2:
            self.envelope.recipients.append(path)
        return reply

    def _do_data(self, args: str) -> Reply:
        if self.envelope is None or not self.envelope.recipients:
            return Reply(503, "5.5.1 need RCPT before DATA")
        self.awaiting_data = True
        return Reply(354, "End data with <CR><LF>.<CR><LF>")

    def _do_rset(self, args: str) -> Reply:
        self._reset()
        return _passthrough(self.slave, "RSET")

    def _do_quit(self, args: str) -> Reply:
        try:
            self.slave.docmd("QUIT")
        except (smtplib.SMTPServerDisconnected, OSError):
            pass
        self.closed = True
        return Reply(221, f"2.0.0 {self.relay.domain} closing connection", close=True)

    # -- message payload ---------------------------------------------------

    def data(self, payload: bytes) -> Reply:
        """Handle the dot-unstuffed message that followed a 354."""
        if not self.awaiting_data or self.envelope is None:
            return Reply(503, "5.5.1 not expecting data")
        envelope = self.envelope
        complaint = self.complaint_mode
        self._reset()
        try:
            message = MailMessage.parse(payload)
        except MalformedMessage as exc:
            return Reply(554, f"5.6.0 malformed message: {exc}")
        if complaint:
            _passthrough(self.slave, "RSET")
            return self._complaint(message)
        result = self.relay.relay_message(self.info, envelope, message, self.slave)
        if isinstance(result, Forwarded):
            if not result.via_slave:
                _passthrough(self.slave, "RSET")
            return Reply(result.code, result.text)
        if result.reason != "SlaveRejected":
            _passthrough(self.slave, "RSET")
        return Reply(result.code, result.text)

    def _complaint(self, message: MailMessage) -> Reply:
        try:
            outcome = self.relay.intercept_spamsink(self.info, message)
        except MalformedComplaint as exc:
            return Reply(554, f"5.6.0 malformed complaint: {exc}")
        if isinstance(outcome, Rejected):
            return Reply(550, f"5.7.1 complaint rejected: {outcome.reason.value}")
        if isinstance(outcome, OriginSanctioned):
            return Reply(250, f"2.0.0 complaint accepted; sender {outcome.origin} sanctioned")
        assert isinstance(outcome, ForwardedUpstream)
        return Reply(250, f"2.0.0 complaint accepted; forwarded to {outcome.peer}")


def dot_unstuff(lines: list[bytes]) -> bytes:
    return b"".join(line[1:] if line.startswith(b"..") else line for line in lines)


def transact(
    session: SmtpSession,
    *,
    helo: str,
    mail_from: str,
    rcpts: list[str],
    payload: bytes,
    auth: tuple[str, str] | None = None,
) -> Reply:
    """Run EHLO through QUIT on an already opened session; returns the deciding reply."""
    steps = [f"EHLO {helo}"]
    if auth is not None:
        token = base64.b64encode(f"\0{auth[0]}\0{auth[1]}".encode()).decode()
        steps.append(f"AUTH PLAIN {token}")
    steps.append(f"MAIL FROM:<{mail_from}>")
    for line in steps:
        reply = session.command(line)
        if not reply.ok:
            return reply
    accepted = 0
    last = reply
    for rcpt in rcpts:
        last = session.command(f"RCPT TO:<{rcpt}>")
        accepted += last.ok
    if not accepted:
        session.command("QUIT")
        return last
    reply = session.command("DATA")
    if reply.code != 354:
        return reply
    reply = session.data(payload)
    session.command("QUIT")
    return reply


def run_dialogue(session: SmtpSession, **kwargs) -> Reply:
    """Open the session and drive one complete client transaction in-process."""
    reply = session.open()
    if not reply.ok:
        return reply
    return transact(session, **kwargs)
