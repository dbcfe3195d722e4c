"""Command line entry points.

Exit codes: 0 success, 1 operational failure, 2 usage error. Machine-readable
output goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import random
import signal
import smtplib
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from .classify import HEADER, ListMail, parse_bulk_value
from .errors import BulkMailError
from .hashlog import LogStore
from .mail import HeaderDigest, MailMessage, compute_digest
from .penalty import SPAMSINK, PeerLedger
from .policy import load_policy, whitelist_check

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _iso(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_time(text: str) -> datetime:
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    return dt if dt.tzinfo else dt.replace(tzinfo=timezone.utc)


# -- subcommands --------------------------------------------------------------


def cmd_proxy_run(args) -> int:
    from .proxy.config import ProxyConfig
    from .proxy.server import ProxyServer

    server = ProxyServer(ProxyConfig.load(args.config))
    host, port = server.start()
    print(f"listening on {host}:{port}", file=sys.stderr)

    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda signum, frame: server.request_stop())
    server.wait()
    server.shutdown()
    print("proxy stopped; state saved", file=sys.stderr)
    return 0


def cmd_sim_run(args) -> int:
    from .sim.scenario import load_scenario, run_scenario

    scenario, topology, mx = load_scenario(args.scenario)
    result = run_scenario(scenario, topology, mx, seed=args.seed)
    if args.trace == "-":
        sys.stdout.write(result.trace_text())
    elif args.trace:
        Path(args.trace).write_text(result.trace_text(), encoding="utf-8")
    sys.stdout.write(result.metrics_text())
    for failure in result.failures:
        print(f"expectation failed: {failure}", file=sys.stderr)
    print(f"result {'pass' if result.ok else 'fail'}")
    return 0 if result.ok else 1


def cmd_log_inspect(args) -> int:
    with open(args.snapshot, "rb") as fh:
        store = LogStore.restore(fh)
    try:
        digest = HeaderDigest.fromhex(args.digest)
    except ValueError:
        print("digest must be 64 hex digits", file=sys.stderr)
        return 2
    entry = store.lookup(digest, _parse_time(args.at) if args.at else None)
    if entry is None:
        print(f"{digest.hex()} not-found")
        return 1
    print(f"digest {entry.digest.hex()}")
    print(f"logged_at {_iso(entry.logged_at)}")
    print(f"peer {entry.peer}")
    print(f"complaint_filed {int(entry.complaint_filed)}")
    return 0


def cmd_ledger_report(args) -> int:
    path = Path(args.state)
    if path.is_dir():
        path = path / "ledger.txt"
    ledger = PeerLedger.load(path)
    sys.stdout.write(ledger.report())
    print(f"net {ledger.net()}")
    return 0


def cmd_filter_test(args) -> int:
    policy = load_policy(args.rules)
    value = args.header
    name, sep, rest = value.partition(":")
    if sep and name.strip().lower() == HEADER.lower():
        value = rest
    bulk = parse_bulk_value(value)
    if isinstance(bulk, ListMail):
        print(whitelist_check(bulk.identifier, args.remailer, policy.whitelist.values()).value)
    else:
        print(policy.decide(bulk).value)
    return 0


def _sample_message(rng: random.Random, size: int = 1024) -> MailMessage:
    headers = (
        ("Received", "from b.example by a.example with SMTP; Tue, 01 Mar 2005 09:59:00 +0000"),
        ("Date", "Tue, 1 Mar 2005 10:00:00 +0000"),
        ("From", "alice@a.example"),
        ("To", "bob@b.example"),
        ("Subject", "benchmark"),
    )
    msg = MailMessage(headers, b"")
    pad = size - len(msg.serialize())
    return msg.with_body(bytes(rng.choice(b"abcdefghij") for _ in range(max(pad, 0))))


def cmd_bench_log(args) -> int:
    n = args.entries
    rng = random.Random(args.seed)
    start = datetime(2005, 3, 1, tzinfo=timezone.utc)
    store = LogStore()
    digests = [rng.randbytes(32) for _ in range(n)]
    t0 = time.perf_counter()
    for d in digests:
        store.record(d, "peer.example", start)
    store.flush()
    insert_s = time.perf_counter() - t0
    probes = [digests[rng.randrange(n)] for _ in range(args.lookups // 2)]
    probes += [rng.randbytes(32) for _ in range(args.lookups - len(probes))]
    t0 = time.perf_counter()
    for d in probes:
        store.lookup(d, start)
    lookup_s = time.perf_counter() - t0
    message = _sample_message(rng)
    reps = 2000
    t0 = time.perf_counter()
    for _ in range(reps):
        compute_digest(message)
    digest_s = time.perf_counter() - t0
    print(f"entries {n}")
    print(f"inserts_per_sec {n / insert_s:.0f}")
    print(f"lookup_mean_us {lookup_s / len(probes) * 1e6:.2f}")
    print(f"digest_1k_mean_us {digest_s / reps * 1e6:.2f}")
    print(f"bytes_per_entry {store.nbytes() / n:.1f}")
    return 0


def cmd_complaint_file(args) -> int:
    from .proxy.config import ProxyConfig, parse_hostport

    config = ProxyConfig.load(args.config)
    raw = Path(args.message).read_bytes()
    MailMessage.parse(raw)  # fail early on garbage
    host, port = parse_hostport(config.listen_addr)
    user = args.user or os.environ.get("BULKMAIL_USER")
    password = args.password or os.environ.get("BULKMAIL_PASSWORD", "")
    sender = f"{user}@{config.local_domain}" if user else f"{SPAMSINK}@{config.local_domain}"
    try:
        with smtplib.SMTP(host, port, timeout=30) as smtp:
            smtp.ehlo(config.local_domain)
            if user:
                smtp.login(user, password)
            smtp.sendmail(sender, [f"{SPAMSINK}@{config.local_domain}"], raw)
    except smtplib.SMTPRecipientsRefused as exc:
        code, text = next(iter(exc.recipients.values()))
        print(f"rejected {code} {text.decode(errors='replace')}")
        return 1
    except smtplib.SMTPResponseException as exc:
        print(f"rejected {exc.smtp_code} {exc.smtp_error.decode(errors='replace')}")
        return 1
    except (OSError, smtplib.SMTPException) as exc:
        print(f"cannot reach proxy at {host}:{port}: {exc}", file=sys.stderr)
        return 1
    print("accepted")
    return 0


# -- dispatch -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bulkmail", description="Self-labelled bulk mail: SMTP proxy, simulator and tools.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log diagnostics to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("proxy-run", help="run the SMTP proxy")
    p.add_argument("config")
    p.set_defaults(func=cmd_proxy_run)

    p = sub.add_parser("sim-run", help="run a simulation scenario")
    p.add_argument("scenario")
    p.add_argument("--seed", type=lambda s: int(s, 0), default=None, help="override the scenario seed")
    p.add_argument("--trace", metavar="PATH", help="write the trace to PATH ('-' for stdout)")
    p.set_defaults(func=cmd_sim_run)

    p = sub.add_parser("log-inspect", help="look up a digest in a hash-log snapshot")
    p.add_argument("snapshot")
    p.add_argument("digest")
    p.add_argument("--at", help="evaluate the retention window at this ISO time")
    p.set_defaults(func=cmd_log_inspect)

    p = sub.add_parser("ledger-report", help="print per-peer balances")
    p.add_argument("state", help="state directory or ledger file")
    p.set_defaults(func=cmd_ledger_report)

    p = sub.add_parser("filter-test", help="evaluate recipient rules against an X-Bulk-Mail value")
    p.add_argument("rules")
    p.add_argument("header")
    p.add_argument("--remailer", help="reverse-path domain for list mail")
    p.set_defaults(func=cmd_filter_test)

    p = sub.add_parser("bench-log", help="benchmark the hash log")
    p.add_argument("entries", type=int)
    p.add_argument("--lookups", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_log)

    p = sub.add_parser("complaint-file", help="submit a spam complaint to a running proxy")
    p.add_argument("config")
    p.add_argument("message")
    p.add_argument("--user")
    p.add_argument("--password")
    p.set_defaults(func=cmd_complaint_file)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    if getattr(args, "entries", 1) <= 0:
        print("entry count must be positive", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: no such file", file=sys.stderr)
        return 1
    except (BulkMailError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
