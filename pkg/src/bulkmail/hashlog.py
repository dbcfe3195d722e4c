"""Windowed store of forwarded-mail header digests.

Entries live in a small dict write buffer until it fills, then move into
immutable-key sorted segments held as parallel numpy arrays (8-byte key
prefix, 24-byte digest remainder, timestamp, flag, interned peer). That
keeps steady-state cost at 43 bytes per entry. Segments are merged
binary-counter style so a lookup touches O(log n) of them.

Snapshot file layout (all integers little-endian)::

    b"BGLG"  u8 version
    u64 retention_seconds
    u32 peer_count   { u16 len, utf-8 bytes } * peer_count
    u64 record_count { u8 len=43, 32B digest, i64 logged_at, u8 flag, u16 peer } * record_count
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import enum
import struct
import threading
import zlib
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import BinaryIO, Callable

import numpy as np

from .errors import CorruptSnapshot
from .mail import HeaderDigest

MAGIC = b"BGLG"
VERSION = 1
RECORD_LEN = 43
DEFAULT_RETENTION = timedelta(days=14)
BUFFER_LIMIT = 4096
SWEEP_INTERVAL = 3600

_RECORD_DTYPE = np.dtype(
    [
        ("len", "u1"),
        ("key", ">u8"),
        ("rest", "V24"),
        ("ts", "<i8"),
        ("flag", "u1"),
        ("peer", "<u2"),
    ]
)
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def to_epoch(dt: datetime) -> int:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int((dt - _EPOCH).total_seconds())


def from_epoch(seconds: int) -> datetime:
    return _EPOCH + timedelta(seconds=int(seconds))


class CheckResult(enum.Enum):
    ACCEPTED = "Accepted"
    NOT_FOUND = "NotFound"
    ALREADY_COMPLAINED = "AlreadyComplained"
    EXPIRED = "Expired"


@dataclass(frozen=True)
class LogEntry:
    digest: HeaderDigest
    logged_at: datetime
    complaint_filed: bool
    peer: str


class _Segment:
    __slots__ = ("keys", "rest", "ts", "flag", "peer")

    def __init__(self, keys, rest, ts, flag, peer):
        self.keys = keys
        self.rest = rest
        self.ts = ts
        self.flag = flag
        self.peer = peer

    def __len__(self):
        return len(self.keys)

    @classmethod
    def build(cls, keys, rest, ts, flag, peer, *, presorted=False) -> "_Segment":
        if not presorted:
            order = np.argsort(keys, kind="stable")
            keys, rest, ts, flag, peer = keys[order], rest[order], ts[order], flag[order], peer[order]
        return cls(keys, rest, ts, flag, peer)

    def find(self, key: np.uint64, rest: bytes) -> int:
        keys = self.keys
        i = int(np.searchsorted(keys, key))
        n = len(keys)
        while i < n and keys[i] == key:
            if self.rest[i].tobytes() == rest:
                return i
            i += 1
        return -1

    def select(self, mask) -> "_Segment":
        return _Segment(self.keys[mask], self.rest[mask], self.ts[mask], self.flag[mask], self.peer[mask])

    def copy(self) -> "_Segment":
        return _Segment(self.keys.copy(), self.rest.copy(), self.ts.copy(), self.flag.copy(), self.peer.copy())

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.keys, self.rest, self.ts, self.flag, self.peer))


def _merge(a: _Segment, b: _Segment) -> _Segment:
    return _Segment.build(
        np.concatenate((a.keys, b.keys)),
        np.concatenate((a.rest, b.rest)),
        np.concatenate((a.ts, b.ts)),
        np.concatenate((a.flag, b.flag)),
        np.concatenate((a.peer, b.peer)),
    )


def _split(digest: HeaderDigest | bytes) -> tuple[bytes, np.uint64, bytes]:
    raw = digest.value if isinstance(digest, HeaderDigest) else bytes(digest)
    if len(raw) != 32:
        raise ValueError("digest must be 32 bytes")
    return raw, np.uint64(int.from_bytes(raw[:8], "big")), raw[8:]


class LogStore:
    """Thread-safe digest log with a sliding retention window.

    An entry is visible while ``now - logged_at <= retention``; the boundary
    instant is still inside the window. Aged-out entries are hidden at lookup
    time and physically removed by :meth:`expire`, which also runs on its own
    every ``sweep_interval`` of caller-supplied time.
    """

    def __init__(
        self,
        retention: timedelta = DEFAULT_RETENTION,
        clock: Callable[[], datetime] | None = None,
        *,
        buffer_limit: int = BUFFER_LIMIT,
        sweep_interval: int = SWEEP_INTERVAL,
    ):
        self.retention = retention
        self._retention_s = int(retention.total_seconds())
        self._clock = clock
        self._buffer_limit = buffer_limit
        self._sweep_interval = sweep_interval
        self._lock = threading.Lock()
        self._buffer: dict[bytes, list[int]] = {}
        self._segments: list[_Segment] = []
        self._peers: list[str] = []
        self._peer_index: dict[str, int] = {}
        self._last_sweep: int | None = None

    # -- helpers -----------------------------------------------------------

    def _now(self, now: datetime | None) -> int:
        if now is None:
            if self._clock is None:
                raise ValueError("no time given and no clock injected")
            now = self._clock()
        return to_epoch(now)

    def _intern(self, peer: str) -> int:
        idx = self._peer_index.get(peer)
        if idx is None:
            idx = len(self._peers)
            if idx > 0xFFFF:
                raise OverflowError("too many distinct peers for one log")
            self._peers.append(peer)
            self._peer_index[peer] = idx
        return idx

    def _locate(self, raw: bytes, key: np.uint64, rest: bytes):
        slot = self._buffer.get(raw)
        if slot is not None:
            return None, slot
        for seg in reversed(self._segments):
            i = seg.find(key, rest)
            if i >= 0:
                return seg, i
        return None, None

    def _aged_out(self, logged_at: int, now: int) -> bool:
        return now - logged_at > self._retention_s

    def _maybe_sweep(self, now: int) -> None:
        if self._last_sweep is None:
            self._last_sweep = now
        elif now - self._last_sweep >= self._sweep_interval:
            self._expire_locked(now)
            self._last_sweep = now

    def _flush_locked(self) -> None:
        if not self._buffer:
            return
        n = len(self._buffer)
        raw = np.frombuffer(b"".join(self._buffer.keys()), dtype=np.uint8).reshape(n, 32)
        keys = raw[:, :8].copy().view(">u8").ravel().astype(np.uint64)
        rest = np.ascontiguousarray(raw[:, 8:]).view("V24").ravel()
        vals = np.array(list(self._buffer.values()), dtype=np.int64).reshape(n, 3)
        seg = _Segment.build(
            keys,
            rest.copy(),
            vals[:, 0].copy(),
            vals[:, 1].astype(np.uint8),
            vals[:, 2].astype(np.uint16),
        )
        self._buffer = {}
        self._segments.append(seg)
        segs = self._segments
        while len(segs) >= 2 and len(segs[-2]) <= 2 * len(segs[-1]):
            b = segs.pop()
            a = segs.pop()
            segs.append(_merge(a, b))

    # -- operations --------------------------------------------------------

    def record(self, digest: HeaderDigest | bytes, peer: str, now: datetime | None = None) -> None:
        ts = self._now(now)
        raw, key, rest = _split(digest)
        with self._lock:
            self._maybe_sweep(ts)
            pidx = self._intern(peer)
            seg, where = self._locate(raw, key, rest)
            if seg is None and where is not None:
                slot = where
                if self._aged_out(slot[0], ts):
                    slot[:] = [ts, 0, pidx]
                elif ts < slot[0]:
                    slot[0] = ts
                return
            if seg is not None:
                old = int(seg.ts[where])
                if self._aged_out(old, ts):
                    seg.ts[where] = ts
                    seg.flag[where] = 0
                    seg.peer[where] = pidx
                elif ts < old:
                    seg.ts[where] = ts
                return
            self._buffer[raw] = [ts, 0, pidx]
            if len(self._buffer) >= self._buffer_limit:
                self._flush_locked()

    def lookup(self, digest: HeaderDigest | bytes, now: datetime | None = None) -> LogEntry | None:
        """Return the live entry for ``digest``, or None.

        With no ``now`` and no injected clock, aged-out entries that have
        not been swept are still returned.
        """
        raw, key, rest = _split(digest)
        ts = None if now is None and self._clock is None else self._now(now)
        with self._lock:
            seg, where = self._locate(raw, key, rest)
            if where is None:
                return None
            if seg is None:
                logged, flag, pidx = where
            else:
                logged, flag, pidx = int(seg.ts[where]), int(seg.flag[where]), int(seg.peer[where])
            if ts is not None and self._aged_out(logged, ts):
                return None
            return LogEntry(HeaderDigest(raw), from_epoch(logged), bool(flag), self._peers[pidx])

    def check_and_mark(self, digest: HeaderDigest | bytes, now: datetime | None = None) -> CheckResult:
        ts = self._now(now)
        raw, key, rest = _split(digest)
        with self._lock:
            self._maybe_sweep(ts)
            seg, where = self._locate(raw, key, rest)
            if where is None:
                return CheckResult.NOT_FOUND
            if seg is None:
                if self._aged_out(where[0], ts):
                    return CheckResult.EXPIRED
                if where[1]:
                    return CheckResult.ALREADY_COMPLAINED
                where[1] = 1
                return CheckResult.ACCEPTED
            if self._aged_out(int(seg.ts[where]), ts):
                return CheckResult.EXPIRED
            if seg.flag[where]:
                return CheckResult.ALREADY_COMPLAINED
            seg.flag[where] = 1
            return CheckResult.ACCEPTED

    def expire(self, now: datetime | None = None) -> int:
        ts = self._now(now)
        with self._lock:
            return self._expire_locked(ts)

    def _expire_locked(self, now: int) -> int:
        cutoff = now - self._retention_s
        removed = 0
        stale = [d for d, slot in self._buffer.items() if slot[0] < cutoff]
        for d in stale:
            del self._buffer[d]
        removed += len(stale)
        kept: list[_Segment] = []
        for seg in self._segments:
            mask = seg.ts >= cutoff
            alive = int(np.count_nonzero(mask))
            removed += len(seg) - alive
            if alive == len(seg):
                kept.append(seg)
            elif alive:
                kept.append(seg.select(mask))
        self._segments = kept
        return removed

    def flush(self) -> None:
        """Move buffered entries into a sorted segment."""
        with self._lock:
            self._flush_locked()

    def __len__(self) -> int:
        with self._lock:
            return len(self._buffer) + sum(len(s) for s in self._segments)

    @property
    def segment_count(self) -> int:
        return len(self._segments)

    def nbytes(self) -> int:
        """Bytes held by segment arrays (buffer excluded)."""
        return sum(s.nbytes for s in self._segments)

    # -- persistence -------------------------------------------------------

    def snapshot(self, sink: BinaryIO) -> int:
        """Write a point-in-time image of the store; returns records written.

        The lock is held only while arrays are copied, not during I/O.
        """
        with self._lock:
            self._flush_locked()
            segments = [s.copy() for s in self._segments]
            peers = list(self._peers)
        total = sum(len(s) for s in segments)
        crc = 0

        def emit(chunk: bytes):
            nonlocal crc
            crc = zlib.crc32(chunk, crc)
            sink.write(chunk)

        header = [MAGIC, struct.pack("<BQI", VERSION, self._retention_s, len(peers))]
        for p in peers:
            enc = p.encode("utf-8")
            header.append(struct.pack("<H", len(enc)) + enc)
        header.append(struct.pack("<Q", total))
        emit(b"".join(header))
        for seg in segments:
            rec = np.empty(len(seg), dtype=_RECORD_DTYPE)
            rec["len"] = RECORD_LEN
            rec["key"] = seg.keys
            rec["rest"] = seg.rest
            rec["ts"] = seg.ts
            rec["flag"] = seg.flag
            rec["peer"] = seg.peer
            emit(rec.tobytes())
        sink.write(struct.pack("<I", crc))
        return total

    @classmethod
    def restore(cls, source: BinaryIO, clock: Callable[[], datetime] | None = None, **kwargs) -> "LogStore":
        data = source.read()
        if len(data) < len(MAGIC) + 1 + 8 + 4 + 8 + 4:
            raise CorruptSnapshot("snapshot truncated")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise CorruptSnapshot("checksum mismatch")
        if body[:4] != MAGIC:
            raise CorruptSnapshot("bad magic")
        version, retention_s, npeers = struct.unpack_from("<BQI", body, 4)
        if version != VERSION:
            raise CorruptSnapshot(f"unsupported version {version}")
        off = 4 + struct.calcsize("<BQI")
        peers = []
        try:
            for _ in range(npeers):
                (plen,) = struct.unpack_from("<H", body, off)
                off += 2
                peers.append(body[off:off + plen].decode("utf-8"))
                off += plen
            (count,) = struct.unpack_from("<Q", body, off)
        except (struct.error, UnicodeDecodeError) as exc:
            raise CorruptSnapshot(str(exc)) from exc
        off += 8
        if len(body) - off != count * _RECORD_DTYPE.itemsize:
            raise CorruptSnapshot("record stream length mismatch")
        rec = np.frombuffer(body, dtype=_RECORD_DTYPE, count=count, offset=off)
        if count and (np.any(rec["len"] != RECORD_LEN) or np.any(rec["peer"] >= max(len(peers), 1))):
            raise CorruptSnapshot("bad record")
        store = cls(timedelta(seconds=retention_s), clock, **kwargs)
        store._peers = peers
        store._peer_index = {p: i for i, p in enumerate(peers)}
        if count:
            store._segments.append(
                _Segment.build(
                    rec["key"].astype(np.uint64),
                    rec["rest"].copy(),
                    rec["ts"].astype(np.int64),
                    rec["flag"].astype(np.uint8),
                    rec["peer"].astype(np.uint16),
                )
            )
        return store
