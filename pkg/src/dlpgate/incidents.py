"""Append-only incident log: one JSON document per line, rotated daily."""

from __future__ import annotations

import errno
import json
import logging
import os
import secrets
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)

SNIPPET_MAX = 64
_CROCKFORD = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"


class AuditWriteError(OSError):
    pass


class DiskFull(AuditWriteError):
    pass


class PermissionDenied(AuditWriteError):
    pass


class _Ulid:
    """Monotonic ULID source: 48-bit ms timestamp + 80 random bits, Crockford base32."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._last_ms = -1
        self._last_rand = 0

    def new(self, ms: int | None = None) -> str:
        with self._lock:
            ms = int(time.time() * 1000) if ms is None else ms
            if ms <= self._last_ms:
                ms = self._last_ms
                rand = self._last_rand + 1
            else:
                rand = secrets.randbits(80)
            self._last_ms, self._last_rand = ms, rand
            value = (ms << 80) | (rand & ((1 << 80) - 1))
        chars = []
        for _ in range(26):
            chars.append(_CROCKFORD[value & 31])
            value >>= 5
        return "".join(reversed(chars))


new_ulid = _Ulid().new


def format_timestamp(ms: int) -> str:
    dt = datetime.fromtimestamp(ms / 1000, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ms % 1000:03d}Z"


def parse_timestamp(text: str) -> datetime:
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%fZ").replace(tzinfo=timezone.utc)


def _as_stamp(value: datetime | str | None) -> str | None:
    if value is None or isinstance(value, str):
        return value
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    return format_timestamp(int(value.timestamp() * 1000))


@dataclass(frozen=True)
class ClientIdentity:
    ip: str = ""
    mac: str | None = None
    user: str | None = None


@dataclass(frozen=True)
class FiredRecord:
    rule_id: str
    detector: str
    confidence: float
    snippet: str

    def __post_init__(self) -> None:
        if len(self.snippet) > SNIPPET_MAX:
            object.__setattr__(self, "snippet", self.snippet[:SNIPPET_MAX])


@dataclass(frozen=True)
class Incident:
    id: str
    timestamp: str
    direction: str
    client: ClientIdentity
    target: str
    verdict: dict
    fired: tuple[FiredRecord, ...] = ()
    bytes_inspected: int = 0

    @property
    def action(self) -> str:
        return self.verdict["action"]

    @property
    def severity(self) -> str | None:
        return self.verdict.get("severity")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fired"] = [asdict(f) for f in self.fired]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> Incident:
        return cls(
            id=d["id"],
            timestamp=d["timestamp"],
            direction=d["direction"],
            client=ClientIdentity(**d["client"]),
            target=d["target"],
            verdict=dict(d["verdict"]),
            fired=tuple(FiredRecord(**f) for f in d["fired"]),
            bytes_inspected=int(d["bytes_inspected"]),
        )


@dataclass
class QueryResult:
    incidents: list[Incident]
    corrupt: int = 0

    def __iter__(self):
        return iter(self.incidents)

    def __len__(self) -> int:
        return len(self.incidents)


@dataclass
class ReportStats:
    total: int = 0
    by_action: Counter = field(default_factory=Counter)
    by_detector: Counter = field(default_factory=Counter)
    by_severity: Counter = field(default_factory=Counter)
    by_client: Counter = field(default_factory=Counter)
    corrupt: int = 0

    @property
    def top_clients(self) -> list[tuple[str, int]]:
        return sorted(self.by_client.items(), key=lambda kv: (-kv[1], kv[0]))[:10]

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "by_action": dict(sorted(self.by_action.items())),
            "by_detector": dict(sorted(self.by_detector.items())),
            "by_severity": dict(sorted(self.by_severity.items())),
            "top_clients": [{"ip": ip, "count": n} for ip, n in self.top_clients],
            "corrupt_lines": self.corrupt,
        }


class IncidentStore:
    """Newline-delimited JSON incident log under ``directory``.

    Appends are serialized through an internal lock (single writer); any
    number of readers may scan the files concurrently.
    """

    PREFIX = "incidents-"
    SUFFIX = ".jsonl"

    def __init__(self, directory: str | os.PathLike[str], fsync: bool = False) -> None:
        self.directory = Path(directory)
        self.fsync = fsync
        self._lock = threading.Lock()
        self._last_ms = 0

    def _file_for(self, stamp: str) -> Path:
        return self.directory / f"{self.PREFIX}{stamp[:10].replace('-', '')}{self.SUFFIX}"

    def _now_ms(self) -> int:
        ms = int(time.time() * 1000)
        self._last_ms = max(self._last_ms, ms)
        return self._last_ms

    def new_incident(self, **fields) -> Incident:
        """Create an incident with a fresh id and a non-decreasing timestamp."""
        with self._lock:
            ms = self._now_ms()
        fields.setdefault("client", ClientIdentity())
        return Incident(id=new_ulid(ms), timestamp=format_timestamp(ms), **fields)

    @staticmethod
    def _translate(exc: OSError) -> AuditWriteError:
        if exc.errno in (errno.ENOSPC, errno.EDQUOT):
            return DiskFull(exc.errno, f"incident log: {exc.strerror}")
        return PermissionDenied(exc.errno or errno.EACCES, f"incident log: {exc.strerror or exc}")

    def _open_append(self, path: Path) -> int:
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            return os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o640)
        except OSError as exc:
            raise self._translate(exc) from exc

    def append(self, inc: Incident) -> str:
        line = (inc.to_json() + "\n").encode("utf-8")
        with self._lock:
            fd = self._open_append(self._file_for(inc.timestamp))
            try:
                os.write(fd, line)
                if self.fsync:
                    os.fsync(fd)
            except OSError as exc:
                raise self._translate(exc) from exc
            finally:
                os.close(fd)
        return inc.id

    def check_writable(self) -> None:
        """Raise :class:`AuditWriteError` if today's log cannot be opened for append."""
        stamp = format_timestamp(int(time.time() * 1000))
        with self._lock:
            os.close(self._open_append(self._file_for(stamp)))

    def files(self) -> list[Path]:
        if not self.directory.is_dir():
            return []
        return sorted(self.directory.glob(f"{self.PREFIX}*{self.SUFFIX}"))

    def query(
        self,
        since: datetime | str | None = None,
        until: datetime | str | None = None,
        action: str | None = None,
        rule_id: str | None = None,
        client_ip: str | None = None,
    ) -> QueryResult:
        """Matching incidents in timestamp order; ``until`` is exclusive."""
        lo, hi = _as_stamp(since), _as_stamp(until)
        found: list[Incident] = []
        corrupt = 0
        for path in self.files():
            with open(path, "rb") as fh:
                for raw in fh:
                    if not raw.strip():
                        continue
                    try:
                        inc = Incident.from_dict(json.loads(raw))
                    except (ValueError, KeyError, TypeError):
                        corrupt += 1
                        continue
                    if lo is not None and inc.timestamp < lo:
                        continue
                    if hi is not None and inc.timestamp >= hi:
                        continue
                    if action is not None and inc.action != action:
                        continue
                    if rule_id is not None and all(f.rule_id != rule_id for f in inc.fired):
                        continue
                    if client_ip is not None and inc.client.ip != client_ip:
                        continue
                    found.append(inc)
        if corrupt:
            log.warning("skipped %d corrupt incident line(s)", corrupt)
        found.sort(key=lambda i: (i.timestamp, i.id))
        return QueryResult(found, corrupt)

    def get(self, incident_id: str) -> Incident | None:
        for inc in self.query():
            if inc.id == incident_id:
                return inc
        return None


def summarize(incidents: Iterable[Incident]) -> ReportStats:
    stats = ReportStats()
    for inc in incidents:
        stats.total += 1
        stats.by_action[inc.action] += 1
        stats.by_severity[inc.severity or "none"] += 1
        for kind in sorted({f.detector for f in inc.fired}):
            stats.by_detector[kind] += 1
        stats.by_client[inc.client.ip or "unknown"] += 1
    return stats


def aggregate_report(
    store: IncidentStore, since: datetime | str | None = None, until: datetime | str | None = None
) -> ReportStats:
    result = store.query(since=since, until=until)
    stats = summarize(result.incidents)
    stats.corrupt = result.corrupt
    return stats
