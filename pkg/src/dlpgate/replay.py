"""ICAP client and the planted-leak replay harness."""

from __future__ import annotations

import json
import os
import socket
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import icap
from .crypto import MAGIC
from .icap import Headers, IcapRequest, IcapResponse
from .incidents import IncidentStore

EXPECTED_ACTIONS = ("allow", "notify", "encrypt_forward", "block")


class IcapClient:
    """Minimal blocking ICAP client; one connection per transaction."""

    def __init__(self, host: str, port: int, timeout: float = 30.0) -> None:
        self.host, self.port, self.timeout = host, port, timeout

    def _connect(self) -> tuple[socket.socket, object]:
        sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        return sock, sock.makefile("rb")

    def exchange(self, raw: bytes) -> IcapResponse:
        sock, rfile = self._connect()
        try:
            sock.sendall(raw)
            return icap.parse_icap_response(rfile)
        finally:
            rfile.close()
            sock.close()

    def options(self, service: str = "/reqmod") -> IcapResponse:
        req = IcapRequest("OPTIONS", f"icap://{self.host}:{self.port}{service}",
                          headers=Headers([("Host", f"{self.host}:{self.port}")]))
        return self.exchange(icap.serialize_icap_request(req))

    def send(self, req: IcapRequest, preview: int | None = None) -> IcapResponse:
        """Send ``req`` (full body); with ``preview`` run the Preview/100-Continue dance."""
        if preview is None or not req.encapsulated.has_body:
            return self.exchange(icap.serialize_icap_request(req))
        body = req.body
        head = body[:preview]
        first = IcapRequest(
            req.method, req.uri, req.version, req.headers, req.encapsulated, req.sections,
            head, preview_size=preview, preview_ieof=len(body) <= preview,
        )
        sock, rfile = self._connect()
        try:
            sock.sendall(icap.serialize_icap_request(first))
            resp = icap.parse_icap_response(rfile)
            if resp.status != 100:
                return resp
            sock.sendall(icap.encode_chunked(body[preview:]))
            return icap.parse_icap_response(rfile)
        finally:
            rfile.close()
            sock.close()


def build_request(
    kind: str,
    body: bytes,
    *,
    host: str = "127.0.0.1",
    port: int = icap.DEFAULT_PORT,
    target_host: str = "upload.example.com",
    path: str = "/upload",
    content_type: str = "text/plain",
    method: str = "POST",
    client_ip: str | None = None,
    extra_http_headers: Sequence[tuple[str, str]] = (),
    allow_204: bool = True,
) -> IcapRequest:
    """Wrap ``body`` as an outbound (REQMOD) or inbound (RESPMOD) transaction."""
    icap_headers = Headers([("Host", f"{host}:{port}")])
    if allow_204:
        icap_headers.add("Allow", "204")
    if client_ip:
        icap_headers.add("X-Client-IP", client_ip)
    extra = "".join(f"{k}: {v}\r\n" for k, v in extra_http_headers)
    req_hdr = f"{method} {path} HTTP/1.1\r\nHost: {target_host}\r\n"
    if kind == "outbound":
        if body:
            req_hdr += f"Content-Type: {content_type}\r\nContent-Length: {len(body)}\r\n"
        req_hdr += extra + "\r\n"
        sections = [("req-hdr", req_hdr.encode("latin-1"))]
        tag = "req-body" if body else None
        service, imethod = "/reqmod", "REQMOD"
    else:
        req_hdr = f"GET {path} HTTP/1.1\r\nHost: {target_host}\r\n\r\n"
        res_hdr = (
            f"HTTP/1.1 200 OK\r\nContent-Type: {content_type}\r\n"
            f"Content-Length: {len(body)}\r\n{extra}\r\n"
        )
        sections = [("req-hdr", req_hdr.encode("latin-1")), ("res-hdr", res_hdr.encode("latin-1"))]
        tag = "res-body" if body else None
        service, imethod = "/respmod", "RESPMOD"
    layout = icap.compute_encapsulated([(t, len(b)) for t, b in sections], tag)
    return IcapRequest(
        imethod, f"icap://{host}:{port}{service}", headers=icap_headers,
        encapsulated=layout, sections=dict(sections), body=body,
    )


def response_action(resp: IcapResponse) -> str:
    """Classify an ICAP response by shape: allow / block / encrypt_forward / error."""
    if resp.status == 204:
        return "allow"
    if resp.status != 200:
        return "error"
    res_hdr = resp.sections.get("res-hdr", b"")
    if res_hdr.startswith(b"HTTP/1.1 403") or res_hdr.startswith(b"HTTP/1.0 403"):
        return "block"
    if resp.body.startswith(MAGIC):
        return "encrypt_forward"
    return "allow"


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    path: Path
    direction: str = "outbound"
    expected: str = "allow"
    planted_rule_ids: tuple[str, ...] = ()
    content_type: str = "text/plain"
    client_ip: str | None = None

    def __post_init__(self) -> None:
        if self.direction not in ("outbound", "inbound"):
            raise ValueError(f"bad direction {self.direction!r}")
        if self.expected not in EXPECTED_ACTIONS:
            raise ValueError(f"bad expected action {self.expected!r}")


def load_manifest(path: str | os.PathLike[str]) -> list[ManifestEntry]:
    path = Path(path)
    doc = yaml.safe_load(path.read_text())
    entries = doc["entries"] if isinstance(doc, dict) else doc
    out = []
    for e in entries:
        p = Path(e["path"])
        if not p.is_absolute():
            p = path.parent / p
        if not p.exists():
            raise FileNotFoundError(p)
        out.append(
            ManifestEntry(
                path=p,
                direction=e.get("direction", "outbound"),
                expected=e.get("expected", "allow"),
                planted_rule_ids=tuple(e.get("planted_rule_ids") or ()),
                content_type=e.get("content_type", "text/plain"),
                client_ip=e.get("client_ip"),
            )
        )
    return out


@dataclass
class EntryOutcome:
    path: str
    expected: str
    actual: str
    fired_rule_ids: list[str]
    planted_rule_ids: list[str]
    latency_ms: float
    incident_id: str | None = None
    log_agrees: bool = True
    error: str | None = None


@dataclass
class ReplayReport:
    outcomes: list[EntryOutcome] = field(default_factory=list)

    @property
    def confusion(self) -> dict[str, dict[str, int]]:
        actuals = list(EXPECTED_ACTIONS) + ["error"]
        table = {e: {a: 0 for a in actuals} for e in EXPECTED_ACTIONS}
        for o in self.outcomes:
            table[o.expected][o.actual if o.actual in actuals else "error"] += 1
        return table

    def per_rule(self) -> dict[str, dict]:
        rules = sorted({r for o in self.outcomes for r in o.planted_rule_ids + o.fired_rule_ids})
        out = {}
        for rid in rules:
            tp = sum(1 for o in self.outcomes if rid in o.planted_rule_ids and rid in o.fired_rule_ids)
            fp = sum(1 for o in self.outcomes if rid not in o.planted_rule_ids and rid in o.fired_rule_ids)
            fn = sum(1 for o in self.outcomes if rid in o.planted_rule_ids and rid not in o.fired_rule_ids)
            out[rid] = {
                "tp": tp, "fp": fp, "fn": fn,
                # no positives at all: report 1.0 and flag it
                "precision": tp / (tp + fp) if tp + fp else 1.0,
                "recall": tp / (tp + fn) if tp + fn else 1.0,
                "no_positives": tp + fp == 0,
            }
        return out

    def latency_percentiles(self) -> dict[str, float]:
        lat = [o.latency_ms for o in self.outcomes]
        if not lat:
            return {"p50": 0.0, "p95": 0.0, "p99": 0.0}
        p50, p95, p99 = np.percentile(lat, [50, 95, 99])
        return {"p50": float(p50), "p95": float(p95), "p99": float(p99)}

    @property
    def log_consistent(self) -> bool:
        return all(o.log_agrees for o in self.outcomes)

    def to_dict(self) -> dict:
        return {
            "entries": [o.__dict__ for o in self.outcomes],
            "confusion": self.confusion,
            "per_rule": self.per_rule(),
            "latency_ms": self.latency_percentiles(),
            "total": len(self.outcomes),
            "log_consistent": self.log_consistent,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str)

    def to_table(self) -> str:
        lines = ["expected \\ actual  " + "  ".join(f"{a:>15}" for a in list(EXPECTED_ACTIONS) + ["error"])]
        for e, row in self.confusion.items():
            lines.append(f"{e:<18}  " + "  ".join(f"{n:>15}" for n in row.values()))
        lines.append("")
        lines.append(f"{'rule':<28}{'precision':>10}{'recall':>10}{'tp':>5}{'fp':>5}{'fn':>5}")
        for rid, m in self.per_rule().items():
            note = "  (no positives)" if m["no_positives"] else ""
            lines.append(
                f"{rid:<28}{m['precision']:>10.3f}{m['recall']:>10.3f}{m['tp']:>5}{m['fp']:>5}{m['fn']:>5}{note}"
            )
        lat = self.latency_percentiles()
        lines.append("")
        lines.append("latency ms: " + "  ".join(f"{k}={v:.2f}" for k, v in lat.items()))
        lines.append(f"entries: {len(self.outcomes)}  log consistent: {self.log_consistent}")
        return "\n".join(lines)


def _run_one(client: IcapClient, e: ManifestEntry, store: IncidentStore | None, preview: int | None) -> EntryOutcome:
    body = e.path.read_bytes()
    req = build_request(e.direction, body, host=client.host, port=client.port,
                        content_type=e.content_type, client_ip=e.client_ip)
    t0 = time.perf_counter()
    try:
        resp = client.send(req, preview=preview)
    except (OSError, icap.IcapError) as exc:
        return EntryOutcome(str(e.path), e.expected, "error", [], list(e.planted_rule_ids),
                            (time.perf_counter() - t0) * 1000, error=str(exc))
    latency = (time.perf_counter() - t0) * 1000
    actual = response_action(resp)
    incident_id = resp.headers.get("X-Incident-ID")
    fired: list[str] = []
    agrees = True
    if incident_id and store is not None:
        inc = store.get(incident_id)
        if inc is None:
            agrees = False
        else:
            fired = list(dict.fromkeys(f.rule_id for f in inc.fired))
            logged = {"allow_log": "allow"}.get(inc.action, inc.action)
            if actual == "allow":
                actual = logged
            agrees = logged == actual
    elif incident_id:
        if actual == "allow":
            actual = "notify"
    return EntryOutcome(str(e.path), e.expected, actual, fired, list(e.planted_rule_ids),
                        latency, incident_id, agrees)


def replay(
    entries: Sequence[ManifestEntry],
    host: str,
    port: int,
    log_dir: str | os.PathLike[str] | None = None,
    parallel: int = 4,
    preview: int | None = None,
) -> ReplayReport:
    """Send every entry over real ICAP and score the outcomes."""
    client = IcapClient(host, port)
    store = IncidentStore(log_dir) if log_dir is not None else None
    with ThreadPoolExecutor(max_workers=max(parallel, 1)) as pool:
        outcomes = list(pool.map(lambda e: _run_one(client, e, store, preview), entries))
    return ReplayReport(outcomes)
