"""Policy model, verdict evaluation and enforcement actions."""

from __future__ import annotations

import base64
import binascii
import html
import json
import logging
import os
import threading
import urllib.request
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import yaml

from .crypto import encrypt_decoy
from .detectors.base import DETECTOR_KINDS, Detection
from .detectors.keywords import CompiledMatcher, compile_ruleset
from .envelope import HttpEnvelope
from .icap import IcapRequest, IcapResponse
from .incidents import ClientIdentity, Incident

log = logging.getLogger(__name__)

SEVERITIES = ("low", "medium", "high", "critical")
ACTIONS = ("allow_log", "notify", "encrypt_forward", "block")
PRECEDENCE = {"allow": 0, "allow_log": 1, "notify": 2, "encrypt_forward": 3, "block": 4}
DIRECTIONS = ("outbound", "inbound", "both")
OPACITY_KIND = "opacity"

BUILTIN_RULESET = "builtin-pii"
BUILTIN_UNDECRYPTABLE = "builtin-undecryptable"
BUILTIN_PII = "builtin-pii"
BUILTIN_REGEXES = {
    "ssn": r"\b\d{3}-\d{2}-\d{4}\b",
    "credit-card": r"\b\d{4}[ -]?\d{4}[ -]?\d{4}[ -]?\d{4}\b",
}
DEFAULT_THRESHOLDS = {"fingerprint": 0.3, "classifier": 0.8}
WEBHOOK_TIMEOUT = 5.0
MAX_FIRED_PER_RULE = 10


class PolicyError(ValueError):
    pass


class UnknownDetectorRef(PolicyError):
    def __init__(self, ref: str) -> None:
        super().__init__(f"unknown detector resource {ref!r}")
        self.ref = ref


class DuplicateRuleId(PolicyError):
    pass


class ThresholdOutOfRange(PolicyError):
    pass


class BodyRewriteFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class Rule:
    id: str
    kind: str  # a detector kind, or "opacity" for the undecryptable-payload rule
    resource: str
    threshold: float = 1.0
    severity: str = "medium"
    action: str = "notify"
    direction: str = "outbound"
    ids: frozenset[str] | None = None  # optional filter on Detection.rule_id

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold <= 1.0:
            raise ThresholdOutOfRange(f"rule {self.id!r}: threshold {self.threshold} not in (0, 1]")
        if self.severity not in SEVERITIES:
            raise PolicyError(f"rule {self.id!r}: unknown severity {self.severity!r}")
        if self.action not in ACTIONS:
            raise PolicyError(f"rule {self.id!r}: unknown action {self.action!r}")
        if self.direction not in DIRECTIONS:
            raise PolicyError(f"rule {self.id!r}: unknown direction {self.direction!r}")
        if self.kind not in DETECTOR_KINDS and self.kind != OPACITY_KIND:
            raise PolicyError(f"rule {self.id!r}: unknown detector kind {self.kind!r}")

    def applies_to(self, direction: str) -> bool:
        return self.direction == "both" or self.direction == direction

    def matches(self, d: Detection) -> bool:
        return (
            d.detector == self.kind
            and d.resource == self.resource
            and d.confidence >= self.threshold
            and (self.ids is None or d.rule_id in self.ids)
        )


BUILTIN_RULES = (
    Rule(BUILTIN_UNDECRYPTABLE, OPACITY_KIND, "", 1.0, "critical", "block", "outbound"),
    Rule(BUILTIN_PII, "regex", BUILTIN_RULESET, 1.0, "high", "block", "outbound"),
)


@dataclass(frozen=True)
class Resources:
    """Names of loaded detector resources, by kind."""

    corpora: frozenset[str] = frozenset()
    tags: frozenset[str] = frozenset()
    models: frozenset[str] = frozenset()

    @classmethod
    def of(cls, corpora: Iterable[str] = (), tags: Iterable[str] = (), models: Iterable[str] = ()) -> Resources:
        return cls(frozenset(corpora), frozenset(tags), frozenset(models))


@dataclass(frozen=True)
class PolicySet:
    rules: tuple[Rule, ...]
    rulesets: Mapping[str, CompiledMatcher]
    notification_sinks: tuple[Mapping, ...] = ()
    default_action: str = "allow"

    def rule(self, rule_id: str) -> Rule:
        for r in self.rules:
            if r.id == rule_id:
                return r
        raise KeyError(rule_id)

    def thresholds(self, kind: str) -> dict[str, float]:
        """Lowest threshold per resource among rules of ``kind``."""
        out: dict[str, float] = {}
        for r in self.rules:
            if r.kind == kind:
                out[r.resource] = min(out.get(r.resource, 1.0), r.threshold)
        return out


def _rule_from_doc(doc: Mapping) -> Rule:
    try:
        rid = str(doc["id"])
        det = doc["detector"]
    except KeyError as exc:
        raise PolicyError(f"rule lacks field {exc}") from None
    if isinstance(det, str):
        kind, _, resource = det.partition(":")
    else:
        kind, resource = det.get("kind", ""), det.get("resource", "")
    threshold = doc.get("threshold", DEFAULT_THRESHOLDS.get(kind, 1.0))
    ids = doc.get("ids")
    try:
        threshold = float(threshold)
    except (TypeError, ValueError):
        raise ThresholdOutOfRange(f"rule {rid!r}: threshold {threshold!r}") from None
    return Rule(
        id=rid,
        kind=str(kind),
        resource=str(resource),
        threshold=threshold,
        severity=str(doc.get("severity", "medium")),
        action=str(doc.get("action", "notify")),
        direction=str(doc.get("direction", "outbound")),
        ids=frozenset(map(str, ids)) if ids else None,
    )


def load_policy(doc: str | bytes | Mapping | None, resources: Resources | None = None) -> PolicySet:
    """Validate a policy document (YAML or JSON text, or a parsed mapping).

    Built-in rules are prepended: the undecryptable-outbound block rule (not
    removable) and the SSN/credit-card starter rule (removable through
    ``disable_builtins``).
    """
    if isinstance(doc, (str, bytes)):
        try:
            doc = yaml.safe_load(doc)
        except yaml.YAMLError as exc:
            raise PolicyError(f"policy is not valid YAML/JSON: {exc}") from None
    doc = doc or {}
    if not isinstance(doc, Mapping):
        raise PolicyError("policy document must be a mapping")
    resources = resources or Resources()

    rulesets = {BUILTIN_RULESET: compile_ruleset((), BUILTIN_REGEXES, name=BUILTIN_RULESET)}
    for name, rs in (doc.get("rulesets") or {}).items():
        if name in rulesets:
            raise PolicyError(f"duplicate ruleset {name!r}")
        rs = rs or {}
        rulesets[name] = compile_ruleset(rs.get("keywords", ()), rs.get("regexes", ()), name=name)

    disabled = set(doc.get("disable_builtins") or ())
    if BUILTIN_UNDECRYPTABLE in disabled:
        raise PolicyError("the undecryptable-payload block rule cannot be disabled")
    rules = [r for r in BUILTIN_RULES if r.id not in disabled]
    seen = {r.id for r in rules}
    for rd in doc.get("rules") or ():
        rule = _rule_from_doc(rd)
        if rule.id in seen:
            raise DuplicateRuleId(f"duplicate rule id {rule.id!r}")
        seen.add(rule.id)
        if rule.kind == OPACITY_KIND:
            raise PolicyError(f"rule {rule.id!r}: opacity rules are built in")
        known = {
            "keyword": rulesets.keys(),
            "regex": rulesets.keys(),
            "fingerprint": resources.corpora,
            "tag": resources.tags,
            "classifier": resources.models,
        }[rule.kind]
        if rule.resource not in known:
            raise UnknownDetectorRef(rule.resource)
        rules.append(rule)

    sinks = tuple(doc.get("notification_sinks") or ())
    for s in sinks:
        if not isinstance(s, Mapping) or s.get("type") not in ("file", "webhook"):
            raise PolicyError(f"bad notification sink {s!r}")
    return PolicySet(rules=tuple(rules), rulesets=rulesets, notification_sinks=sinks)


def load_policy_file(path: str | os.PathLike[str], resources: Resources | None = None) -> PolicySet:
    with open(path, encoding="utf-8") as fh:
        return load_policy(fh.read(), resources)


# ------------------------------------------------------------------ evaluation


@dataclass(frozen=True)
class Verdict:
    action: str
    severity: str | None = None
    fired: tuple[tuple[str, Detection | None], ...] = ()
    rationale: str = ""

    @property
    def fired_rule_ids(self) -> list[str]:
        return list(dict.fromkeys(rid for rid, _ in self.fired))


def evaluate(
    ps: PolicySet,
    detections: Sequence[Detection],
    direction: str,
    opacity: str | None = None,
    no_key: bool = False,
) -> Verdict:
    """Fire every matching rule and pick the strictest action.

    ``opacity="encrypted_or_unknown"`` with ``no_key`` fires the built-in
    undecryptable-payload rule regardless of detections.
    """
    fired: list[tuple[str, Detection | None]] = []
    fired_rules: list[Rule] = []
    for rule in ps.rules:
        if not rule.applies_to(direction):
            continue
        if rule.kind == OPACITY_KIND:
            if opacity == "encrypted_or_unknown" and no_key:
                fired.append((rule.id, None))
                fired_rules.append(rule)
            continue
        hits = [d for d in detections if rule.matches(d)]
        if hits:
            fired_rules.append(rule)
            fired.extend((rule.id, d) for d in hits[:MAX_FIRED_PER_RULE])
    if not fired_rules:
        return Verdict("allow", None, (), "no rule fired")
    top = max(fired_rules, key=lambda r: PRECEDENCE[r.action])
    severity = max((r.severity for r in fired_rules), key=SEVERITIES.index)
    names = ", ".join(dict.fromkeys(r.id for r in fired_rules))
    return Verdict(top.action, severity, tuple(fired), f"fired: {names}")


def fail_closed_verdict(reason: str) -> Verdict:
    return Verdict("block", "critical", (), f"internal-error: {reason}")


# --------------------------------------------------------------------- actions


@dataclass
class ActionOutcome:
    action: str
    response: IcapResponse
    forwarded_body: bytes | None = None


def block_page(incident_id: str | None) -> bytes:
    ref = html.escape(incident_id or "unavailable")
    return (
        "<!DOCTYPE html>\n<html><head><title>403 Forbidden</title></head><body>\n"
        "<h1>Request blocked</h1>\n"
        "<p>This transfer was stopped by the organization's data protection policy.</p>\n"
        f"<p>Incident reference: <code>{ref}</code></p>\n"
        "</body></html>\n"
    ).encode()


def _block_response(incident_id: str | None, headers) -> IcapResponse:
    page = block_page(incident_id)
    http = (
        "HTTP/1.1 403 Forbidden\r\n"
        "Content-Type: text/html; charset=utf-8\r\n"
        f"Content-Length: {len(page)}\r\n"
        "Cache-Control: no-store\r\n"
        "Connection: close\r\n\r\n"
    ).encode()
    return IcapResponse.build(200, headers=headers, sections=[("res-hdr", http)], body_tag="res-body", body=page)


def _unmodified(original: IcapRequest | None, headers) -> IcapResponse:
    if original is None or original.allows_204:
        return IcapResponse.build(204, headers=headers)
    tag = original.encapsulated.body_tag
    return IcapResponse.build(
        200,
        headers=headers,
        sections=[(t, original.sections[t]) for t, _ in original.encapsulated.entries[:-1]],
        body_tag=tag,
        body=original.body,
    )


def apply_action(
    v: Verdict,
    env: HttpEnvelope,
    *,
    incident_id: str | None = None,
    decoy_key: tuple[bytes, bytes] | None = None,
    original: IcapRequest | None = None,
    istag: str = '"dlpgate"',
) -> ActionOutcome:
    """Turn a verdict into the ICAP response sent back to the proxy."""
    headers = [("ISTag", istag)]
    if incident_id:
        headers.append(("X-Incident-ID", incident_id))
    if v.action == "block":
        return ActionOutcome("block", _block_response(incident_id, headers))
    if v.action == "encrypt_forward":
        try:
            if decoy_key is None:
                raise BodyRewriteFailure("no enterprise key available for decoy encryption")
            sealed = encrypt_decoy(env.raw_body, *decoy_key)
            hdrs = env.headers.copy()
            hdrs.remove("Transfer-Encoding")
            hdrs.remove("Content-Encoding")
            hdrs.set("Content-Length", str(len(sealed)))
            rewritten = env.start_line.encode("latin-1") + b"\r\n" + hdrs.to_bytes() + b"\r\n"
            if env.kind == "request":
                sections = [("req-hdr", rewritten)]
                tag = "req-body"
            else:
                sections = []
                if original is not None and "req-hdr" in original.sections:
                    sections.append(("req-hdr", original.sections["req-hdr"]))
                sections.append(("res-hdr", rewritten))
                tag = "res-body"
            resp = IcapResponse.build(200, headers=headers, sections=sections, body_tag=tag, body=sealed)
        except Exception as exc:  # fail closed on any rewrite problem
            log.error("decoy rewrite failed, blocking instead: %s", exc)
            return ActionOutcome("block", _block_response(incident_id, headers))
        return ActionOutcome("encrypt_forward", resp, sealed)
    return ActionOutcome(v.action, _unmodified(original, headers))


# -------------------------------------------------------------------- identity


class MacTable(dict):
    """IP -> MAC snapshot, loaded from ``ip<TAB>mac`` lines."""

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> MacTable:
        table = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: expected 'ip<TAB>mac'")
                table[parts[0]] = parts[1].lower()
        return table


def resolve_client_identity(icap_headers, mac_table: Mapping[str, str] | None = None) -> ClientIdentity:
    ip = (icap_headers.get("X-Client-IP") or "").strip()
    user = None
    raw_user = icap_headers.get("X-Authenticated-User")
    if raw_user:
        try:
            user = base64.b64decode(raw_user.strip(), validate=True).decode("utf-8", "replace")
        except (binascii.Error, ValueError):
            user = raw_user.strip()
    mac = (mac_table or {}).get(ip) if ip else None
    return ClientIdentity(ip=ip, mac=mac, user=user)


# ---------------------------------------------------------------- notification


@dataclass(frozen=True)
class DeliveryRecord:
    sink: str
    ok: bool
    error: str | None = None


_file_lock = threading.Lock()


def _deliver(sink: Mapping, incident: Incident) -> DeliveryRecord:
    kind = sink.get("type")
    if kind == "file":
        path = sink["path"]
        with _file_lock, open(path, "a", encoding="utf-8") as fh:
            fh.write(incident.to_json() + "\n")
        return DeliveryRecord(f"file:{path}", True)
    if kind == "webhook":
        url = sink["url"]
        req = urllib.request.Request(
            url,
            data=json.dumps(incident.to_dict(), sort_keys=True).encode(),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with urllib.request.urlopen(req, timeout=float(sink.get("timeout", WEBHOOK_TIMEOUT))) as resp:
            status = resp.status
        if not 200 <= status < 300:
            return DeliveryRecord(f"webhook:{url}", False, f"HTTP {status}")
        return DeliveryRecord(f"webhook:{url}", True)
    raise ValueError(f"unknown sink type {kind!r}")


def notify(sinks: Iterable[Mapping], incident: Incident) -> list[DeliveryRecord]:
    """Attempt every sink; failures are recorded, never raised."""
    records = []
    for sink in sinks:
        try:
            records.append(_deliver(sink, incident))
        except Exception as exc:
            name = f"{sink.get('type')}:{sink.get('path') or sink.get('url')}"
            log.warning("notification to %s failed: %s", name, exc)
            records.append(DeliveryRecord(name, False, str(exc)))
    return records
