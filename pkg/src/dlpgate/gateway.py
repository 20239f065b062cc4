"""ICAP service: configuration, resource snapshots, the inspection pipeline, TCP server."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import queue
import select
import signal
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import yaml

from . import icap
from .crypto import AuthenticationFailure, KeyStore, NoKey, try_enterprise_decrypt
from .detectors import (
    FingerprintIndex,
    NBModel,
    TagRegistry,
    classifier_scan,
    fingerprint_scan,
    scan_keywords,
    tag_scan,
)
from .detectors.base import Detection
from .envelope import (
    ExtractedContent,
    HttpEnvelope,
    _decompress,
    classify_opacity,
    extract_plain,
    extract_text,
    parse_http_envelope,
)
from .icap import IcapRequest, IcapResponse
from .incidents import AuditWriteError, FiredRecord, Incident, IncidentStore
from .policy import (
    MacTable,
    PolicySet,
    Resources,
    Verdict,
    apply_action,
    evaluate,
    fail_closed_verdict,
    load_policy_file,
    notify,
    resolve_client_identity,
)

log = logging.getLogger(__name__)

SERVICES = {"/reqmod": "REQMOD", "/respmod": "RESPMOD"}


class ConfigError(ValueError):
    pass


@dataclass
class GatewayConfig:
    host: str = "127.0.0.1"
    port: int = icap.DEFAULT_PORT
    preview_size_advertised: int = 1024
    max_connections: int = 64
    policy_path: Path | None = None
    keystore_path: Path | None = None
    decoy_key_id: str | None = None
    mac_table_path: Path | None = None
    fingerprints: dict[str, Path] = field(default_factory=dict)
    tags: dict[str, Path] = field(default_factory=dict)
    models: dict[str, Path] = field(default_factory=dict)
    incident_dir: Path = Path("incidents")
    fsync: bool = False
    mandatory_audit: bool = True
    max_message_size: int = icap.DEFAULT_MAX_MESSAGE
    io_timeout: float = 30.0
    pidfile: Path | None = None
    check_keystore_permissions: bool = True
    fail_mode: str = "closed"

    def __post_init__(self) -> None:
        if self.preview_size_advertised < 0:
            raise ConfigError("preview must be >= 0")
        if self.max_connections < 1:
            raise ConfigError("max_connections must be >= 1")
        if self.fail_mode != "closed":
            raise ConfigError("fail_mode is fixed to 'closed'")

    @classmethod
    def from_mapping(cls, doc: Mapping, base: Path = Path(".")) -> GatewayConfig:
        def path(v):
            if v is None:
                return None
            p = Path(os.path.expanduser(str(v)))
            return p if p.is_absolute() else base / p

        known = {f.name for f in dataclasses.fields(cls)} | {"listen", "policy", "keystore", "mac_table", "incident_log", "preview"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kw: dict = {}
        listen = doc.get("listen")
        if listen:
            host, _, port = str(listen).rpartition(":")
            try:
                kw["host"], kw["port"] = host or "127.0.0.1", int(port)
            except ValueError:
                raise ConfigError(f"bad listen address {listen!r}") from None
        for key in ("host", "decoy_key_id", "fail_mode"):
            if key in doc:
                kw[key] = doc[key]
        for key in ("port", "max_connections", "max_message_size"):
            if key in doc:
                kw[key] = int(doc[key])
        if "preview" in doc:
            kw["preview_size_advertised"] = int(doc["preview"])
        if "io_timeout" in doc:
            kw["io_timeout"] = float(doc["io_timeout"])
        for key in ("mandatory_audit", "fsync", "check_keystore_permissions"):
            if key in doc:
                kw[key] = bool(doc[key])
        kw["policy_path"] = path(doc.get("policy"))
        kw["keystore_path"] = path(doc.get("keystore"))
        kw["mac_table_path"] = path(doc.get("mac_table"))
        kw["pidfile"] = path(doc.get("pidfile"))
        for key in ("fingerprints", "tags", "models"):
            kw[key] = {str(n): path(p) for n, p in (doc.get(key) or {}).items()}
        inc = doc.get("incident_log") or {}
        if isinstance(inc, str):
            inc = {"dir": inc}
        kw["incident_dir"] = path(inc.get("dir", "incidents"))
        if "fsync" in inc:
            kw["fsync"] = bool(inc["fsync"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> GatewayConfig:
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(doc, Mapping):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_mapping(doc, path.parent)


@dataclass(frozen=True)
class Snapshot:
    """Immutable set of loaded detection resources; swapped whole on reload."""

    policy: PolicySet
    fingerprints: Mapping[str, FingerprintIndex]
    tags: Mapping[str, TagRegistry]
    models: Mapping[str, NBModel]
    keystore: KeyStore
    decoy_key: tuple[bytes, bytes] | None
    mac_table: Mapping[str, str]
    istag: str
    generation: int = 0


def load_snapshot(cfg: GatewayConfig, generation: int = 0) -> Snapshot:
    digest = hashlib.sha256()

    def read(p: Path) -> bytes:
        data = p.read_bytes()
        digest.update(str(p).encode() + b"\0" + data)
        return data

    fps = {}
    for name, p in sorted(cfg.fingerprints.items()):
        fps[name] = dataclasses.replace(FingerprintIndex.from_json(read(p).decode()), name=name)
    tags = {}
    for name, p in sorted(cfg.tags.items()):
        tags[name] = dataclasses.replace(TagRegistry.from_json(read(p).decode()), name=name)
    models = {}
    for name, p in sorted(cfg.models.items()):
        models[name] = dataclasses.replace(NBModel.from_json(read(p).decode()), name=name)
    resources = Resources.of(fps, tags, models)
    if cfg.policy_path is not None:
        read(cfg.policy_path)
        policy = load_policy_file(cfg.policy_path, resources)
    else:
        from .policy import load_policy

        policy = load_policy({}, resources)
    keystore = KeyStore()
    if cfg.keystore_path is not None:
        read(cfg.keystore_path)
        keystore = KeyStore.load(cfg.keystore_path, check_permissions=cfg.check_keystore_permissions)
    decoy = None
    if keystore.keys:
        if cfg.decoy_key_id:
            kid = bytes.fromhex(cfg.decoy_key_id)
            if kid not in keystore:
                raise ConfigError(f"decoy key {cfg.decoy_key_id} not in keystore")
            decoy = (kid, keystore.keys[kid])
        else:
            decoy = keystore.first()
    macs: Mapping[str, str] = {}
    if cfg.mac_table_path is not None:
        read(cfg.mac_table_path)
        macs = MacTable.load(cfg.mac_table_path)
    return Snapshot(
        policy=policy,
        fingerprints=fps,
        tags=tags,
        models=models,
        keystore=keystore,
        decoy_key=decoy,
        mac_table=macs,
        istag=f'"dlp-{digest.hexdigest()[:24]}"',
        generation=generation,
    )


# -------------------------------------------------------------------- pipeline


@dataclass
class Inspection:
    content: ExtractedContent
    detections: list[Detection]
    opacity: str | None
    no_key: bool
    bytes_inspected: int


def _merge(into: ExtractedContent, extra: ExtractedContent) -> None:
    into.segments.extend(extra.segments)
    into.raw_opaque.extend(extra.raw_opaque)
    into.errors.extend(extra.errors)


def inspect(env: HttpEnvelope, snap: Snapshot) -> Inspection:
    """Extraction, opacity triage/decryption and every configured detector."""
    content = extract_text(env)
    opacity = None
    no_key = False
    payloads = []
    if env.body:
        payloads.append(env.body)
    payloads.extend(o.data for o in content.raw_opaque if o.data and o.data is not env.body)
    for data in payloads:
        ov = classify_opacity(data)
        if opacity != "encrypted_or_unknown":
            opacity = ov.klass
        if ov.klass == "encrypted_or_unknown":
            try:
                plain = try_enterprise_decrypt(data, snap.keystore)
            except AuthenticationFailure:
                log.warning("enterprise envelope failed authentication; treating as undecryptable")
                no_key = True
            except NoKey:
                no_key = True
            else:
                _merge(content, extract_plain(plain, "body", "decrypted"))
        elif ov.klass == "compressed" and ov.magic in ("gzip", "zlib"):
            try:
                inner = _decompress(data, "gzip" if ov.magic == "gzip" else "deflate")
            except Exception:
                continue
            _merge(content, extract_plain(inner, "body", "decompressed"))
    if no_key:
        opacity = "encrypted_or_unknown"

    policy = snap.policy
    detections: list[Detection] = []
    wanted = {(r.kind, r.resource) for r in policy.rules}
    for name, matcher in policy.rulesets.items():
        if ("keyword", name) in wanted or ("regex", name) in wanted:
            detections.extend(scan_keywords(matcher, content))
    for name, th in policy.thresholds("fingerprint").items():
        detections.extend(fingerprint_scan(snap.fingerprints[name], content, th))
    for name in policy.thresholds("tag"):
        detections.extend(tag_scan(snap.tags[name], content))
    for name, th in policy.thresholds("classifier").items():
        detections.extend(classifier_scan(snap.models[name], content, th))
    return Inspection(content, detections, opacity, no_key, len(env.body))


def _fired_records(v: Verdict) -> tuple[FiredRecord, ...]:
    out = []
    for rule_id, d in v.fired:
        if d is None:
            out.append(FiredRecord(rule_id, "opacity", 1.0, "undecryptable payload"))
        else:
            out.append(FiredRecord(rule_id, d.detector, d.confidence, d.snippet))
    return tuple(out)


class Gateway:
    """Holds the live snapshot and runs transactions through the pipeline."""

    def __init__(self, cfg: GatewayConfig, snapshot: Snapshot | None = None) -> None:
        self.cfg = cfg
        self._snapshot = snapshot or load_snapshot(cfg)
        self._reload_lock = threading.Lock()
        self.store = IncidentStore(cfg.incident_dir, fsync=cfg.fsync)
        self._notify_q: queue.Queue = queue.Queue()
        self._notifier = threading.Thread(target=self._notify_loop, name="dlp-notify", daemon=True)
        self._notifier.start()

    @property
    def snapshot(self) -> Snapshot:
        return self._snapshot

    def reload(self) -> bool:
        """Load fresh resources and swap them in; on failure keep the old snapshot."""
        with self._reload_lock:
            try:
                new = load_snapshot(self.cfg, self._snapshot.generation + 1)
            except Exception as exc:
                log.error("reload failed, keeping generation %d: %s", self._snapshot.generation, exc)
                return False
            self._snapshot = new
            log.info("reloaded resources, generation %d istag %s", new.generation, new.istag)
            return True

    def _notify_loop(self) -> None:
        while True:
            sinks, incident = self._notify_q.get()
            notify(sinks, incident)
            self._notify_q.task_done()

    def drain_notifications(self) -> None:
        self._notify_q.join()

    # ---------------------------------------------------------- ICAP handlers

    def handle_options(self, req: IcapRequest, snap: Snapshot | None = None) -> IcapResponse:
        snap = snap or self._snapshot
        method = SERVICES.get(req.service)
        if method is None:
            return icap.error_response(404, f"no service at {req.service}")
        return IcapResponse.build(
            200,
            headers=[
                ("Methods", method),
                ("Service", "dlpgate ICAP data-loss-prevention service"),
                ("ISTag", snap.istag),
                ("Max-Connections", str(self.cfg.max_connections)),
                ("Options-TTL", "3600"),
                ("Allow", "204"),
                ("Preview", str(self.cfg.preview_size_advertised)),
                ("Transfer-Preview", "*"),
            ],
        )

    def handle_reqmod(self, req: IcapRequest, snap: Snapshot | None = None) -> IcapResponse:
        return self._handle_mod(req, "outbound", snap or self._snapshot)

    def handle_respmod(self, req: IcapRequest, snap: Snapshot | None = None) -> IcapResponse:
        return self._handle_mod(req, "inbound", snap or self._snapshot)

    def handle(self, req: IcapRequest, snap: Snapshot | None = None) -> IcapResponse:
        """Dispatch a fully-read request (preview already completed)."""
        snap = snap or self._snapshot
        if req.method == "OPTIONS":
            return self.handle_options(req, snap)
        expected = SERVICES.get(req.service)
        if expected is None:
            return icap.error_response(404, f"no service at {req.service}")
        if expected != req.method:
            return icap.error_response(405, f"{req.method} not offered at {req.service}")
        if req.method == "REQMOD":
            return self.handle_reqmod(req, snap)
        return self.handle_respmod(req, snap)

    def fail_closed(self, req: IcapRequest, snap: Snapshot, reason: str) -> IcapResponse:
        direction = "outbound" if req.method == "REQMOD" else "inbound"
        client = resolve_client_identity(req.headers, snap.mac_table)
        verdict = fail_closed_verdict(reason)
        incident_id = None
        try:
            inc = self.store.new_incident(
                direction=direction,
                client=client,
                target=_target_hint(req),
                verdict={"action": "block", "severity": verdict.severity, "rationale": verdict.rationale},
                fired=(),
                bytes_inspected=len(req.body),
            )
            incident_id = self.store.append(inc)
            self._notify(snap, inc)
        except Exception as exc:
            log.error("could not record fail-closed incident: %s", exc)
        dummy = HttpEnvelope(kind="request", start_line="", headers=icap.Headers())
        return apply_action(verdict, dummy, incident_id=incident_id, istag=snap.istag).response

    def _notify(self, snap: Snapshot, inc: Incident) -> None:
        if snap.policy.notification_sinks and inc.action != "allow_log":
            self._notify_q.put((snap.policy.notification_sinks, inc))

    def _handle_mod(self, req: IcapRequest, direction: str, snap: Snapshot) -> IcapResponse:
        try:
            return self._pipeline(req, direction, snap)
        except Exception as exc:
            log.exception("pipeline fault; failing closed")
            return self.fail_closed(req, snap, type(exc).__name__)

    def _pipeline(self, req: IcapRequest, direction: str, snap: Snapshot) -> IcapResponse:
        if direction == "outbound":
            hdr = req.sections.get("req-hdr")
            if hdr is None:
                raise ValueError("REQMOD without req-hdr")
            env = parse_http_envelope(hdr, "request", body=req.body)
        else:
            hdr = req.sections.get("res-hdr")
            if hdr is None:
                raise ValueError("RESPMOD without res-hdr")
            env = parse_http_envelope(hdr, "response", body=req.body)
            if "req-hdr" in req.sections:
                env.target = parse_http_envelope(req.sections["req-hdr"], "request", body=b"").target
        client = resolve_client_identity(req.headers, snap.mac_table)
        result = inspect(env, snap)
        verdict = evaluate(snap.policy, result.detections, direction, result.opacity, result.no_key)
        if result.content.errors and direction == "outbound":
            verdict = fail_closed_verdict("; ".join(result.content.errors))
        if verdict.action == "encrypt_forward" and snap.decoy_key is None:
            # log what the proxy will actually see
            verdict = dataclasses.replace(
                verdict, action="block", rationale=verdict.rationale + "; no decoy key, blocked"
            )

        incident_id = None
        if verdict.action != "allow":
            inc = self.store.new_incident(
                direction=direction,
                client=client,
                target=env.target,
                verdict={"action": verdict.action, "severity": verdict.severity, "rationale": verdict.rationale},
                fired=_fired_records(verdict),
                bytes_inspected=result.bytes_inspected,
            )
            try:
                incident_id = self.store.append(inc)
            except AuditWriteError as exc:
                log.error("audit write failed: %s", exc)
                if self.cfg.mandatory_audit:
                    verdict = fail_closed_verdict("audit-unavailable")
            else:
                self._notify(snap, inc)
        elif self.cfg.mandatory_audit:
            try:
                self.store.check_writable()
            except AuditWriteError as exc:
                log.error("audit log unavailable, blocking: %s", exc)
                verdict = fail_closed_verdict("audit-unavailable")

        outcome = apply_action(
            verdict, env, incident_id=incident_id, decoy_key=snap.decoy_key, original=req, istag=snap.istag
        )
        return outcome.response


def _target_hint(req: IcapRequest) -> str:
    hdr = req.sections.get("req-hdr")
    if not hdr:
        return ""
    try:
        return parse_http_envelope(hdr, "request", body=b"").target
    except Exception:
        return ""


# ---------------------------------------------------------------------- server


class SocketReader:
    """Buffered reader over a socket with readline/read and an idle-wait helper."""

    def __init__(self, sock: socket.socket, timeout: float) -> None:
        self.sock = sock
        self.timeout = timeout
        self.buf = bytearray()
        self.eof = False

    def _fill(self) -> bool:
        if self.eof:
            return False
        r, _, _ = select.select([self.sock], [], [], self.timeout)
        if not r:
            raise icap.ChunkFramingError("read timed out")
        data = self.sock.recv(65536)
        if not data:
            self.eof = True
            return False
        self.buf += data
        return True

    def readline(self, limit: int = -1) -> bytes:
        while True:
            i = self.buf.find(b"\n")
            if i >= 0 and (limit < 0 or i < limit):
                out = bytes(self.buf[: i + 1])
                del self.buf[: i + 1]
                return out
            if 0 <= limit <= len(self.buf):
                out = bytes(self.buf[:limit])
                del self.buf[:limit]
                return out
            if not self._fill():
                out = bytes(self.buf)
                self.buf.clear()
                return out

    def read(self, n: int) -> bytes:
        while len(self.buf) < n and self._fill():
            pass
        out = bytes(self.buf[:n])
        del self.buf[:n]
        return out

    def wait_for_data(self, tick: float) -> bool:
        """True once bytes (or EOF) are available; False after ``tick`` idle seconds."""
        if self.buf or self.eof:
            return True
        r, _, _ = select.select([self.sock], [], [], tick)
        return bool(r)


class _Handler(socketserver.BaseRequestHandler):
    server: IcapServer

    def handle(self) -> None:
        gw = self.server.gateway
        sock: socket.socket = self.request
        reader = SocketReader(sock, gw.cfg.io_timeout)
        try:
            while not self.server.stopping.is_set():
                if not reader.wait_for_data(0.2):
                    continue
                if not self._one(gw, reader, sock):
                    break
        except (ConnectionError, OSError) as exc:
            log.debug("connection error: %s", exc)
        finally:
            self.server.slots.release()

    def _one(self, gw: Gateway, reader: SocketReader, sock: socket.socket) -> bool:
        snap = gw.snapshot
        try:
            req = icap.parse_icap_request(reader, max_size=gw.cfg.max_message_size)
        except EOFError:
            return False
        except icap.IcapError as exc:
            partial = getattr(exc, "request", None)
            if partial is not None and partial.method in ("REQMOD", "RESPMOD"):
                resp = gw.fail_closed(partial, snap, f"{type(exc).__name__}: {exc}")
            else:
                resp = icap.error_response(exc.status, str(exc))
            self._send(sock, resp, close=True)
            return False
        if not req.preview_complete:
            sock.sendall(icap.serialize_icap_response(IcapResponse.build(100)))
            try:
                rest, _ = icap.decode_chunked(reader, max_size=gw.cfg.max_message_size)
            except icap.IcapError as exc:
                self._send(sock, gw.fail_closed(req, snap, f"{type(exc).__name__}: {exc}"), close=True)
                return False
            req.body += rest
            req.preview_ieof = True
        resp = gw.handle(req, snap)
        close = (req.headers.get("Connection") or "").lower() == "close"
        self._send(sock, resp, close=close)
        return not close

    @staticmethod
    def _send(sock: socket.socket, resp: IcapResponse, close: bool) -> None:
        if close and "Connection" not in resp.headers:
            resp.headers.add("Connection", "close")
        sock.sendall(icap.serialize_icap_response(resp))


class IcapServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True

    def __init__(self, gateway: Gateway) -> None:
        self.gateway = gateway
        self.stopping = threading.Event()
        self.slots = threading.BoundedSemaphore(gateway.cfg.max_connections)
        super().__init__((gateway.cfg.host, gateway.cfg.port), _Handler)

    def process_request(self, request, client_address) -> None:
        self.slots.acquire()
        try:
            super().process_request(request, client_address)
        except Exception:
            self.slots.release()
            raise

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def stop(self) -> None:
        """Stop accepting, let in-flight transactions finish, close idle connections."""
        self.stopping.set()
        self.shutdown()
        self.server_close()


def start_server(gateway: Gateway) -> tuple[IcapServer, threading.Thread]:
    """Bind and serve in a background thread (used by tests and the replay harness)."""
    server = IcapServer(gateway)
    t = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.1}, daemon=True)
    t.start()
    return server, t


def serve(cfg: GatewayConfig) -> int:
    """Run until SIGINT/SIGTERM; SIGHUP reloads resources."""
    gateway = Gateway(cfg)
    server = IcapServer(gateway)
    log.info("dlpgate listening on %s:%d", *server.address)
    if cfg.pidfile:
        cfg.pidfile.write_text(f"{os.getpid()}\n")

    def on_stop(signum, frame):
        log.info("signal %d: draining and shutting down", signum)
        threading.Thread(target=server.stop, daemon=True).start()

    signal.signal(signal.SIGTERM, on_stop)
    signal.signal(signal.SIGINT, on_stop)
    if hasattr(signal, "SIGHUP"):
        signal.signal(signal.SIGHUP, lambda s, f: threading.Thread(target=gateway.reload, daemon=True).start())
    try:
        server.serve_forever(poll_interval=0.2)
    finally:
        server.stopping.set()
        server.server_close()
        if cfg.pidfile:
            try:
                cfg.pidfile.unlink()
            except OSError:
                pass
    return 0
