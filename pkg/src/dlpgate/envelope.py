"""Encapsulated HTTP transactions: parsing, text extraction, opacity triage."""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass, field
from urllib.parse import parse_qsl, unquote_to_bytes, urlsplit

from . import _kernels
from .icap import Headers
from .text import decode, normalize

DEFAULT_CONTENT_TYPE = "application/octet-stream"
ENTROPY_THRESHOLD = 7.5
ENTROPY_MIN_LENGTH = 256
MAX_EXPANSION = 100

TEXTUAL_TYPES = {
    "application/json",
    "application/xml",
    "application/javascript",
    "application/x-www-form-urlencoded",
    "application/x-ndjson",
}


class MalformedHttpHeader(ValueError):
    pass


class DecompressionBomb(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class MediaType:
    type: str
    params: tuple[tuple[str, str], ...] = ()

    @classmethod
    def parse(cls, value: str | None) -> MediaType:
        if not value or not value.strip():
            return cls(DEFAULT_CONTENT_TYPE)
        main, *rest = value.split(";")
        params = []
        for p in rest:
            k, sep, v = p.partition("=")
            if sep:
                params.append((k.strip().lower(), v.strip().strip('"')))
        mtype = main.strip().lower() or DEFAULT_CONTENT_TYPE
        return cls(mtype, tuple(params))

    def param(self, name: str) -> str | None:
        for k, v in self.params:
            if k == name:
                return v
        return None

    @property
    def is_textual(self) -> bool:
        t = self.type
        return (
            t.startswith("text/")
            or t in TEXTUAL_TYPES
            or t.endswith("+json")
            or t.endswith("+xml")
        )

    def __str__(self) -> str:
        return self.type + "".join(f"; {k}={v}" for k, v in self.params)


@dataclass
class HttpEnvelope:
    kind: str  # "request" | "response"
    start_line: str
    headers: Headers
    body: bytes = b""
    method: str | None = None
    target: str = ""
    status: int | None = None
    content_type: MediaType = field(default_factory=lambda: MediaType(DEFAULT_CONTENT_TYPE))
    content_encoding: str | None = None
    raw_body: bytes = b""
    decode_failed: bool = False

    @property
    def method_or_status(self) -> str | int | None:
        return self.method if self.kind == "request" else self.status

    def header_bytes(self) -> bytes:
        return self.start_line.encode("latin-1") + b"\r\n" + self.headers.to_bytes() + b"\r\n"


def _target_of(target: str, headers: Headers) -> str:
    if "://" in target:
        parts = urlsplit(target)
        return parts.netloc + (parts.path or "/") + (f"?{parts.query}" if parts.query else "")
    host = headers.get("Host") or ""
    return host + target


def _decompress(data: bytes, coding: str) -> bytes:
    wbits = 31 if coding in ("gzip", "x-gzip") else 15
    d = zlib.decompressobj(wbits)
    out = d.decompress(data, max(len(data), 1) * MAX_EXPANSION)
    if d.unconsumed_tail:
        raise DecompressionBomb(f"expansion beyond {MAX_EXPANSION}:1")
    if not d.eof:
        raise zlib.error("truncated compressed stream")
    return out


def parse_http_envelope(data: bytes, kind: str, body: bytes | None = None) -> HttpEnvelope:
    """Parse an HTTP header section (plus body, or with ``body`` given separately).

    ``Content-Encoding: gzip``/``deflate`` bodies are decompressed, bounded
    by a 100:1 expansion cap; failures keep the raw body and set
    ``decode_failed``.
    """
    if body is None:
        head, sep, rest = data.partition(b"\r\n\r\n")
        if not sep:
            raise MalformedHttpHeader("header section is not CRLF-terminated")
        body = rest
        data = head + b"\r\n\r\n"
    lines = data.decode("latin-1").split("\r\n")
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MalformedHttpHeader("empty header section")
    start = lines[0]
    headers = Headers()
    for line in lines[1:]:
        name, sep, value = line.partition(":")
        if not sep or not name.strip() or name != name.strip():
            raise MalformedHttpHeader(f"bad header line {line[:80]!r}")
        headers.add(name, value.strip())
    env = HttpEnvelope(kind=kind, start_line=start, headers=headers)
    parts = start.split(" ", 2)
    if kind == "request":
        if len(parts) != 3 or not parts[2].startswith("HTTP/"):
            raise MalformedHttpHeader(f"bad request line {start[:80]!r}")
        env.method = parts[0]
        env.target = _target_of(parts[1], headers)
    elif kind == "response":
        if len(parts) < 2 or not parts[0].startswith("HTTP/") or not parts[1].isdigit():
            raise MalformedHttpHeader(f"bad status line {start[:80]!r}")
        env.status = int(parts[1])
    else:
        raise ValueError(f"unknown envelope kind {kind!r}")
    env.content_type = MediaType.parse(headers.get("Content-Type"))
    env.raw_body = body
    env.body = body
    coding = (headers.get("Content-Encoding") or "").strip().lower() or None
    env.content_encoding = coding
    if coding in ("gzip", "x-gzip", "deflate") and body:
        try:
            env.body = _decompress(body, coding)
        except (zlib.error, DecompressionBomb):
            env.decode_failed = True
    elif coding not in (None, "identity"):
        env.decode_failed = True
    return env


# ----------------------------------------------------------------- extraction


@dataclass(frozen=True)
class Segment:
    source: str  # body | form-field | multipart-part | json-string | url-query | header-subject
    name: str | None
    text: str
    region: tuple[int, int] | None = None


@dataclass(frozen=True)
class Opaque:
    source: str
    name: str | None
    data: bytes
    region: tuple[int, int] | None = None


@dataclass
class ExtractedContent:
    segments: list[Segment] = field(default_factory=list)
    raw_opaque: list[Opaque] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @property
    def texts(self) -> list[str]:
        return [s.text for s in self.segments]

    def joined(self) -> str:
        return " ".join(s.text for s in self.segments if s.text)


def _iter_json_strings(value, name=None):
    if isinstance(value, str):
        yield name, value
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _iter_json_strings(v, k)
    elif isinstance(value, list):
        for v in value:
            yield from _iter_json_strings(v, name)


def _form_unquote(raw: bytes) -> str:
    return unquote_to_bytes(raw.replace(b"+", b" ")).decode("utf-8", "replace")


def _extract_form(data: bytes, base: int, out: ExtractedContent) -> None:
    fields = []
    pos = 0
    for piece in data.split(b"&"):
        if piece:
            fields.append((pos, piece))
        pos += len(piece) + 1
    if not fields:
        _extract_text_body(data, base, out)
        return
    for i, (start, piece) in enumerate(fields):
        lo = 0 if i == 0 else start
        hi = fields[i + 1][0] if i + 1 < len(fields) else len(data)
        name, _, value = piece.partition(b"=")
        name, value = _form_unquote(name), _form_unquote(value)
        out.segments.append(Segment("form-field", name, normalize(value), (base + lo, base + hi)))


def _extract_json(data: bytes, base: int, out: ExtractedContent) -> None:
    try:
        doc = json.loads(decode(data))
    except ValueError:
        _extract_text_body(data, base, out)
        return
    strings = list(_iter_json_strings(doc))
    if not strings:
        _extract_text_body(data, base, out)
        return
    region = (base, base + len(data))
    for name, s in strings:
        out.segments.append(Segment("json-string", name, normalize(s), region))


def _extract_text_body(data: bytes, base: int, out: ExtractedContent, source="body", name=None) -> None:
    out.segments.append(Segment(source, name, normalize(decode(data)), (base, base + len(data))))


class _MultipartError(ValueError):
    pass


def _split_multipart(data: bytes, boundary: str) -> list[tuple[int, int, bytes, bytes]]:
    """Return ``(region_start, region_end, part_headers, part_body)`` per part."""
    if not boundary or len(boundary) > 200:
        raise _MultipartError("missing or oversized boundary")
    delim = b"--" + boundary.encode("latin-1")
    if data.startswith(delim):
        pos = 0
    else:
        pos = data.find(b"\r\n" + delim)
        if pos < 0:
            raise _MultipartError("opening boundary not found")
        pos += 2
    parts = []
    while True:
        after = pos + len(delim)
        if data[after : after + 2] == b"--":
            break
        eol = data.find(b"\r\n", after)
        if eol < 0 or data[after:eol].strip(b" \t"):
            raise _MultipartError("bad boundary line")
        head_end = data.find(b"\r\n\r\n", eol)
        if head_end == eol:
            head, content_start = b"", eol + 4
        elif head_end < 0:
            raise _MultipartError("part headers not terminated")
        else:
            head, content_start = data[eol + 2 : head_end], head_end + 4
        nxt = data.find(b"\r\n" + delim, content_start)
        if nxt < 0:
            raise _MultipartError("closing boundary missing")
        parts.append((pos, nxt + 2, head, data[content_start:nxt]))
        pos = nxt + 2
    if not parts:
        raise _MultipartError("no parts")
    # preamble joins the first part, closing delimiter and epilogue join the last
    first = parts[0]
    parts[0] = (0, first[1], first[2], first[3])
    last = parts[-1]
    parts[-1] = (last[0], len(data), last[2], last[3])
    return parts


def _extract_multipart(data: bytes, ctype: MediaType, base: int, out: ExtractedContent) -> None:
    try:
        parts = _split_multipart(data, ctype.param("boundary") or "")
    except _MultipartError as exc:
        out.errors.append(f"malformed multipart: {exc}")
        out.raw_opaque.append(Opaque("body", None, data, (base, base + len(data))))
        return
    for lo, hi, head, content in parts:
        headers = Headers()
        for line in head.decode("latin-1").split("\r\n"):
            k, sep, v = line.partition(":")
            if sep:
                headers.add(k.strip(), v.strip())
        disp = MediaType.parse("x/" + (headers.get("Content-Disposition") or ""))
        name = disp.param("name")
        filename = disp.param("filename")
        ptype = MediaType.parse(headers.get("Content-Type") or "text/plain")
        region = (base + lo, base + hi)
        if ptype.type.startswith("multipart/"):
            sub = ExtractedContent()
            _dispatch(content, ptype, 0, sub)
            if sub.errors:
                out.errors.extend(sub.errors)
            out.segments.extend(Segment(s.source, s.name, s.text, region) for s in sub.segments)
            out.raw_opaque.extend(Opaque(o.source, o.name, o.data, region) for o in sub.raw_opaque)
        elif ptype.is_textual:
            label = filename or name
            if ptype.type in ("application/json", "application/x-www-form-urlencoded"):
                sub = ExtractedContent()
                _dispatch(content, ptype, 0, sub)
                out.segments.extend(
                    Segment("multipart-part", label, s.text, region) for s in sub.segments
                )
            else:
                out.segments.append(
                    Segment("multipart-part", label, normalize(decode(content)), region)
                )
        else:
            out.raw_opaque.append(Opaque("multipart-part", filename or name, content, region))


def _dispatch(data: bytes, ctype: MediaType, base: int, out: ExtractedContent) -> None:
    t = ctype.type
    if not data:
        return
    if t == "application/x-www-form-urlencoded":
        _extract_form(data, base, out)
    elif t == "application/json" or t.endswith("+json"):
        _extract_json(data, base, out)
    elif t.startswith("multipart/"):
        _extract_multipart(data, ctype, base, out)
    elif ctype.is_textual:
        _extract_text_body(data, base, out)
    else:
        out.raw_opaque.append(Opaque("body", None, data, (base, base + len(data))))


def extract_text(env: HttpEnvelope) -> ExtractedContent:
    """Pull every inspectable text stream out of ``env``.

    Never raises on malformed payloads: a bad multipart body is demoted to
    ``raw_opaque`` and noted in ``errors``.
    """
    out = ExtractedContent()
    if env.kind == "request" and "?" in env.target:
        query = env.target.split("?", 1)[1]
        for name, value in parse_qsl(query, keep_blank_values=False):
            out.segments.append(Segment("url-query", name, normalize(value)))
    subject = env.headers.get("Subject")
    if subject:
        out.segments.append(Segment("header-subject", "Subject", normalize(subject)))
    if env.decode_failed:
        if env.body:
            out.raw_opaque.append(Opaque("body", None, env.body, (0, len(env.body))))
        return out
    _dispatch(env.body, env.content_type, 0, out)
    return out


def extract_plain(data: bytes, source: str = "body", name: str | None = None) -> ExtractedContent:
    """Treat ``data`` as UTF-8 text (used for decrypted or decompressed payloads)."""
    out = ExtractedContent()
    if data:
        _extract_text_body(data, 0, out, source, name)
    return out


# -------------------------------------------------------------------- opacity


def shannon_entropy(data: bytes) -> float:
    """Byte-level Shannon entropy in bits per byte."""
    if not data:
        raise EmptyInput("entropy of empty input")
    counts = _kernels.byte_histogram(data)
    n = float(len(data))
    h = 0.0
    for c in counts[counts > 0]:
        p = c / n
        h -= p * math.log2(p)
    return min(max(h, 0.0), 8.0)


@dataclass(frozen=True)
class OpacityVerdict:
    klass: str  # plaintext | compressed | encrypted_or_unknown
    entropy_bits_per_byte: float
    magic: str | None = None


_ZLIB_FLG = re.compile(rb"\x78[\x01\x5e\x9c\xda]")


def sniff_magic(data: bytes) -> str | None:
    if data[:2] == b"\x1f\x8b":
        return "gzip"
    if data[:4] in (b"PK\x03\x04", b"PK\x05\x06", b"PK\x07\x08"):
        return "zip"
    if len(data) >= 2 and _ZLIB_FLG.match(data[:2]) and (data[0] * 256 + data[1]) % 31 == 0:
        return "zlib"
    return None


def classify_opacity(
    data: bytes, threshold: float = ENTROPY_THRESHOLD, min_length: int = ENTROPY_MIN_LENGTH
) -> OpacityVerdict:
    """Triage a payload as plaintext, compressed, or encrypted/unknown."""
    from .crypto import is_envelope

    h = shannon_entropy(data)
    magic = sniff_magic(data)
    if magic:
        return OpacityVerdict("compressed", h, magic)
    if is_envelope(data):
        return OpacityVerdict("encrypted_or_unknown", h, "dlp1")
    if h >= threshold and len(data) >= min_length:
        return OpacityVerdict("encrypted_or_unknown", h)
    return OpacityVerdict("plaintext", h)
