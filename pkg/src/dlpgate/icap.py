"""ICAP/1.0 (RFC 3507) message model, parser and serializer.

Parsing works over any binary stream exposing ``readline``/``read`` (a socket
file, ``io.BytesIO``) and consumes exactly one message, leaving pipelined
bytes in the stream. Encapsulated HTTP header sections are kept as raw bytes;
the body is returned de-chunked.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator

CRLF = b"\r\n"
ICAP_VERSION = "ICAP/1.0"
DEFAULT_PORT = 1344
DEFAULT_MAX_MESSAGE = 64 * 1024 * 1024
MAX_LINE = 64 * 1024

METHODS = ("OPTIONS", "REQMOD", "RESPMOD")
HEADER_TAGS = ("req-hdr", "res-hdr")
BODY_TAGS = ("req-body", "res-body", "null-body", "opt-body")

REASONS = {
    100: "Continue",
    200: "OK",
    204: "No Content",
    400: "Bad Request",
    404: "ICAP Service Not Found",
    405: "Method Not Allowed For Service",
    500: "Server Error",
    505: "ICAP Version Not Supported",
}


class IcapError(Exception):
    """Base class for protocol errors; ``status`` is the ICAP code to answer with."""

    status = 400


class MalformedStartLine(IcapError):
    pass


class MalformedHeader(IcapError):
    pass


class UnknownMethod(IcapError):
    status = 405


class UnsupportedVersion(IcapError):
    status = 505


class BadEncapsulated(IcapError):
    pass


class ChunkFramingError(IcapError):
    pass


class MessageTooLarge(IcapError):
    status = 500


class InvariantViolation(ValueError):
    """A message value that cannot be serialized consistently."""


class Headers:
    """Ordered multimap with case-insensitive lookup; original casing is kept."""

    __slots__ = ("_items",)

    def __init__(self, items: Iterable[tuple[str, str]] = ()) -> None:
        self._items: list[tuple[str, str]] = [(str(k), str(v)) for k, v in items]

    def get(self, name: str, default: str | None = None) -> str | None:
        lname = name.lower()
        for k, v in self._items:
            if k.lower() == lname:
                return v
        return default

    def get_all(self, name: str) -> list[str]:
        lname = name.lower()
        return [v for k, v in self._items if k.lower() == lname]

    def add(self, name: str, value: str) -> None:
        self._items.append((name, value))

    def set(self, name: str, value: str) -> None:
        """Replace every occurrence of ``name`` with one entry at the first position."""
        lname = name.lower()
        out: list[tuple[str, str]] = []
        placed = False
        for k, v in self._items:
            if k.lower() == lname:
                if not placed:
                    out.append((k, value))
                    placed = True
            else:
                out.append((k, v))
        if not placed:
            out.append((name, value))
        self._items = out

    def remove(self, name: str) -> None:
        lname = name.lower()
        self._items = [(k, v) for k, v in self._items if k.lower() != lname]

    def copy(self) -> Headers:
        return Headers(self._items)

    def __contains__(self, name: object) -> bool:
        return isinstance(name, str) and self.get(name) is not None

    def __iter__(self) -> Iterator[tuple[str, str]]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Headers):
            return NotImplemented
        return self._items == other._items

    def __repr__(self) -> str:
        return f"Headers({self._items!r})"

    def to_bytes(self) -> bytes:
        return b"".join(f"{k}: {v}".encode("latin-1") + CRLF for k, v in self._items)


@dataclass(frozen=True)
class EncapsulatedLayout:
    entries: tuple[tuple[str, int], ...] = ()

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.entries:
            return
        prev = -1
        for i, (tag, off) in enumerate(self.entries):
            if tag not in HEADER_TAGS and tag not in BODY_TAGS:
                raise BadEncapsulated(f"unknown section tag {tag!r}")
            if off < 0 or off <= prev:
                raise BadEncapsulated("Encapsulated offsets must be strictly increasing")
            if tag in BODY_TAGS and i != len(self.entries) - 1:
                raise BadEncapsulated("body tag must be the last Encapsulated entry")
            prev = off
        if self.entries[0][1] != 0:
            raise BadEncapsulated("first Encapsulated offset must be 0")
        if self.entries[-1][0] not in BODY_TAGS:
            raise BadEncapsulated("Encapsulated header lacks a body tag")

    @property
    def body_tag(self) -> str | None:
        return self.entries[-1][0] if self.entries else None

    @property
    def has_body(self) -> bool:
        return self.body_tag in ("req-body", "res-body", "opt-body")

    def header_sections(self) -> list[tuple[str, int]]:
        """(tag, length) for each header section, from consecutive offsets."""
        out = []
        for (tag, off), (_, nxt) in zip(self.entries, self.entries[1:]):
            out.append((tag, nxt - off))
        return out

    @classmethod
    def parse(cls, value: str) -> EncapsulatedLayout:
        entries = []
        for part in value.split(","):
            part = part.strip()
            if not part:
                continue
            tag, sep, off = part.partition("=")
            if not sep:
                raise BadEncapsulated(f"bad Encapsulated entry {part!r}")
            try:
                offset = int(off.strip(), 10)
            except ValueError:
                raise BadEncapsulated(f"bad Encapsulated offset {off!r}") from None
            entries.append((tag.strip().lower(), offset))
        if not entries:
            raise BadEncapsulated("empty Encapsulated header")
        return cls(tuple(entries))

    def format(self) -> str:
        return ", ".join(f"{tag}={off}" for tag, off in self.entries)


def compute_encapsulated(
    sections: Iterable[tuple[str, int]], body_tag: str | None = None
) -> EncapsulatedLayout:
    """Build the Encapsulated layout from ordered ``(tag, byte_length)`` sections.

    A body section may appear last in ``sections`` (its length is irrelevant)
    or be given as ``body_tag``; with neither, ``null-body`` is appended.
    """
    entries: list[tuple[str, int]] = []
    offset = 0
    body: str | None = None
    for tag, length in sections:
        if body is not None:
            raise InvariantViolation("body section must be last and unique")
        if tag in BODY_TAGS:
            body = tag
            continue
        if tag not in HEADER_TAGS:
            raise InvariantViolation(f"unknown section tag {tag!r}")
        entries.append((tag, offset))
        offset += length
    if body is not None and body_tag is not None:
        raise InvariantViolation("two body sections")
    entries.append((body or body_tag or "null-body", offset))
    return EncapsulatedLayout(tuple(entries))


@dataclass
class IcapRequest:
    method: str
    uri: str
    version: str = ICAP_VERSION
    headers: Headers = field(default_factory=Headers)
    encapsulated: EncapsulatedLayout = field(
        default_factory=lambda: EncapsulatedLayout((("null-body", 0),))
    )
    sections: dict[str, bytes] = field(default_factory=dict)
    body: bytes = b""
    preview_size: int | None = None
    preview_ieof: bool = False

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise UnknownMethod(self.method)
        if self.preview_ieof and self.preview_size is None:
            raise InvariantViolation("ieof without Preview")

    @property
    def service(self) -> str:
        """Path component of the ICAP URI, e.g. ``/reqmod``."""
        rest = self.uri.split("://", 1)[-1]
        slash = rest.find("/")
        path = rest[slash:] if slash >= 0 else "/"
        return path.split("?", 1)[0]

    @property
    def allows_204(self) -> bool:
        allow = self.headers.get("Allow") or ""
        return "204" in [a.strip() for a in allow.split(",")]

    @property
    def preview_complete(self) -> bool:
        """True when the whole body is in hand (no preview, or preview with ieof)."""
        return self.preview_size is None or self.preview_ieof or not self.encapsulated.has_body


@dataclass
class IcapResponse:
    status: int
    reason: str = ""
    version: str = ICAP_VERSION
    headers: Headers = field(default_factory=Headers)
    encapsulated: EncapsulatedLayout = field(default_factory=EncapsulatedLayout)
    sections: dict[str, bytes] = field(default_factory=dict)
    body: bytes = b""

    def __post_init__(self) -> None:
        if not self.reason:
            self.reason = REASONS.get(self.status, "Unknown")

    @classmethod
    def build(
        cls,
        status: int,
        headers: Iterable[tuple[str, str]] = (),
        sections: Iterable[tuple[str, bytes]] = (),
        body_tag: str | None = None,
        body: bytes = b"",
    ) -> IcapResponse:
        """Assemble a response whose layout is computed from the given sections."""
        sections = list(sections)
        if status == 100:
            layout = EncapsulatedLayout()
        else:
            layout = compute_encapsulated([(t, len(b)) for t, b in sections], body_tag)
        return cls(
            status=status,
            headers=Headers(headers),
            encapsulated=layout,
            sections=dict(sections),
            body=body,
        )


# ------------------------------------------------------------------ chunking


def encode_chunked(body: bytes, *, ieof: bool = False, chunk_size: int = 0) -> bytes:
    """Chunk-frame ``body``; ``chunk_size`` 0 means a single chunk."""
    out = bytearray()
    step = chunk_size or max(len(body), 1)
    for i in range(0, len(body), step):
        piece = body[i : i + step]
        out += b"%x\r\n" % len(piece) + piece + CRLF
    out += b"0; ieof\r\n\r\n" if ieof else b"0\r\n\r\n"
    return bytes(out)


class _Limited:
    """Stream wrapper enforcing a total byte budget."""

    def __init__(self, stream: BinaryIO, limit: int) -> None:
        self.stream = stream
        self.remaining = limit

    def _charge(self, n: int) -> None:
        self.remaining -= n
        if self.remaining < 0:
            raise MessageTooLarge("ICAP message exceeds configured limit")

    def readline(self) -> bytes:
        line = self.stream.readline(MAX_LINE + 1)
        if len(line) > MAX_LINE:
            raise MalformedHeader("line too long")
        self._charge(len(line))
        return line

    def read(self, n: int) -> bytes:
        self._charge(n)
        data = self.stream.read(n)
        return data


def _wrap(raw: bytes | BinaryIO, limit: int) -> _Limited:
    if isinstance(raw, (bytes, bytearray, memoryview)):
        raw = io.BytesIO(bytes(raw))
    return _Limited(raw, limit)


def _read_exact(reader: _Limited, n: int, what: str) -> bytes:
    data = reader.read(n)
    if len(data) != n:
        raise ChunkFramingError(f"truncated {what}: wanted {n} bytes, got {len(data)}")
    return data


def _decode_chunked(reader: _Limited) -> tuple[bytes, bool]:
    out = bytearray()
    while True:
        line = reader.readline()
        if not line:
            raise ChunkFramingError("truncated chunk stream")
        if not line.endswith(CRLF):
            raise ChunkFramingError("chunk-size line lacks CRLF")
        size_text, _, ext = line[:-2].partition(b";")
        size_text = size_text.strip()
        try:
            if not size_text or not all(c in b"0123456789abcdefABCDEF" for c in size_text):
                raise ValueError
            size = int(size_text, 16)
        except ValueError:
            raise ChunkFramingError(f"bad chunk size {size_text!r}") from None
        if size == 0:
            exts = [e.strip().lower() for e in ext.split(b";")]
            if reader.readline() != CRLF:
                raise ChunkFramingError("missing final CRLF after last chunk")
            return bytes(out), b"ieof" in exts
        out += _read_exact(reader, size, "chunk")
        if _read_exact(reader, 2, "chunk terminator") != CRLF:
            raise ChunkFramingError("chunk data not followed by CRLF")


def decode_chunked(
    raw: bytes | BinaryIO, *, max_size: int = DEFAULT_MAX_MESSAGE
) -> tuple[bytes, bool]:
    """Decode one chunked body; returns ``(payload, ieof)``."""
    return _decode_chunked(_wrap(raw, max_size))


# ------------------------------------------------------------------- parsing


def _read_header_block(reader: _Limited) -> tuple[str, Headers]:
    start = reader.readline()
    if not start:
        raise EOFError("connection closed")
    if not start.endswith(CRLF):
        raise MalformedStartLine(f"start line lacks CRLF: {start[:80]!r}")
    headers = Headers()
    while True:
        line = reader.readline()
        if not line:
            raise MalformedHeader("truncated header block")
        if line == CRLF:
            break
        if not line.endswith(CRLF):
            raise MalformedHeader("header line lacks CRLF")
        text = line[:-2].decode("latin-1")
        if text[:1] in (" ", "\t") and len(headers):
            # obsolete line folding
            items = list(headers)
            k, v = items[-1]
            headers = Headers(items[:-1] + [(k, v + " " + text.strip())])
            continue
        name, sep, value = text.partition(":")
        if not sep or not name or name != name.strip():
            raise MalformedHeader(f"bad header line {text[:80]!r}")
        headers.add(name, value.strip())
    return start[:-2].decode("latin-1"), headers


def _check_version(version: str) -> None:
    if not version.startswith("ICAP/"):
        raise MalformedStartLine(f"bad protocol version {version!r}")
    if version != ICAP_VERSION:
        raise UnsupportedVersion(version)


def _read_sections(
    reader: _Limited, layout: EncapsulatedLayout
) -> tuple[dict[str, bytes], bytes, bool]:
    sections = {}
    for tag, length in layout.header_sections():
        sections[tag] = _read_exact(reader, length, tag)
    body, ieof = b"", False
    if layout.has_body:
        body, ieof = _decode_chunked(reader)
    return sections, body, ieof


def _take_encapsulated(headers: Headers, required: bool) -> EncapsulatedLayout:
    values = headers.get_all("Encapsulated")
    headers.remove("Encapsulated")
    if not values:
        if required:
            raise BadEncapsulated("missing Encapsulated header")
        return EncapsulatedLayout()
    if len(values) > 1:
        raise BadEncapsulated("duplicate Encapsulated header")
    return EncapsulatedLayout.parse(values[0])


def parse_icap_request(
    raw: bytes | BinaryIO, *, max_size: int = DEFAULT_MAX_MESSAGE
) -> IcapRequest:
    """Parse one ICAP request, consuming exactly its bytes from ``raw``.

    With a ``Preview`` header only the preview part of the body is read; the
    remainder (after a ``100 Continue``) is fetched with :func:`decode_chunked`.
    Raises ``EOFError`` when the stream is already at EOF.
    """
    reader = _wrap(raw, max_size)
    start, headers = _read_header_block(reader)
    parts = start.split(" ")
    if len(parts) != 3 or not all(parts):
        raise MalformedStartLine(f"bad request line {start[:80]!r}")
    method, uri, version = parts
    if method not in METHODS:
        raise UnknownMethod(method)
    _check_version(version)
    layout = _take_encapsulated(headers, required=method != "OPTIONS")
    if not layout.entries:
        layout = EncapsulatedLayout((("null-body", 0),))
    preview = None
    pv = headers.get_all("Preview")
    headers.remove("Preview")
    if pv:
        try:
            preview = int(pv[0].strip(), 10)
        except ValueError:
            raise MalformedHeader(f"bad Preview value {pv[0]!r}") from None
        if preview < 0:
            raise MalformedHeader("negative Preview")
    try:
        sections, body, ieof = _read_sections(reader, layout)
    except IcapError as exc:
        # keep what was parsed so the caller can still fail closed on it
        exc.request = IcapRequest(  # type: ignore[attr-defined]
            method=method, uri=uri, version=version, headers=headers, encapsulated=layout,
            preview_size=preview,
        )
        raise
    if ieof and preview is None:
        raise ChunkFramingError("ieof extension outside a preview")
    if preview is not None and len(body) > preview:
        raise ChunkFramingError("preview body exceeds announced Preview size")
    return IcapRequest(
        method=method,
        uri=uri,
        version=version,
        headers=headers,
        encapsulated=layout,
        sections=sections,
        body=body,
        preview_size=preview,
        preview_ieof=ieof,
    )


def parse_icap_response(
    raw: bytes | BinaryIO, *, max_size: int = DEFAULT_MAX_MESSAGE
) -> IcapResponse:
    reader = _wrap(raw, max_size)
    start, headers = _read_header_block(reader)
    version, _, rest = start.partition(" ")
    code, _, reason = rest.partition(" ")
    _check_version(version)
    try:
        status = int(code)
    except ValueError:
        raise MalformedStartLine(f"bad status line {start[:80]!r}") from None
    layout = _take_encapsulated(headers, required=False)
    sections, body, _ = _read_sections(reader, layout)
    return IcapResponse(
        status=status,
        reason=reason,
        version=version,
        headers=headers,
        encapsulated=layout,
        sections=sections,
        body=body,
    )


# --------------------------------------------------------------- serializing


def _layout_for(
    layout: EncapsulatedLayout, sections: dict[str, bytes], body: bytes
) -> EncapsulatedLayout:
    if not layout.entries:
        if sections or body:
            raise InvariantViolation("sections present but no Encapsulated layout")
        return layout
    if set(sections) != {t for t, _ in layout.entries[:-1]}:
        raise InvariantViolation("layout tags disagree with sections")
    order = [t for t, _ in layout.entries[:-1]]
    computed = compute_encapsulated([(t, len(sections[t])) for t in order], layout.body_tag)
    if computed != layout:
        raise InvariantViolation(
            f"layout {layout.format()} disagrees with section lengths {computed.format()}"
        )
    if body and not layout.has_body:
        raise InvariantViolation("body bytes with a null-body layout")
    return computed


def _emit_sections(layout: EncapsulatedLayout, sections: dict[str, bytes]) -> bytes:
    return b"".join(sections[t] for t, _ in layout.entries[:-1])


def serialize_icap_response(resp: IcapResponse) -> bytes:
    if resp.status == 204 and (resp.body or resp.encapsulated.has_body):
        raise InvariantViolation("204 response cannot carry a body")
    layout = _layout_for(resp.encapsulated, resp.sections, resp.body)
    out = bytearray(f"{resp.version} {resp.status} {resp.reason}".encode("latin-1") + CRLF)
    out += resp.headers.to_bytes()
    if layout.entries:
        out += f"Encapsulated: {layout.format()}".encode("latin-1") + CRLF
    out += CRLF
    if layout.entries:
        out += _emit_sections(layout, resp.sections)
        if layout.has_body:
            out += encode_chunked(resp.body)
    return bytes(out)


def serialize_icap_request(req: IcapRequest, *, chunk_size: int = 0) -> bytes:
    """Serialize ``req``; with ``preview_size`` set, ``body`` is the preview part."""
    layout = _layout_for(req.encapsulated, req.sections, req.body)
    if req.preview_size is not None and len(req.body) > req.preview_size:
        raise InvariantViolation("preview body longer than preview_size")
    out = bytearray(f"{req.method} {req.uri} {req.version}".encode("latin-1") + CRLF)
    out += req.headers.to_bytes()
    if req.preview_size is not None:
        out += f"Preview: {req.preview_size}".encode() + CRLF
    out += f"Encapsulated: {layout.format()}".encode("latin-1") + CRLF
    out += CRLF
    out += _emit_sections(layout, req.sections)
    if layout.has_body:
        out += encode_chunked(req.body, ieof=req.preview_ieof, chunk_size=chunk_size)
    return bytes(out)


def error_response(status: int, message: str = "") -> IcapResponse:
    headers = [("Connection", "close")]
    if message:
        headers.append(("X-Error", message.replace("\r", " ").replace("\n", " ")[:200]))
    return IcapResponse.build(status, headers=headers)
