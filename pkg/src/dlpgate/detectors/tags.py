"""Exact-match data tags chosen by content owners."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

from .. import _kernels
from ..envelope import ExtractedContent
from ..text import normalize
from .base import Detection

DEFAULT_CHUNK_LEN = 256


class TagCollision(ValueError):
    def __init__(self, existing: str, new: str) -> None:
        super().__init__(f"hash already tagged {existing!r}; refusing to retag as {new!r}")
        self.existing = existing
        self.new = new


def text_hash(text: str) -> int:
    """FNV-1a 64 of the UTF-8 bytes of ``text``."""
    return int(_kernels.kgram_hashes(text, len(text))[0])


def _chunks(text: str, chunk_len: int):
    """Whole-text hash plus every full, aligned chunk."""
    yield 0, len(text), text_hash(text)
    if len(text) > chunk_len:
        for start in range(0, len(text) - chunk_len + 1, chunk_len):
            yield start, start + chunk_len, text_hash(text[start : start + chunk_len])


@dataclass(frozen=True)
class TagRegistry:
    name: str = "default"
    chunk_len: int = DEFAULT_CHUNK_LEN
    entries: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))

    def tags(self) -> set[str]:
        return set(self.entries.values())

    def to_json(self) -> str:
        doc = {
            "name": self.name,
            "chunk_len": self.chunk_len,
            "entries": {f"{h:016x}": t for h, t in sorted(self.entries.items())},
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> TagRegistry:
        doc = json.loads(text)
        return cls(
            name=doc.get("name", "default"),
            chunk_len=int(doc["chunk_len"]),
            entries={int(h, 16): t for h, t in doc["entries"].items()},
        )

    def save(self, path: str | os.PathLike[str]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> TagRegistry:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def register_tag(reg: TagRegistry, text: bytes | str, tag: str) -> TagRegistry:
    """Return a new registry that also maps ``text`` (and its chunks) to ``tag``."""
    if not tag:
        raise ValueError("tag name must be non-empty")
    if isinstance(text, bytes):
        text = text.decode("utf-8", "replace")
    norm = normalize(text)
    if not norm:
        raise ValueError("cannot tag empty text")
    entries = dict(reg.entries)
    for _, _, h in _chunks(norm, reg.chunk_len):
        existing = entries.get(h)
        if existing is not None and existing != tag:
            raise TagCollision(existing, tag)
        entries[h] = tag
    return TagRegistry(name=reg.name, chunk_len=reg.chunk_len, entries=entries)


def tag_scan(reg: TagRegistry, content: ExtractedContent) -> list[Detection]:
    out = []
    for i, seg in enumerate(content.segments):
        if not seg.text:
            continue
        seen = set()
        for start, end, h in _chunks(seg.text, reg.chunk_len):
            tag = reg.entries.get(h)
            if tag is not None and (tag, start, end) not in seen:
                seen.add((tag, start, end))
                out.append(Detection("tag", reg.name, tag, (i, start, end), seg.text[start:end], 1.0))
    return out
