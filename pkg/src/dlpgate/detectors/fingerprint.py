"""Winnowing document fingerprints.

Each normalized k-gram is hashed with FNV-1a 64; from every window of ``w``
consecutive hashes the minimum (rightmost on ties) is kept. Any shared
substring of at least ``w + k - 1`` characters therefore shares at least one
fingerprint.
"""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .. import _kernels
from ..envelope import ExtractedContent
from ..text import normalize
from .base import Detection

DEFAULT_K = 8
DEFAULT_W = 4
DEFAULT_THRESHOLD = 0.3
FORMAT_VERSION = 1


class DocTooShort(ValueError):
    def __init__(self, doc_id: str, length: int, k: int) -> None:
        super().__init__(f"document {doc_id!r} has {length} normalized chars, fewer than k={k}")
        self.doc_id = doc_id


def winnow_text(text: str, k: int, w: int) -> list[tuple[int, int]]:
    """Fingerprints of already-normalized ``text`` as ``(hash, position)`` pairs."""
    if len(text) < k:
        return []
    hashes = _kernels.kgram_hashes(text, k)
    picks = _kernels.winnow(hashes, w)
    return [(int(hashes[p]), int(p)) for p in picks]


@dataclass(frozen=True)
class FingerprintIndex:
    k: int
    w: int
    name: str = "default"
    docs: Mapping[str, tuple[tuple[int, int], ...]] = field(default_factory=dict)
    postings: Mapping[int, frozenset[tuple[str, int]]] = field(default_factory=dict, compare=False)

    @property
    def doc_sizes(self) -> dict[str, int]:
        return {d: len(fps) for d, fps in self.docs.items()}

    @property
    def fingerprint_count(self) -> int:
        return sum(len(fps) for fps in self.docs.values())

    def to_json(self) -> str:
        doc = {
            "format": FORMAT_VERSION,
            "name": self.name,
            "k": self.k,
            "w": self.w,
            "docs": {
                d: [[f"{h:016x}", p] for h, p in fps] for d, fps in sorted(self.docs.items())
            },
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> FingerprintIndex:
        doc = json.loads(text)
        docs = {d: tuple((int(h, 16), int(p)) for h, p in fps) for d, fps in doc["docs"].items()}
        return _assemble(doc.get("name", "default"), int(doc["k"]), int(doc["w"]), docs)

    def save(self, path: str | os.PathLike[str]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> FingerprintIndex:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _assemble(name: str, k: int, w: int, docs: dict[str, tuple[tuple[int, int], ...]]) -> FingerprintIndex:
    postings: dict[int, set[tuple[str, int]]] = defaultdict(set)
    for d, fps in docs.items():
        for h, p in fps:
            postings[h].add((d, p))
    return FingerprintIndex(
        k=k,
        w=w,
        name=name,
        docs=dict(sorted(docs.items())),
        postings={h: frozenset(s) for h, s in postings.items()},
    )


def build_fingerprint_index(
    docs: Iterable[tuple[str, str]], k: int = DEFAULT_K, w: int = DEFAULT_W, name: str = "default"
) -> FingerprintIndex:
    if k < 2 or w < 1:
        raise ValueError("need k >= 2 and w >= 1")
    out: dict[str, tuple[tuple[int, int], ...]] = {}
    for doc_id, text in docs:
        norm = normalize(text)
        if len(norm) < k:
            raise DocTooShort(doc_id, len(norm), k)
        out[doc_id] = tuple(winnow_text(norm, k, w))
    return _assemble(name, k, w, out)


def overlaps(idx: FingerprintIndex, texts: Iterable[str]) -> dict[str, float]:
    """Fraction of each registered doc's fingerprints found in ``texts``."""
    seen: set[int] = set()
    for text in texts:
        seen.update(h for h, _ in winnow_text(text, idx.k, idx.w))
    matched: dict[str, int] = defaultdict(int)
    for h in seen:
        for d, _ in idx.postings.get(h, ()):
            matched[d] += 1
    sizes = idx.doc_sizes
    return {d: n / sizes[d] for d, n in matched.items() if sizes[d]}


def fingerprint_scan(
    idx: FingerprintIndex, content: ExtractedContent, threshold: float = DEFAULT_THRESHOLD
) -> list[Detection]:
    scores = overlaps(idx, content.texts)
    return [
        Detection("fingerprint", idx.name, d, None, d, min(score, 1.0))
        for d, score in sorted(scores.items())
        if score >= threshold
    ]

