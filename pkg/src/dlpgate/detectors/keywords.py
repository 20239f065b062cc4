"""Keyword (Aho-Corasick) and regular-expression scanning."""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

try:  # Python >= 3.11
    from re import _parser as sre_parse  # type: ignore[attr-defined]
except ImportError:  # pragma: no cover
    import sre_parse  # type: ignore[no-redef]

from ..envelope import ExtractedContent
from ..text import normalize
from .base import Detection


class BadPattern(ValueError):
    def __init__(self, rule_id: str, message: str, position: int | None = None) -> None:
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"pattern {rule_id!r}: {message}{where}")
        self.rule_id = rule_id
        self.position = position


class AhoCorasick:
    """Character-level automaton reporting every (possibly overlapping) match."""

    def __init__(self, patterns: Iterable[tuple[str, str]]) -> None:
        self._goto: list[dict[str, int]] = [{}]
        self._fail: list[int] = [0]
        self._out: list[list[tuple[str, int]]] = [[]]
        for rule_id, pat in patterns:
            node = 0
            for ch in pat:
                nxt = self._goto[node].get(ch)
                if nxt is None:
                    nxt = len(self._goto)
                    self._goto[node][ch] = nxt
                    self._goto.append({})
                    self._fail.append(0)
                    self._out.append([])
                node = nxt
            self._out[node].append((rule_id, len(pat)))
        self._build()

    def _build(self) -> None:
        queue = deque(self._goto[0].values())
        while queue:
            node = queue.popleft()
            for ch, child in self._goto[node].items():
                queue.append(child)
                f = self._fail[node]
                while f and ch not in self._goto[f]:
                    f = self._fail[f]
                target = self._goto[f].get(ch, 0)
                self._fail[child] = target if target != child else 0
                self._out[child] = self._out[child] + self._out[self._fail[child]]

    def iter_matches(self, text: str):
        """Yield ``(rule_id, start, end)`` for every occurrence."""
        goto, fail, out = self._goto, self._fail, self._out
        node = 0
        for i, ch in enumerate(text):
            while node and ch not in goto[node]:
                node = fail[node]
            node = goto[node].get(ch, 0)
            for rule_id, length in out[node]:
                yield rule_id, i + 1 - length, i + 1


_REF_RE = re.compile(r"\\[1-9]|\(\?P=|\(\?\(")


def _unbounded(op, av) -> bool:
    return op in (sre_parse.MAX_REPEAT, sre_parse.MIN_REPEAT) and av[1] == sre_parse.MAXREPEAT


def _check_safe(rule_id: str, pattern: str) -> None:
    """Reject backreferences, conditionals and nested unbounded repeats."""
    try:
        tree = sre_parse.parse(pattern)
    except re.error as exc:
        raise BadPattern(rule_id, exc.msg, exc.pos) from None

    def pos() -> int | None:
        m = _REF_RE.search(pattern)
        return m.start() if m else None

    def walk(items, inside_unbounded: bool) -> None:
        for op, av in items:
            if op in (sre_parse.GROUPREF, sre_parse.GROUPREF_EXISTS):
                raise BadPattern(rule_id, "backreferences are not supported", pos())
            if op in (sre_parse.MAX_REPEAT, sre_parse.MIN_REPEAT):
                unb = _unbounded(op, av)
                if unb and inside_unbounded:
                    raise BadPattern(rule_id, "nested unbounded repetition")
                walk(av[2], inside_unbounded or unb)
            elif op == sre_parse.SUBPATTERN:
                walk(av[-1], inside_unbounded)
            elif op == sre_parse.BRANCH:
                for alt in av[1]:
                    walk(alt, inside_unbounded)
            elif op in (sre_parse.ASSERT, sre_parse.ASSERT_NOT):
                walk(av[1], inside_unbounded)

    walk(tree, False)


@dataclass(frozen=True)
class CompiledMatcher:
    name: str
    literal_patterns: tuple[tuple[str, str], ...]
    regex_patterns: tuple[tuple[str, str], ...]
    _automaton: AhoCorasick = field(repr=False, compare=False, default=None)  # type: ignore[assignment]
    _regexes: tuple[tuple[str, re.Pattern[str]], ...] = field(repr=False, compare=False, default=())


def _pairs(items) -> list[tuple[str, str]]:
    out = []
    if isinstance(items, dict):
        items = list(items.items())
    for item in items or ():
        if isinstance(item, str):
            out.append((item, item))
        elif isinstance(item, dict):
            out.append((str(item["id"]), str(item["pattern"])))
        else:
            rid, pat = item
            out.append((str(rid), str(pat)))
    return out


def compile_ruleset(keywords=(), regexes=(), name: str = "default") -> CompiledMatcher:
    """Compile literals into one automaton and validate every regex.

    ``keywords`` / ``regexes`` accept plain strings (id = pattern), ``(id,
    pattern)`` pairs, ``{"id", "pattern"}`` dicts, or an id->pattern mapping.
    """
    literals = []
    for rid, lit in _pairs(keywords):
        norm = normalize(lit)
        if not norm:
            raise BadPattern(rid, "empty keyword", 0)
        literals.append((rid, norm))
    compiled = []
    for rid, pat in _pairs(regexes):
        _check_safe(rid, pat)
        try:
            compiled.append((rid, re.compile(pat, re.IGNORECASE)))
        except re.error as exc:  # pragma: no cover - sre_parse catches these first
            raise BadPattern(rid, exc.msg, exc.pos) from None
    return CompiledMatcher(
        name=name,
        literal_patterns=tuple(literals),
        regex_patterns=tuple((rid, p.pattern) for rid, p in compiled),
        _automaton=AhoCorasick(literals),
        _regexes=tuple(compiled),
    )


def scan_text(m: CompiledMatcher, text: str, segment: int = 0) -> list[Detection]:
    hits = []
    for rid, start, end in m._automaton.iter_matches(text):
        hits.append(Detection("keyword", m.name, rid, (segment, start, end), text[start:end], 1.0))
    for rid, rx in m._regexes:
        for match in rx.finditer(text):
            if match.end() > match.start():
                hits.append(
                    Detection("regex", m.name, rid, (segment, *match.span()), match.group(), 1.0)
                )
    return hits


def scan_keywords(m: CompiledMatcher, content: ExtractedContent) -> list[Detection]:
    out: list[Detection] = []
    for i, seg in enumerate(content.segments):
        out.extend(scan_text(m, seg.text, i))
    return out
