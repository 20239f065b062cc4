"""Canonical text form shared by every detector."""

from __future__ import annotations

import re

_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Lowercase and collapse whitespace runs to single spaces (ends stripped)."""
    return _WS.sub(" ", text.lower()).strip()


def decode(data: bytes) -> str:
    return data.decode("utf-8", "replace")


def normalize_bytes(data: bytes) -> str:
    return normalize(decode(data))
