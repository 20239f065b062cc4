from __future__ import annotations

from dataclasses import dataclass

DETECTOR_KINDS = ("keyword", "regex", "fingerprint", "tag", "classifier")
SNIPPET_MAX = 64


@dataclass(frozen=True)
class Detection:
    """One detector hit.

    ``span`` is ``(segment_index, start, end)`` in normalized-text offsets, or
    ``None`` for whole-message detections (classifier, fingerprint).
    """

    detector: str
    resource: str
    rule_id: str
    span: tuple[int, int, int] | None
    snippet: str
    confidence: float

    def __post_init__(self) -> None:
        if self.detector not in DETECTOR_KINDS:
            raise ValueError(f"unknown detector kind {self.detector!r}")
        if self.span is not None and not self.span[1] < self.span[2]:
            raise ValueError("empty detection span")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence outside [0, 1]")
        if len(self.snippet) > SNIPPET_MAX:
            object.__setattr__(self, "snippet", self.snippet[:SNIPPET_MAX])
