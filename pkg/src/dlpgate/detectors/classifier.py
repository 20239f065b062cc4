"""Multinomial naive Bayes over whitespace tokens of normalized text."""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping

from ..envelope import ExtractedContent
from ..text import normalize
from .base import Detection

SENSITIVE = "sensitive"
PUBLIC = "public"
CLASSES = (SENSITIVE, PUBLIC)
DEFAULT_ALPHA = 1.0
DEFAULT_THRESHOLD = 0.8


class EmptyCorpus(ValueError):
    pass


class MissingClass(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return normalize(text).split()


@dataclass(frozen=True)
class NBModel:
    name: str
    alpha: float
    log_prior: Mapping[str, float]
    log_likelihood: Mapping[str, Mapping[str, float]]
    token_totals: Mapping[str, int]
    doc_counts: Mapping[str, int]

    @property
    def vocabulary(self) -> frozenset[str]:
        return frozenset(self.log_likelihood[SENSITIVE])

    def unseen_log_likelihood(self, cls: str) -> float:
        v = len(self.log_likelihood[cls])
        return math.log(self.alpha / (self.token_totals[cls] + self.alpha * v))

    def log_joint(self, tokens: Iterable[str]) -> dict[str, float]:
        counts = Counter(tokens)
        out = {}
        for c in CLASSES:
            table = self.log_likelihood[c]
            unseen = self.unseen_log_likelihood(c)
            out[c] = self.log_prior[c] + sum(n * table.get(t, unseen) for t, n in counts.items())
        return out

    def posteriors(self, text: str) -> dict[str, float]:
        joint = self.log_joint(tokenize(text))
        top = max(joint.values())
        z = top + math.log(sum(math.exp(v - top) for v in joint.values()))
        return {c: math.exp(v - z) for c, v in joint.items()}

    def to_json(self) -> str:
        """Deterministic model document; reals as 17-significant-digit text."""

        def real(x: float) -> str:
            return format(x, ".17g")

        doc = {
            "name": self.name,
            "alpha": real(self.alpha),
            "classes": list(CLASSES),
            "doc_counts": dict(self.doc_counts),
            "token_totals": dict(self.token_totals),
            "log_prior": {c: real(self.log_prior[c]) for c in CLASSES},
            "vocabulary": sorted(self.vocabulary),
            "log_likelihood": {
                c: {t: real(v) for t, v in sorted(self.log_likelihood[c].items())} for c in CLASSES
            },
        }
        return json.dumps(doc, sort_keys=True, indent=1, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> NBModel:
        doc = json.loads(text)
        return cls(
            name=doc.get("name", "default"),
            alpha=float(doc["alpha"]),
            log_prior={c: float(v) for c, v in doc["log_prior"].items()},
            log_likelihood={
                c: {t: float(v) for t, v in table.items()} for c, table in doc["log_likelihood"].items()
            },
            token_totals={c: int(v) for c, v in doc["token_totals"].items()},
            doc_counts={c: int(v) for c, v in doc["doc_counts"].items()},
        )

    def save(self, path: str | os.PathLike[str]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> NBModel:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def train_classifier(
    corpus: Iterable[tuple[str, str]], alpha: float = DEFAULT_ALPHA, name: str = "default"
) -> NBModel:
    """Fit class priors and Laplace-smoothed token likelihoods.

    ``corpus`` is a sequence of ``(label, text)`` with labels ``sensitive``
    and ``public``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    docs = Counter()
    tokens: dict[str, Counter] = {c: Counter() for c in CLASSES}
    for label, text in corpus:
        if label not in CLASSES:
            raise ValueError(f"unknown label {label!r}")
        docs[label] += 1
        tokens[label].update(tokenize(text))
    total = sum(docs.values())
    if total == 0:
        raise EmptyCorpus("no training documents")
    missing = [c for c in CLASSES if docs[c] == 0]
    if missing:
        raise MissingClass(f"no documents labelled {', '.join(missing)}")
    vocab = sorted(set(tokens[SENSITIVE]) | set(tokens[PUBLIC]))
    if not vocab:
        raise EmptyCorpus("training documents contain no tokens")
    totals = {c: sum(tokens[c].values()) for c in CLASSES}
    loglik = {}
    for c in CLASSES:
        denom = totals[c] + alpha * len(vocab)
        loglik[c] = {t: math.log((tokens[c][t] + alpha) / denom) for t in vocab}
    return NBModel(
        name=name,
        alpha=float(alpha),
        log_prior={c: math.log(docs[c] / total) for c in CLASSES},
        log_likelihood=loglik,
        token_totals=totals,
        doc_counts={c: docs[c] for c in CLASSES},
    )


def classify(model: NBModel, text: str) -> float:
    """Posterior probability that ``text`` is sensitive."""
    return model.posteriors(text)[SENSITIVE]


def classifier_scan(
    model: NBModel, content: ExtractedContent, threshold: float = DEFAULT_THRESHOLD
) -> list[Detection]:
    text = content.joined()
    if not text:
        return []
    p = classify(model, text)
    if p < threshold:
        return []
    return [Detection("classifier", model.name, model.name, None, text[:64], p)]
