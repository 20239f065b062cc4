"""The four detection techniques: keywords/regexes, fingerprints, tags, classifier."""

from .base import DETECTOR_KINDS, Detection
from .classifier import (
    EmptyCorpus,
    MissingClass,
    NBModel,
    classifier_scan,
    classify,
    train_classifier,
)
from .fingerprint import (
    DocTooShort,
    FingerprintIndex,
    build_fingerprint_index,
    fingerprint_scan,
    winnow_text,
)
from .keywords import BadPattern, CompiledMatcher, compile_ruleset, scan_keywords
from .tags import TagCollision, TagRegistry, register_tag, tag_scan

__all__ = [
    "DETECTOR_KINDS",
    "BadPattern",
    "CompiledMatcher",
    "Detection",
    "DocTooShort",
    "EmptyCorpus",
    "FingerprintIndex",
    "MissingClass",
    "NBModel",
    "TagCollision",
    "TagRegistry",
    "build_fingerprint_index",
    "classifier_scan",
    "classify",
    "compile_ruleset",
    "fingerprint_scan",
    "register_tag",
    "scan_keywords",
    "tag_scan",
    "train_classifier",
    "winnow_text",
]
