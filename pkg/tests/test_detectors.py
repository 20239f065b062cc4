import math
import random
import string

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dlpgate.detectors import (
    BadPattern,
    DocTooShort,
    EmptyCorpus,
    FingerprintIndex,
    MissingClass,
    NBModel,
    TagCollision,
    TagRegistry,
    build_fingerprint_index,
    classifier_scan,
    classify,
    compile_ruleset,
    fingerprint_scan,
    register_tag,
    scan_keywords,
    tag_scan,
    train_classifier,
    winnow_text,
)
from dlpgate.detectors.base import Detection
from dlpgate.detectors.fingerprint import overlaps
from dlpgate.detectors.keywords import AhoCorasick, scan_text
from dlpgate.detectors.tags import text_hash
from dlpgate.envelope import extract_plain

from conftest import fnv1a64
from oracles import (
    HAND_CORPUS,
    HAND_LIKELIHOOD,
    HAND_POSTERIORS,
    HAND_UNSEEN,
    kgram_hashes,
    kgram_overlap,
    naive_scan,
    winnow_fingerprints,
    winnow_positions,
)

WORDS = ("alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo lima mike "
         "november oscar papa quebec romeo sierra tango uniform victor whiskey xray yankee zulu").split()


def word_text(rng: random.Random, n_chars: int) -> str:
    out = []
    while sum(len(w) + 1 for w in out) < n_chars:
        out.append(rng.choice(WORDS))
    return " ".join(out)[:n_chars].strip()


def found(m, text):
    return {(d.rule_id, d.span[1], d.span[2]) for d in scan_text(m, text)}


# ---------------------------------------------------------- keywords / regex


def test_overlapping_literals_both_reported():
    m = compile_ruleset(["secret", "secrets"])
    assert found(m, "secrets") == {("secret", 0, 6), ("secrets", 0, 7)}


def test_aho_corasick_suffix_outputs():
    ac = AhoCorasick([("he", "he"), ("she", "she"), ("his", "his"), ("hers", "hers")])
    assert set(ac.iter_matches("ushers")) == {("she", 1, 4), ("he", 2, 4), ("hers", 2, 6)}


def test_keyword_patterns_are_normalized():
    m = compile_ruleset([("k", "Top   SECRET")])
    assert m.literal_patterns == (("k", "top secret"),)
    content = extract_plain(b"this is TOP\nsecret stuff")
    d = scan_keywords(m, content)
    assert [(x.detector, x.rule_id, x.snippet, x.confidence) for x in d] == [("keyword", "k", "top secret", 1.0)]


def test_regex_case_insensitive():
    m = compile_ruleset(regexes=[("ssn", r"\b\d{3}-\d{2}-\d{4}\b"), ("akia", "AKIA[0-9A-Z]{4}")])
    assert found(m, "ssn 123-45-6789 key akia12ab") == {("ssn", 4, 15), ("akia", 20, 28)}


@pytest.mark.parametrize(
    "pattern",
    [r"(a)\1", r"(?P<x>a)(?P=x)", r"(a)?(?(1)b|c)", r"(a+)+", r"(a*b*)*", r"(?:x|y+)*z", r"[unclosed"],
)
def test_unsafe_regexes_rejected(pattern):
    with pytest.raises(BadPattern) as info:
        compile_ruleset(regexes=[("r1", pattern)])
    assert info.value.rule_id == "r1"


@pytest.mark.parametrize("pattern", [r"a+b+", r"(ab){1,5}c*", r"(?:x+y){2}", r"\d{3}-\d{4}", r"(a|b)*c"])
def test_safe_regexes_accepted(pattern):
    compile_ruleset(regexes=[("r", pattern)])


def test_empty_keyword_rejected():
    with pytest.raises(BadPattern):
        compile_ruleset(["   "])


def test_ruleset_input_shapes():
    a = compile_ruleset({"x": "foo"})
    b = compile_ruleset([{"id": "x", "pattern": "foo"}])
    c = compile_ruleset([("x", "foo")])
    assert a.literal_patterns == b.literal_patterns == c.literal_patterns == (("x", "foo"),)


ALPHA = "abc "


@given(
    lits=st.lists(st.text(alphabet="abc", min_size=1, max_size=4), max_size=6),
    regs=st.lists(st.sampled_from(["a+b", "c{2}", "(ab|ba)", "b[ac]?c", "a.c"]), max_size=3),
    text=st.text(alphabet=ALPHA, max_size=80),
)
def test_scan_equals_naive_oracle(lits, regs, text):
    lit_pairs = [(f"k{i}", p) for i, p in enumerate(lits)]
    reg_pairs = [(f"r{i}", p) for i, p in enumerate(regs)]
    m = compile_ruleset(lit_pairs, reg_pairs)
    assert found(m, text) == naive_scan(lit_pairs, reg_pairs, text)


def test_detection_invariants():
    with pytest.raises(ValueError):
        Detection("keyword", "r", "x", (0, 3, 3), "", 1.0)
    with pytest.raises(ValueError):
        Detection("keyword", "r", "x", None, "", 1.5)
    with pytest.raises(ValueError):
        Detection("laser", "r", "x", None, "", 1.0)
    assert len(Detection("keyword", "r", "x", None, "z" * 100, 1.0).snippet) == 64


# ------------------------------------------------------------- fingerprints


def test_mississippi_winnowing_matches_brute_force():
    fps = winnow_text("mississippi", 4, 3)
    hashes = kgram_hashes("mississippi", 4)
    expected = [(hashes[p], p) for p in winnow_positions(hashes, 3)]
    assert fps == expected
    # every selected hash is a window minimum
    for h, p in fps:
        assert any(h == min(hashes[s : s + 3]) for s in range(max(0, p - 2), p + 1))


@given(st.text(alphabet="abcd ", min_size=8, max_size=120), st.integers(2, 6), st.integers(1, 5))
def test_winnow_text_matches_oracle(text, k, w):
    hashes = kgram_hashes(text, k)
    assert winnow_text(text, k, w) == [(hashes[p], p) for p in winnow_positions(hashes, w)]


def test_index_postings_invariant():
    idx = build_fingerprint_index([("a", "the quick brown fox jumps over"), ("b", "lazy dogs sleep all day long")])
    for d, size in idx.doc_sizes.items():
        assert size == sum(1 for s in idx.postings.values() for doc, _ in s if doc == d)
    hashes = kgram_hashes("the quick brown fox jumps over", 8)
    for h, p in idx.docs["a"]:
        assert hashes[p] == h


def test_doc_too_short():
    with pytest.raises(DocTooShort) as info:
        build_fingerprint_index([("tiny", "  abc  ")])
    assert info.value.doc_id == "tiny"


def test_excerpt_overlap_close_to_oracle():
    rng = random.Random(5)
    doc = word_text(rng, 1000)
    start = 300
    excerpt = doc[start : start + 200]
    idx = build_fingerprint_index([("d", doc)])
    got = overlaps(idx, ["unrelated words here " + excerpt + " trailing text"])["d"]
    assert abs(got - kgram_overlap(doc, excerpt, 8)) <= 0.1


def test_verbatim_doc_scores_one():
    doc = word_text(random.Random(1), 600)
    idx = build_fingerprint_index([("d", doc)], name="corp")
    d = fingerprint_scan(idx, extract_plain(doc.upper().encode()))
    assert [(x.detector, x.resource, x.rule_id, x.confidence) for x in d] == [("fingerprint", "corp", "d", 1.0)]


def test_unrelated_text_no_detection():
    idx = build_fingerprint_index([("d", word_text(random.Random(1), 600))])
    assert fingerprint_scan(idx, extract_plain(b"completely different content about gardening and soup")) == []


@given(st.data())
def test_winnowing_guarantee_planted(data):
    rng = random.Random(data.draw(st.integers(0, 10**6)))
    k, w = 8, 4
    doc = "".join(rng.choice(string.ascii_lowercase + " ") for _ in range(300))
    length = data.draw(st.integers(w + k - 1, 60))
    start = data.draw(st.integers(0, len(doc) - length))
    planted = doc[start : start + length]
    noise = "".join(rng.choice("0123456789") for _ in range(data.draw(st.integers(0, 40))))
    msg = noise + planted + noise[::-1]
    idx = build_fingerprint_index([("d", doc)], k, w)
    assert {h for h, _ in winnow_text(msg, k, w)} & {h for h, _ in idx.docs["d"]}


def test_overlap_symmetric_when_sizes_equal():
    a = "abcdefghijklmnopqrstuvwxyz"
    b = "zyxwvutsrqponmlkjihgfedcba"
    ia, ib = build_fingerprint_index([("a", a)], 4, 3), build_fingerprint_index([("b", b)], 4, 3)
    if len(ia.docs["a"]) == len(ib.docs["b"]):
        assert overlaps(ia, [b]).get("a", 0) == overlaps(ib, [a]).get("b", 0)
    x = "the same text in both places"
    ix, iy = build_fingerprint_index([("x", x)]), build_fingerprint_index([("y", x)])
    assert overlaps(ix, [x])["x"] == overlaps(iy, [x])["y"] == 1.0


def test_index_json_round_trip_and_determinism(tmp_path):
    docs = [("b", "second document body text"), ("a", "first document body text here")]
    one = build_fingerprint_index(docs, name="c")
    two = build_fingerprint_index(list(reversed(docs)), name="c")
    assert one.to_json() == two.to_json()
    one.save(tmp_path / "i.json")
    back = FingerprintIndex.load(tmp_path / "i.json")
    assert back == one and back.postings == one.postings


def test_winnow_oracle_matches_fingerprint_sets():
    text = "abracadabra alakazam hocus pocus"
    assert {h for h, _ in winnow_text(text, 5, 3)} == winnow_fingerprints(text, 5, 3)


# --------------------------------------------------------------------- tags


def test_text_hash_is_fnv():
    assert text_hash("project-x-roadmap") == fnv1a64(b"project-x-roadmap")
    assert text_hash("é") == fnv1a64("é".encode())


def test_tag_exact_match():
    reg = register_tag(TagRegistry("t"), "project-x-roadmap", "PROJX")
    d = tag_scan(reg, extract_plain(b"Project-X-Roadmap"))
    assert [(x.detector, x.rule_id, x.confidence) for x in d] == [("tag", "PROJX", 1.0)]


def test_tag_changed_chunks_not_detected():
    text = "".join(random.Random(3).choice("abcdefgh") for _ in range(600))
    reg = register_tag(TagRegistry("t", chunk_len=256), text, "T")
    chars = list(text)
    for i in (10, 300, 590):
        chars[i] = "z"
    assert tag_scan(reg, extract_plain("".join(chars).encode())) == []


def test_tag_full_chunks_match_inside_longer_segment():
    text = "".join(random.Random(4).choice("abcdefgh") for _ in range(600))
    reg = register_tag(TagRegistry("t", chunk_len=256), text, "T")
    longer = text[:512] + "xyz"
    d = tag_scan(reg, extract_plain(longer.encode()))
    assert {x.span[1:] for x in d} == {(0, 256), (256, 512)}


def test_two_texts_same_tag():
    reg = register_tag(register_tag(TagRegistry(), "first text", "A"), "second text", "A")
    assert tag_scan(reg, extract_plain(b"first text"))[0].rule_id == "A"
    assert tag_scan(reg, extract_plain(b"second text"))[0].rule_id == "A"


def test_tag_collision():
    reg = register_tag(TagRegistry(), "same text", "A")
    with pytest.raises(TagCollision) as info:
        register_tag(reg, "SAME   text", "B")
    assert info.value.existing == "A" and info.value.new == "B"
    assert register_tag(reg, "same text", "A").entries == reg.entries


def test_tag_registry_round_trip(tmp_path):
    reg = register_tag(TagRegistry("n", 16), "some tagged content longer than sixteen chars", "X")
    reg.save(tmp_path / "t.json")
    assert TagRegistry.load(tmp_path / "t.json") == reg


# --------------------------------------------------------------- classifier


def test_two_doc_corpus_examples():
    m = train_classifier([("sensitive", "ssn salary"), ("public", "hello world")])
    assert m.log_prior["sensitive"] == pytest.approx(math.log(0.5), abs=1e-12)
    assert m.log_prior["public"] == pytest.approx(math.log(0.5), abs=1e-12)
    assert m.log_likelihood["sensitive"]["ssn"] == pytest.approx(math.log(1 / 3), abs=1e-12)
    assert m.unseen_log_likelihood("sensitive") == pytest.approx(math.log(1 / 6), abs=1e-12)
    # (1/2)(1/3)^2 against (1/2)(1/6)^2
    assert classify(m, "ssn salary") == pytest.approx(0.8, abs=1e-12)
    assert classify(m, "") == pytest.approx(0.5, abs=1e-12)


def test_hand_computed_likelihoods():
    m = train_classifier(HAND_CORPUS)
    for c, table in HAND_LIKELIHOOD.items():
        assert set(m.log_likelihood[c]) == set(table)
        for t, p in table.items():
            assert m.log_likelihood[c][t] == pytest.approx(math.log(p), abs=1e-12)
        assert m.unseen_log_likelihood(c) == pytest.approx(math.log(HAND_UNSEEN[c]), abs=1e-12)


@pytest.mark.parametrize("text", sorted(HAND_POSTERIORS))
def test_hand_computed_posteriors(text):
    m = train_classifier(HAND_CORPUS)
    assert abs(classify(m, text) - float(HAND_POSTERIORS[text])) <= 1e-9


def test_likelihoods_sum_to_one():
    m = train_classifier(HAND_CORPUS)
    for c in ("sensitive", "public"):
        assert sum(math.exp(v) for v in m.log_likelihood[c].values()) == pytest.approx(1.0, abs=1e-12)


@given(st.lists(st.sampled_from(["ssn", "salary", "hello", "world", "news", "zz", "q"]), max_size=30))
def test_posteriors_sum_to_one(tokens):
    m = train_classifier(HAND_CORPUS)
    p = m.posteriors(" ".join(tokens))
    assert abs(p["sensitive"] + p["public"] - 1.0) <= 1e-9


@given(st.lists(st.sampled_from(["ssn", "salary", "hello", "world", "news", "zz"]), max_size=12))
def test_duplicated_corpus_with_scaled_alpha_is_identical(tokens):
    # counts and alpha both double, so every smoothed ratio is unchanged
    text = " ".join(tokens)
    a = train_classifier(HAND_CORPUS, alpha=1.0)
    b = train_classifier(HAND_CORPUS * 2, alpha=2.0)
    assert classify(a, text) == pytest.approx(classify(b, text), abs=1e-12)


def test_duplicated_corpus_with_fixed_alpha_can_flip():
    # fixed smoothing weighs less against doubled counts
    text = "ssn ssn hello hello hello"
    assert classify(train_classifier(HAND_CORPUS), text) > 0.5
    assert classify(train_classifier(HAND_CORPUS * 2), text) < 0.5


def test_classifier_errors():
    with pytest.raises(EmptyCorpus):
        train_classifier([])
    with pytest.raises(MissingClass):
        train_classifier([("public", "x")])
    with pytest.raises(ValueError):
        train_classifier(HAND_CORPUS, alpha=0)


def test_classifier_scan_threshold():
    m = train_classifier(HAND_CORPUS, name="nb")
    hit = classifier_scan(m, extract_plain(b"ssn salary"), threshold=0.8)
    assert len(hit) == 1 and hit[0].resource == "nb" and hit[0].confidence == pytest.approx(243 / 268)
    assert classifier_scan(m, extract_plain(b"ssn salary"), threshold=0.95) == []
    assert classifier_scan(m, extract_plain(b""), threshold=0.1) == []


def test_model_json_deterministic_and_exact(tmp_path):
    a = train_classifier(HAND_CORPUS)
    b = train_classifier(list(reversed(HAND_CORPUS)))
    assert a.to_json() == b.to_json()
    a.save(tmp_path / "m.json")
    back = NBModel.load(tmp_path / "m.json")
    assert back == a


def test_detectors_are_pure():
    m = compile_ruleset(["ab"], [("r", "b+")])
    content = extract_plain(b"abbb ab")
    assert scan_keywords(m, content) == scan_keywords(m, content)
