import gzip
import json
import math
import os
import random
import zlib
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dlpgate.crypto import (
    OVERHEAD,
    AuthenticationFailure,
    KeyStore,
    KeyStoreError,
    NoKey,
    encrypt_decoy,
    generate_key,
    try_enterprise_decrypt,
)
from dlpgate.envelope import (
    EmptyInput,
    MalformedHttpHeader,
    classify_opacity,
    extract_plain,
    extract_text,
    parse_http_envelope,
    shannon_entropy,
    sniff_magic,
)
from dlpgate.text import normalize

ENGLISH = (
    "The committee met on Tuesday to review the budget for the coming year. Members "
    "agreed that travel spending should be reduced, and that the savings would fund "
    "two new positions in the support team. A final vote is expected next month after "
    "the finance office publishes its revised figures for every department."
)


def entropy_oracle(data: bytes) -> float:
    n = len(data)
    return -sum(c / n * math.log2(c / n) for c in Counter(data).values())


def req(headers: str, body: bytes = b"", target: str = "/upload") -> bytes:
    return f"POST {target} HTTP/1.1\r\nHost: x\r\n{headers}\r\n".encode() + body


# ------------------------------------------------------------- envelopes


def test_parse_plain_request():
    env = parse_http_envelope(req("Content-Type: text/plain\r\n", b"hi"), "request")
    assert env.method == "POST" and env.body == b"hi"
    assert env.content_type.type == "text/plain"
    assert env.target == "x/upload"


def test_default_content_type():
    env = parse_http_envelope(b"POST / HTTP/1.1\r\nHost: x\r\n\r\n", "request")
    assert env.content_type.type == "application/octet-stream"


def test_gzip_body_is_decompressed():
    packed = gzip.compress(b"secret")
    env = parse_http_envelope(req("Content-Encoding: gzip\r\nContent-Type: text/plain\r\n", packed), "request")
    assert env.body == b"secret"
    assert env.content_encoding == "gzip"
    assert env.raw_body == packed
    assert not env.decode_failed


def test_deflate_body_is_decompressed():
    env = parse_http_envelope(req("Content-Encoding: deflate\r\n", zlib.compress(b"abc")), "request")
    assert env.body == b"abc"


def test_decompression_bomb_is_opaque_not_fatal():
    bomb = gzip.compress(b"\0" * 2_000_000)
    assert len(bomb) * 100 < 2_000_000
    env = parse_http_envelope(req("Content-Encoding: gzip\r\nContent-Type: text/plain\r\n", bomb), "request")
    assert env.decode_failed and env.body == bomb
    content = extract_text(env)
    assert not content.segments and content.raw_opaque[0].data == bomb


def test_corrupt_gzip_flags_decode_failure():
    env = parse_http_envelope(req("Content-Encoding: gzip\r\n", b"\x1f\x8bnot really"), "request")
    assert env.decode_failed


def test_unknown_encoding_flags_decode_failure():
    env = parse_http_envelope(req("Content-Encoding: br\r\n", b"xx"), "request")
    assert env.decode_failed


@pytest.mark.parametrize(
    "raw",
    [b"garbage\r\n\r\n", b"POST /x HTTP/1.1\r\nno colon\r\n\r\n", b"POST /x HTTP/1.1\r\nHost: x\r\n", b"\r\n\r\n"],
)
def test_malformed_request_header(raw):
    with pytest.raises(MalformedHttpHeader):
        parse_http_envelope(raw, "request")


def test_response_envelope():
    env = parse_http_envelope(b"HTTP/1.1 200 OK\r\nContent-Type: application/json\r\n\r\n", "response", b"{}")
    assert env.status == 200 and env.body == b"{}"


# ------------------------------------------------------------ extraction


def test_form_fields():
    env = parse_http_envelope(
        req("Content-Type: application/x-www-form-urlencoded\r\n", b"a=hello%20world&ssn=123"), "request"
    )
    segs = extract_text(env).segments
    assert [(s.source, s.name, s.text) for s in segs] == [
        ("form-field", "a", "hello world"),
        ("form-field", "ssn", "123"),
    ]


def test_form_plus_and_utf8():
    env = parse_http_envelope(
        req("Content-Type: application/x-www-form-urlencoded\r\n", "q=caf%C3%A9+Noir&r=é".encode()), "request"
    )
    assert extract_text(env).texts == ["café noir", "é"]


def test_json_strings():
    env = parse_http_envelope(req("Content-Type: application/json\r\n", b'{"k":"Va l","n":5}'), "request")
    segs = extract_text(env).segments
    assert [(s.source, s.name, s.text) for s in segs] == [("json-string", "k", "va l")]


def test_json_depth_first_order():
    doc = {"a": "one", "b": {"c": ["two", {"d": "three"}]}, "e": "four"}
    env = parse_http_envelope(req("Content-Type: application/json\r\n", json.dumps(doc).encode()), "request")
    assert extract_text(env).texts == ["one", "two", "three", "four"]


def test_invalid_json_falls_back_to_text():
    env = parse_http_envelope(req("Content-Type: application/json\r\n", b"{not json SECRET"), "request")
    assert extract_text(env).texts == ["{not json secret"]


def _multipart(parts, boundary="XyZ"):
    out = b""
    for headers, body in parts:
        out += b"--" + boundary.encode() + b"\r\n" + headers + b"\r\n" + body + b"\r\n"
    return out + b"--" + boundary.encode() + b"--\r\n"


def test_multipart_text_and_binary():
    body = _multipart(
        [
            (b'Content-Disposition: form-data; name="note"\r\n', b"abc"),
            (b'Content-Disposition: form-data; name="f"; filename="x.bin"\r\nContent-Type: application/octet-stream\r\n', b"\x00\x01\x02"),
        ]
    )
    env = parse_http_envelope(req("Content-Type: multipart/form-data; boundary=XyZ\r\n", body), "request")
    content = extract_text(env)
    assert [(s.source, s.name, s.text) for s in content.segments] == [("multipart-part", "note", "abc")]
    assert len(content.raw_opaque) == 1
    assert content.raw_opaque[0].name == "x.bin" and content.raw_opaque[0].data == b"\x00\x01\x02"
    assert not content.errors


def test_multipart_textual_file_part_becomes_segment():
    body = _multipart([(b'Content-Disposition: form-data; name="f"; filename="a.csv"\r\nContent-Type: text/csv\r\n', b"A,B")])
    env = parse_http_envelope(req('Content-Type: multipart/form-data; boundary="XyZ"\r\n', body), "request")
    assert extract_text(env).texts == ["a,b"]


def test_multipart_nested():
    inner = _multipart([(b"Content-Type: text/plain\r\n", b"Deep Text")], boundary="in")
    body = _multipart([(b"Content-Type: multipart/mixed; boundary=in\r\n", inner)])
    env = parse_http_envelope(req("Content-Type: multipart/form-data; boundary=XyZ\r\n", body), "request")
    assert extract_text(env).texts == ["deep text"]


def test_malformed_multipart_demoted_to_opaque():
    body = b"--XyZ\r\nContent-Type: text/plain\r\n\r\nno closing boundary"
    env = parse_http_envelope(req("Content-Type: multipart/form-data; boundary=XyZ\r\n", body), "request")
    content = extract_text(env)
    assert content.errors and not content.segments
    assert content.raw_opaque[0].data == body


def test_query_and_subject():
    env = parse_http_envelope(
        b"GET /s?q=Top+Secret&x=1 HTTP/1.1\r\nHost: h\r\nSubject: Quarterly   PLAN\r\n\r\n", "request"
    )
    segs = extract_text(env).segments
    assert [(s.source, s.name, s.text) for s in segs] == [
        ("url-query", "q", "top secret"),
        ("url-query", "x", "1"),
        ("header-subject", "Subject", "quarterly plan"),
    ]


def test_unknown_type_is_opaque():
    env = parse_http_envelope(req("Content-Type: image/png\r\n", b"\x89PNG"), "request")
    content = extract_text(env)
    assert not content.segments and content.raw_opaque[0].data == b"\x89PNG"


def test_extract_plain():
    assert extract_plain(b"Hello  World\n").texts == ["hello world"]
    assert extract_plain(b"").segments == []


def test_normalize():
    assert normalize("  ÀB\t\n c  ") == "àb c"


# attribution: every body byte belongs to exactly one region


def _assert_partition(content, n):
    regions = sorted({s.region for s in content.segments if s.source not in ("url-query", "header-subject")}
                     | {o.region for o in content.raw_opaque})
    if n == 0:
        assert regions == []
        return
    pos = 0
    for lo, hi in regions:
        assert lo == pos and hi > lo
        pos = hi
    assert pos == n


field_text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=20)


@given(st.lists(st.tuples(field_text, field_text), max_size=6), st.integers(0, 2))
def test_form_attribution(fields, extra_amps):
    from urllib.parse import quote_plus

    body = ("&" * extra_amps).join(f"{quote_plus(k)}={quote_plus(v)}" for k, v in fields).encode()
    env = parse_http_envelope(req("Content-Type: application/x-www-form-urlencoded\r\n", body), "request")
    content = extract_text(env)
    _assert_partition(content, len(body))


@given(st.lists(st.tuples(st.booleans(), st.binary(max_size=40).filter(lambda b: b"--B0" not in b)), min_size=1, max_size=5),
       st.binary(max_size=10).filter(lambda b: b"--B0" not in b and b"\r\n" not in b))
def test_multipart_attribution(parts, preamble):
    layout = []
    for textual, data in parts:
        ct = b"text/plain" if textual else b"application/octet-stream"
        layout.append((b"Content-Type: " + ct + b"\r\n", data))
    body = (preamble + b"\r\n" if preamble else b"") + _multipart(layout, boundary="B0")
    env = parse_http_envelope(req("Content-Type: multipart/form-data; boundary=B0\r\n", body), "request")
    content = extract_text(env)
    assert not content.errors
    assert len(content.segments) + len(content.raw_opaque) == len(parts)
    _assert_partition(content, len(body))


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | field_text,
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(field_text, inner, max_size=4),
    max_leaves=12,
)


@given(json_values)
def test_json_attribution_and_strings(value):
    body = json.dumps(value).encode()
    env = parse_http_envelope(req("Content-Type: application/json\r\n", body), "request")
    content = extract_text(env)
    _assert_partition(content, len(body))


# --------------------------------------------------------------- entropy


def test_entropy_examples():
    assert shannon_entropy(b"A" * 1024) == 0.0
    assert shannon_entropy(bytes(range(256))) == pytest.approx(8.0, abs=1e-12)
    assert shannon_entropy(b"abab") == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(EmptyInput):
        shannon_entropy(b"")


@given(st.binary(min_size=1, max_size=500), st.randoms(use_true_random=False))
def test_entropy_properties(data, rnd):
    h = shannon_entropy(data)
    assert 0.0 <= h <= 8.0
    assert h == pytest.approx(entropy_oracle(data), abs=1e-9)
    shuffled = bytearray(data)
    rnd.shuffle(shuffled)
    assert shannon_entropy(bytes(shuffled)) == pytest.approx(h, abs=1e-9)
    assert shannon_entropy(data + data) == pytest.approx(h, abs=1e-9)


def test_opacity_examples():
    v = classify_opacity(b"\x1f\x8b" + b"\0" * 10)
    assert v.klass == "compressed" and v.magic == "gzip"
    rand = random.Random(1234).randbytes(4096)
    assert entropy_oracle(rand) > 7.9
    assert classify_opacity(rand).klass == "encrypted_or_unknown"
    text = ENGLISH.encode()[:300]
    assert len(text) == 300
    assert entropy_oracle(text) < 5.0
    assert classify_opacity(text).klass == "plaintext"


def test_short_random_is_plaintext():
    assert classify_opacity(os.urandom(200)).klass == "plaintext"


def test_magic_sniffing():
    assert sniff_magic(zlib.compress(b"x")) == "zlib"
    assert sniff_magic(b"PK\x03\x04rest") == "zip"
    assert sniff_magic(b"xyz") is None


def test_envelope_classified_encrypted_even_when_short():
    kid, key = generate_key()
    assert classify_opacity(encrypt_decoy(b"tiny", kid, key)).klass == "encrypted_or_unknown"


# ---------------------------------------------------------------- crypto


@given(st.binary(max_size=2000))
def test_decrypt_inverts_encrypt(body):
    kid, key = generate_key()
    env = encrypt_decoy(body, kid, key)
    assert len(env) == OVERHEAD + len(body) == 4 + 16 + 12 + len(body) + 16
    assert try_enterprise_decrypt(env, KeyStore({kid: key})) == body


def test_missing_key_is_nokey():
    kid, key = generate_key()
    env = encrypt_decoy(b"payload", kid, key)
    other = KeyStore(dict([generate_key()]))
    with pytest.raises(NoKey) as info:
        try_enterprise_decrypt(env, other)
    assert not isinstance(info.value, AuthenticationFailure)
    with pytest.raises(NoKey):
        try_enterprise_decrypt(os.urandom(100), KeyStore({kid: key}))


def test_flipped_byte_is_authentication_failure():
    from cryptography.hazmat.primitives.ciphers.aead import AESGCM

    kid, key = generate_key()
    env = bytearray(encrypt_decoy(b"some payload bytes", kid, key))
    # independent decryption with the reference AEAD
    assert AESGCM(key).decrypt(bytes(env[20:32]), bytes(env[32:]), bytes(env[:32])) == b"some payload bytes"
    env[40] ^= 0x01
    with pytest.raises(AuthenticationFailure):
        try_enterprise_decrypt(bytes(env), KeyStore({kid: key}))


def test_keystore_file_round_trip_and_permissions(tmp_path):
    kid, key = generate_key()
    path = tmp_path / "ks.json"
    KeyStore({kid: key}).dump(path)
    assert path.stat().st_mode & 0o777 == 0o600
    assert KeyStore.load(path).get(kid) == key
    path.chmod(0o644)
    with pytest.raises(KeyStoreError):
        KeyStore.load(path)
    assert KeyStore.load(path, check_permissions=False).get(kid) == key


def test_keystore_rejects_bad_entries(tmp_path):
    path = tmp_path / "ks.json"
    path.write_text(json.dumps({"keys": [{"key_id": "00" * 16, "key": "11" * 16}]}))
    path.chmod(0o600)
    with pytest.raises(KeyStoreError):
        KeyStore.load(path)
    path.write_text(json.dumps({"keys": [{"key_id": "00" * 16, "key": "11" * 32}] * 2}))
    with pytest.raises(KeyStoreError):
        KeyStore.load(path)
