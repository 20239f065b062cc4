"""Enterprise envelope format and key store.

Envelope layout::

    b"DLP1" | key_id (16 bytes) | nonce (12 bytes) | AES-256-GCM ciphertext | tag (16 bytes)

The 32-byte header is authenticated as associated data.
"""

from __future__ import annotations

import json
import logging
import os
import stat
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

log = logging.getLogger(__name__)

MAGIC = b"DLP1"
KEY_ID_LEN = 16
NONCE_LEN = 12
TAG_LEN = 16
HEADER_LEN = len(MAGIC) + KEY_ID_LEN + NONCE_LEN
OVERHEAD = HEADER_LEN + TAG_LEN


class NoKey(Exception):
    """Payload cannot be opened with enterprise keys."""


class AuthenticationFailure(NoKey):
    """The key exists but the envelope failed authentication."""


class KeyStoreError(ValueError):
    pass


@dataclass(frozen=True)
class KeyStore:
    keys: Mapping[bytes, bytes] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for kid, key in self.keys.items():
            if len(kid) != KEY_ID_LEN:
                raise KeyStoreError(f"key id must be {KEY_ID_LEN} bytes")
            if len(key) != 32:
                raise KeyStoreError("keys must be 256-bit")
        object.__setattr__(self, "keys", MappingProxyType(dict(self.keys)))

    def __contains__(self, key_id: object) -> bool:
        return key_id in self.keys

    def get(self, key_id: bytes) -> bytes | None:
        return self.keys.get(key_id)

    def first(self) -> tuple[bytes, bytes]:
        """The first key in id order, used for decoy encryption."""
        if not self.keys:
            raise KeyStoreError("key store is empty")
        kid = min(self.keys)
        return kid, self.keys[kid]

    @classmethod
    def load(cls, path: str | os.PathLike[str], *, check_permissions: bool = True) -> KeyStore:
        """Load ``{"keys": [{"key_id": <32 hex>, "key": <64 hex>}, ...]}``.

        Refuses files readable by "other" when ``check_permissions`` is set.
        """
        path = Path(path)
        mode = path.stat().st_mode
        if check_permissions and mode & stat.S_IROTH:
            raise KeyStoreError(f"{path} is world-readable; chmod o-r it")
        doc = json.loads(path.read_text())
        keys: dict[bytes, bytes] = {}
        for entry in doc.get("keys", []):
            try:
                kid = bytes.fromhex(entry["key_id"])
                key = bytes.fromhex(entry["key"])
            except (KeyError, ValueError, TypeError) as exc:
                raise KeyStoreError(f"bad key entry: {exc}") from None
            if len(entry["key_id"]) != 32 or len(entry["key"]) != 64:
                raise KeyStoreError("key_id must be 32 hex chars and key 64 hex chars")
            if kid in keys:
                raise KeyStoreError(f"duplicate key id {entry['key_id']}")
            keys[kid] = key
        return cls(keys)

    def dump(self, path: str | os.PathLike[str]) -> None:
        doc = {"keys": [{"key_id": k.hex(), "key": v.hex()} for k, v in sorted(self.keys.items())]}
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")


def generate_key() -> tuple[bytes, bytes]:
    return os.urandom(KEY_ID_LEN), AESGCM.generate_key(bit_length=256)


def encrypt_decoy(body: bytes, key_id: bytes, key: bytes) -> bytes:
    """Seal ``body`` into a DLP1 envelope under a fresh random nonce."""
    if len(key_id) != KEY_ID_LEN:
        raise ValueError(f"key id must be {KEY_ID_LEN} bytes")
    header = MAGIC + key_id + os.urandom(NONCE_LEN)
    return header + AESGCM(key).encrypt(header[-NONCE_LEN:], body, header)


def is_envelope(data: bytes) -> bool:
    return len(data) >= OVERHEAD and data[: len(MAGIC)] == MAGIC


def try_enterprise_decrypt(data: bytes, keystore: KeyStore) -> bytes:
    """Open a DLP1 envelope; raises :class:`NoKey` or :class:`AuthenticationFailure`."""
    if not is_envelope(data):
        raise NoKey("payload is not an enterprise envelope")
    header = data[:HEADER_LEN]
    key_id = header[len(MAGIC) : len(MAGIC) + KEY_ID_LEN]
    key = keystore.get(key_id)
    if key is None:
        raise NoKey(f"no key for id {key_id.hex()}")
    try:
        return AESGCM(key).decrypt(header[-NONCE_LEN:], data[HEADER_LEN:], header)
    except InvalidTag:
        log.warning("envelope authentication failed for key id %s", key_id.hex())
        raise AuthenticationFailure(key_id.hex()) from None
