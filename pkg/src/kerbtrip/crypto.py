"""Key derivation, authenticated sealing, and deterministic randomness.

Every encrypted envelope in the protocol is a :class:`SealedBox` produced by
:func:`seal` and consumed by :func:`open_box`.  Sealing is extended-nonce
ChaCha20-Poly1305: the 24-byte box nonce is stretched into a per-message
subkey via HKDF-SHA256, so nonce collisions under one long-term key are
harmless as long as the nonce source never repeats.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from enum import Enum

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

KEY_SIZE = 32
NONCE_SIZE = 24
TAG_SIZE = 16

_KDF_SEP = b"\x00"
_SEAL_INFO = b"kerbtrip-seal-v1"
_DRBG_DOMAIN = b"kerbtrip-drbg-v1"


class CryptoError(Exception):
    """Base class for failures in this module."""


class InvalidPassword(CryptoError):
    """Raised when a password fails the derivation preconditions."""


class AuthenticationFailure(CryptoError):
    """Opening failed: wrong key or tampered box (indistinguishable)."""


class KeyOrigin(Enum):
    PASSWORD = "password-derived"
    SESSION = "session"
    LONG_TERM = "long-term"


@dataclass(frozen=True)
class SymmetricKey:
    """32 bytes of key material; equality ignores the origin tag."""

    data: bytes
    origin: KeyOrigin = field(default=KeyOrigin.SESSION, compare=False)

    def __post_init__(self) -> None:
        if not isinstance(self.data, bytes) or len(self.data) != KEY_SIZE:
            raise CryptoError(f"key must be exactly {KEY_SIZE} bytes")

    def hex(self) -> str:
        return self.data.hex()

    def __repr__(self) -> str:  # keep key material out of logs
        return f"SymmetricKey({self.origin.value}, {self.data[:4].hex()}…)"


@dataclass(frozen=True)
class SealedBox:
    """Authenticated envelope: nonce ‖ ciphertext ‖ tag."""

    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def __post_init__(self) -> None:
        if len(self.nonce) != NONCE_SIZE:
            raise CryptoError(f"nonce must be {NONCE_SIZE} bytes")
        if len(self.tag) != TAG_SIZE:
            raise CryptoError(f"tag must be {TAG_SIZE} bytes")

    def as_bytes(self) -> bytes:
        return self.nonce + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedBox":
        if len(raw) < NONCE_SIZE + TAG_SIZE:
            raise CryptoError("sealed box too short")
        return cls(
            nonce=raw[:NONCE_SIZE],
            ciphertext=raw[NONCE_SIZE:-TAG_SIZE],
            tag=raw[-TAG_SIZE:],
        )


def derive_key(password: str, principal: str, index: int) -> SymmetricKey:
    """Derive one of the three registration keys for a principal.

    Defined bit-exactly as SHA-256(password ‖ 0x00 ‖ principal ‖ 0x00 ‖
    index-byte) so keytabs and traces are reproducible everywhere.
    """
    if not password:
        raise InvalidPassword("password must be non-empty")
    if index not in (1, 2, 3):
        raise InvalidPassword(f"index must be 1, 2 or 3, got {index}")
    material = (
        password.encode("utf-8")
        + _KDF_SEP
        + principal.encode("utf-8")
        + _KDF_SEP
        + bytes([index])
    )
    return SymmetricKey(hashlib.sha256(material).digest(), KeyOrigin.PASSWORD)


def _subkey(key: SymmetricKey, nonce: bytes) -> bytes:
    hk = HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=nonce, info=_SEAL_INFO)
    return hk.derive(key.data)


def seal(key: SymmetricKey, plaintext: bytes, nonce_source: "NonceSource") -> SealedBox:
    """Encrypt and authenticate ``plaintext`` under ``key``."""
    nonce = nonce_source.next_nonce()
    if len(nonce) != NONCE_SIZE:
        raise CryptoError("nonce source yielded a wrong-size nonce")
    ct = ChaCha20Poly1305(_subkey(key, nonce)).encrypt(b"\x00" * 12, plaintext, None)
    return SealedBox(nonce=nonce, ciphertext=ct[:-TAG_SIZE], tag=ct[-TAG_SIZE:])


def open_box(key: SymmetricKey, box: SealedBox) -> bytes:
    """Return the plaintext, or raise :class:`AuthenticationFailure`.

    Wrong key and tampering are deliberately indistinguishable.
    """
    try:
        return ChaCha20Poly1305(_subkey(key, box.nonce)).decrypt(
            b"\x00" * 12, box.ciphertext + box.tag, None
        )
    except InvalidTag as exc:
        raise AuthenticationFailure("sealed box failed to open") from exc


class NonceSource:
    """Anything with a ``next_nonce() -> bytes`` method yielding 24 bytes."""

    def next_nonce(self) -> bytes:
        raise NotImplementedError


class SystemNonceSource(NonceSource):
    """Entropy-backed nonces for the live daemons."""

    def next_nonce(self) -> bytes:
        return os.urandom(NONCE_SIZE)


class DeterministicRandomSource(NonceSource):
    """SHA-256 counter stream seeded by (seed, label).

    One instance per principal keeps simulated runs reproducible: identical
    (seed, label) pairs yield identical key/nonce sequences on any platform.
    """

    def __init__(self, seed: int, label: str = "") -> None:
        if seed < 0 or seed >= 1 << 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self._state = hashlib.sha256(
            _DRBG_DOMAIN + seed.to_bytes(8, "big") + label.encode("utf-8")
        ).digest()
        self._counter = 0
        self._buffer = b""

    def take(self, n: int) -> bytes:
        while len(self._buffer) < n:
            block = hashlib.sha256(
                self._state + self._counter.to_bytes(8, "big")
            ).digest()
            self._counter += 1
            self._buffer += block
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out

    def next_u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def next_key(self, origin: KeyOrigin = KeyOrigin.SESSION) -> SymmetricKey:
        return SymmetricKey(self.take(KEY_SIZE), origin)

    def next_nonce(self) -> bytes:
        return self.take(NONCE_SIZE)


def gen_session_key(rng: DeterministicRandomSource) -> SymmetricKey:
    """Draw a fresh session key; identical seeds give identical sequences."""
    return rng.next_key(KeyOrigin.SESSION)


# --- keytab files -----------------------------------------------------------
#
# Line format: principal:index:hex(key).  Index 0 marks a long-term key,
# 1..3 the password-derived registration keys.

def save_keytab(path: str, entries: dict[tuple[str, int], SymmetricKey]) -> None:
    lines = []
    for (principal, index), key in sorted(entries.items()):
        if ":" in principal or not principal:
            raise CryptoError(f"principal {principal!r} not representable in a keytab")
        lines.append(f"{principal}:{index}:{key.hex()}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_keytab(path: str) -> dict[tuple[str, int], SymmetricKey]:
    entries: dict[tuple[str, int], SymmetricKey] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(":")
            if len(parts) != 3:
                raise CryptoError(f"{path}:{lineno}: expected principal:index:hex")
            principal, index_s, hex_key = parts
            try:
                index = int(index_s)
                data = bytes.fromhex(hex_key)
            except ValueError as exc:
                raise CryptoError(f"{path}:{lineno}: {exc}") from exc
            origin = KeyOrigin.LONG_TERM if index == 0 else KeyOrigin.PASSWORD
            entries[(principal, index)] = SymmetricKey(data, origin)
    return entries
