"""Hashing, signatures and hash commitments.

SHA-256 digests and Ed25519 signatures. Ed25519 signing is deterministic and
keys are derived from seeds, so a simulation run can be reproduced byte for
byte from its configuration alone.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

DIGEST_SIZE = 32
KEY_SIZE = 32
SIGNATURE_SIZE = 64

COMMIT_TAG = b"dca/commit/v1"
KEYGEN_TAG = b"dca/keygen/v1"

MIN_SECRET = 16
MAX_SECRET = 64


class InvalidKeyError(ValueError):
    """The key material cannot be used as a signing identity."""


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    secret_key: bytes

    @classmethod
    def from_seed(cls, seed: bytes | str | int) -> "KeyPair":
        """Derive a key pair deterministically from an arbitrary seed."""
        if isinstance(seed, int):
            seed = seed.to_bytes(8, "big", signed=True)
        elif isinstance(seed, str):
            seed = seed.encode()
        secret = digest(KEYGEN_TAG + seed)
        return cls(public_key=public_key_of(secret), secret_key=secret)

    def sign(self, message: bytes) -> bytes:
        return sign(self.secret_key, message)

    def __repr__(self) -> str:
        return f"KeyPair(public_key={self.public_key.hex()[:16]}...)"


def public_key_of(secret_key: bytes) -> bytes:
    return _private(secret_key).public_key().public_bytes_raw()


def _private(secret_key: bytes) -> Ed25519PrivateKey:
    if not isinstance(secret_key, (bytes, bytearray)) or len(secret_key) != KEY_SIZE:
        raise InvalidKeyError("secret key must be 32 octets")
    return Ed25519PrivateKey.from_private_bytes(bytes(secret_key))


def sign(secret_key: bytes, message: bytes) -> bytes:
    return _private(secret_key).sign(bytes(message))


@lru_cache(maxsize=1 << 16)
def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    # Cached: every node in a simulation verifies the same records.
    if len(public_key) != KEY_SIZE or len(signature) != SIGNATURE_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class Commitment:
    """Binding commitment to a secret; ``opened`` is filled in once revealed."""

    digest: bytes
    opened: bytes | None = None


def commit(secret: bytes) -> Commitment:
    if not MIN_SECRET <= len(secret) <= MAX_SECRET:
        raise ValueError(
            f"commitment secret must be {MIN_SECRET}..{MAX_SECRET} octets, got {len(secret)}"
        )
    return Commitment(digest(COMMIT_TAG + secret))


def open_commitment(commitment: Commitment, secret: bytes) -> bool:
    return digest(COMMIT_TAG + bytes(secret)) == commitment.digest
