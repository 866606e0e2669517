"""Small wrappers around Ed25519 keys and SHA-256 used by every party."""
from __future__ import annotations

import hashlib
import os

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

ZERO_DIGEST = bytes(32)
SIGNATURE_SIZE = 64
PUBLIC_KEY_SIZE = 32


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


def fingerprint(public_key: bytes) -> str:
    return hashlib.sha256(public_key).hexdigest()


class Identity:
    """An Ed25519 key pair registered with peers out of band."""

    def __init__(self, private_key: Ed25519PrivateKey | None = None, name: str = ""):
        self._key = private_key or Ed25519PrivateKey.generate()
        self.name = name
        self.public_key = self._key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    @classmethod
    def from_seed(cls, seed: bytes, name: str = "") -> "Identity":
        """Deterministic key from a 32-byte seed (test fixtures, reproducible runs)."""
        seed = hashlib.sha256(seed).digest() if len(seed) != 32 else seed
        return cls(Ed25519PrivateKey.from_private_bytes(seed), name)

    @classmethod
    def generate(cls, name: str = "") -> "Identity":
        return cls(Ed25519PrivateKey.from_private_bytes(os.urandom(32)), name)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.public_key)

    def sign(self, data: bytes) -> bytes:
        return self._key.sign(data)

    def __repr__(self):
        label = f"{self.name} " if self.name else ""
        return f"<Identity {label}{self.fingerprint[:12]}>"


def verify(public_key: bytes, signature: bytes, data: bytes) -> bool:
    if len(public_key) != PUBLIC_KEY_SIZE or len(signature) != SIGNATURE_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True
