"""Hashing, signatures and commit-reveal primitives.

Nodes and the simulated contracts call the same functions here, so anything
hashed or signed off-chain is checked on-chain over identical bytes.

Hash: SHA-256.  Signatures: Ed25519 (deterministic, 32-byte public keys).
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from typing import Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

HASH_NAME = "sha256"
SIGNATURE_SCHEME = "ed25519"
DIGEST_SIZE = 32
SALT_SIZE = 32

Field = Union[bytes, str, int]


class Digest(bytes):
    """A 32-byte hash output."""

    def __new__(cls, value: bytes) -> "Digest":
        if len(value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    def __repr__(self) -> str:
        return f"Digest({self.hex()[:16]}...)"


ZERO_DIGEST = Digest(bytes(DIGEST_SIZE))


def encode_field(value: Field) -> bytes:
    if isinstance(value, bool):
        raise TypeError("booleans have no canonical encoding")
    if isinstance(value, int):
        raw = value.to_bytes(8, "big", signed=True)
    elif isinstance(value, str):
        raw = value.encode("utf-8")
    elif isinstance(value, (bytes, bytearray)):
        raw = bytes(value)
    else:
        raise TypeError(f"cannot encode {type(value).__name__}")
    return struct.pack(">I", len(raw)) + raw


def canonical(*fields: Field) -> bytes:
    """Length-prefixed concatenation of fields in the given order.

    Each field is a 4-byte big-endian length followed by its bytes; integers
    are 8-byte big-endian two's complement, strings UTF-8.
    """
    return b"".join(encode_field(f) for f in fields)


def hash_bytes(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    secret_key: bytes

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        """Derive a key pair from 32 seed bytes (any longer input is hashed down)."""
        if len(seed) != 32:
            seed = hashlib.sha256(seed).digest()
        sk = Ed25519PrivateKey.from_private_bytes(seed)
        public = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        secret = sk.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())
        return cls(public_key=public, secret_key=secret)


@dataclass(frozen=True)
class Proof:
    signature: bytes
    signer: bytes


def sign_message(secret_key: bytes, message: bytes) -> Proof:
    sk = Ed25519PrivateKey.from_private_bytes(secret_key)
    public = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return Proof(signature=sk.sign(message), signer=public)


def verify_proof(proof: Proof, message: bytes) -> bool:
    """True iff ``proof.signature`` is ``proof.signer``'s signature over ``message``."""
    try:
        Ed25519PublicKey.from_public_bytes(proof.signer).verify(proof.signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class Commitment:
    digest: Digest
    feed_id: str
    round: int
    author: bytes


@dataclass(frozen=True)
class Reveal:
    value: Field
    salt: bytes
    feed_id: str
    round: int
    author: bytes


class RevealCheck(enum.Enum):
    VALID = "valid"
    FRAUDULENT = "fraudulent"


class RevealMismatch(ValueError):
    """Reveal and commitment refer to different (feed, round, author)."""


def commitment_digest(feed_id: str, round: int, value: Field, salt: bytes) -> Digest:
    if len(salt) != SALT_SIZE:
        raise ValueError(f"salt must be {SALT_SIZE} bytes, got {len(salt)}")
    return hash_bytes(canonical(feed_id, round, value, salt))


def make_commitment(
    feed_id: str, round: int, value: Field, salt: bytes, author: bytes = b""
) -> Commitment:
    return Commitment(
        digest=commitment_digest(feed_id, round, value, salt),
        feed_id=feed_id,
        round=round,
        author=author,
    )


def open_reveal(commitment: Commitment, reveal: Reveal) -> RevealCheck:
    if (commitment.feed_id, commitment.round, commitment.author) != (
        reveal.feed_id,
        reveal.round,
        reveal.author,
    ):
        raise RevealMismatch("reveal does not belong to this commitment")
    try:
        recomputed = commitment_digest(reveal.feed_id, reveal.round, reveal.value, reveal.salt)
    except (ValueError, TypeError):
        return RevealCheck.FRAUDULENT
    if recomputed == commitment.digest:
        return RevealCheck.VALID
    return RevealCheck.FRAUDULENT
