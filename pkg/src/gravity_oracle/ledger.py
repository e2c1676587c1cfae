"""Internal distributed ledger: signed message bus finalised by consul quorum."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Optional, Sequence

from . import crypto
from .crypto import Digest, KeyPair, Proof

log = logging.getLogger(__name__)


class Kind(enum.Enum):
    COMMIT = "Commit"
    REVEAL = "Reveal"
    AGG_SIGNATURE = "AggSignature"
    SCORE_UPDATE = "ScoreUpdate"


class RejectReason(enum.Enum):
    BAD_SIGNATURE = "BadSignature"
    UNKNOWN_AUTHOR = "UnknownAuthor"
    DUPLICATE = "Duplicate"


class MessageRejected(Exception):
    def __init__(self, reason: RejectReason):
        super().__init__(reason.value)
        self.reason = reason


class NoQuorum(Exception):
    def __init__(self, signed: int, quorum: int):
        super().__init__(f"{signed} consul proofs, quorum is {quorum}")
        self.signed = signed
        self.quorum = quorum


# -- payloads ----------------------------------------------------------------
#
# Payloads are canonical byte strings; each decoded form carries the nebula id
# so that two nebulae serving one feed never share a round.

_INT = "i"
_STR = "s"
_BYTES = "b"


def _pack_value(value: crypto.Field) -> tuple[str, crypto.Field]:
    if isinstance(value, bool):
        raise TypeError("booleans are not feed values")
    if isinstance(value, int):
        return _INT, value
    if isinstance(value, str):
        return _STR, value
    return _BYTES, bytes(value)


def _unpack_value(tag: str, raw: bytes) -> crypto.Field:
    if tag == _INT:
        return int.from_bytes(raw, "big", signed=True)
    if tag == _STR:
        return raw.decode("utf-8")
    return raw


def decode_fields(data: bytes) -> list[bytes]:
    out = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValueError("truncated field header")
        n = int.from_bytes(data[pos : pos + 4], "big")
        pos += 4
        if pos + n > len(data):
            raise ValueError("truncated field body")
        out.append(data[pos : pos + n])
        pos += n
    return out


def _int(raw: bytes) -> int:
    return int.from_bytes(raw, "big", signed=True)


@dataclass(frozen=True)
class CommitPayload:
    nebula_id: str
    commitment: crypto.Commitment

    def encode(self) -> bytes:
        c = self.commitment
        return crypto.canonical(self.nebula_id, c.feed_id, c.round, c.digest, c.author)

    @classmethod
    def decode(cls, data: bytes) -> "CommitPayload":
        neb, feed, rnd, digest, author = decode_fields(data)
        return cls(neb.decode(), crypto.Commitment(Digest(digest), feed.decode(), _int(rnd), author))


@dataclass(frozen=True)
class RevealPayload:
    nebula_id: str
    reveal: crypto.Reveal

    def encode(self) -> bytes:
        r = self.reveal
        tag, value = _pack_value(r.value)
        return crypto.canonical(self.nebula_id, r.feed_id, r.round, tag, value, r.salt, r.author)

    @classmethod
    def decode(cls, data: bytes) -> "RevealPayload":
        neb, feed, rnd, tag, value, salt, author = decode_fields(data)
        reveal = crypto.Reveal(_unpack_value(tag.decode(), value), salt, feed.decode(), _int(rnd), author)
        return cls(neb.decode(), reveal)


@dataclass(frozen=True)
class AggSignaturePayload:
    agg_digest: Digest
    timestamp: int
    feed_id: str
    nebula_id: str
    round: int
    proof: Proof

    def encode(self) -> bytes:
        return crypto.canonical(
            self.agg_digest,
            self.timestamp,
            self.feed_id,
            self.nebula_id,
            self.round,
            self.proof.signature,
            self.proof.signer,
        )

    @classmethod
    def decode(cls, data: bytes) -> "AggSignaturePayload":
        digest, ts, feed, neb, rnd, sig, signer = decode_fields(data)
        return cls(Digest(digest), _int(ts), feed.decode(), neb.decode(), _int(rnd), Proof(sig, signer))


@dataclass(frozen=True)
class ScoreUpdatePayload:
    rater: str
    ratee: str
    value: float
    mode: str

    def encode(self) -> bytes:
        return crypto.canonical(self.rater, self.ratee, repr(float(self.value)), self.mode)

    @classmethod
    def decode(cls, data: bytes) -> "ScoreUpdatePayload":
        rater, ratee, value, mode = decode_fields(data)
        return cls(rater.decode(), ratee.decode(), float(value.decode()), mode.decode())


_PAYLOADS = {
    Kind.COMMIT: CommitPayload,
    Kind.REVEAL: RevealPayload,
    Kind.AGG_SIGNATURE: AggSignaturePayload,
    Kind.SCORE_UPDATE: ScoreUpdatePayload,
}


# -- messages and blocks -----------------------------------------------------


@dataclass(frozen=True)
class LedgerMessage:
    kind: Kind
    author: bytes
    payload: bytes
    author_signature: Proof

    @staticmethod
    def signing_bytes(kind: Kind, payload: bytes) -> bytes:
        return crypto.canonical(kind.value, payload)

    @classmethod
    def create(cls, kind: Kind, payload, keys: KeyPair) -> "LedgerMessage":
        raw = payload if isinstance(payload, bytes) else payload.encode()
        proof = crypto.sign_message(keys.secret_key, cls.signing_bytes(kind, raw))
        return cls(kind, keys.public_key, raw, proof)

    @cached_property
    def digest(self) -> Digest:
        return crypto.hash_bytes(crypto.canonical(self.kind.value, self.author, self.payload))

    @cached_property
    def body(self):
        return _PAYLOADS[self.kind].decode(self.payload)

    def decoded(self):
        return self.body

    def signature_ok(self) -> bool:
        return self.author_signature.signer == self.author and crypto.verify_proof(
            self.author_signature, self.signing_bytes(self.kind, self.payload)
        )


@dataclass(frozen=True)
class ConsulSet:
    members: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def quorum(self) -> int:
        return quorum_size(self.size)


def quorum_size(m: int) -> int:
    return (2 * m) // 3 + 1


@dataclass
class LedgerBlock:
    height: int
    parent_digest: Digest
    messages: list[LedgerMessage]
    proposer: str
    tick: int
    finality_proofs: list[Proof] = field(default_factory=list)

    def header_bytes(self) -> bytes:
        return crypto.canonical(
            self.height,
            self.parent_digest,
            self.proposer,
            self.tick,
            len(self.messages),
            b"".join(m.digest for m in self.messages),
        )

    @property
    def digest(self) -> Digest:
        return crypto.hash_bytes(self.header_bytes())

    def record(self) -> dict:
        return {
            "height": self.height,
            "tick": self.tick,
            "digest": self.digest.hex(),
            "parent": self.parent_digest.hex(),
            "proposer": self.proposer,
            "messages": len(self.messages),
            "message_digests": [m.digest.hex() for m in self.messages],
            "proofs": len(self.finality_proofs),
        }


def select_consuls(scores: Mapping[str, float], m: int) -> tuple[str, ...]:
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return tuple(nid for nid, _ in ranked[:m])


class Ledger:
    """Append-only chain of blocks; only finalised messages are readable."""

    def __init__(self, consul_count: int = 5):
        self.consul_count = consul_count
        self.authors: dict[bytes, str] = {}
        self.consul_keys: dict[str, bytes] = {}
        self.consuls = ConsulSet(())
        self.pending: list[LedgerMessage] = []
        self._seen: set[bytes] = set()
        self.blocks: list[LedgerBlock] = []
        self._block_consuls: list[ConsulSet] = []
        self._index: dict[tuple, list[LedgerMessage]] = {}
        self.warnings: list[str] = []

    # registry

    def register_author(self, node_id: str, public_key: bytes) -> None:
        self.authors[public_key] = node_id
        self.consul_keys[node_id] = public_key

    def unregister_author(self, public_key: bytes) -> None:
        self.authors.pop(public_key, None)

    def author_id(self, public_key: bytes) -> Optional[str]:
        return self.authors.get(public_key)

    # messages

    def submit(self, msg: LedgerMessage) -> Digest:
        if msg.author not in self.authors:
            raise MessageRejected(RejectReason.UNKNOWN_AUTHOR)
        if not msg.signature_ok():
            raise MessageRejected(RejectReason.BAD_SIGNATURE)
        d = msg.digest
        if d in self._seen:
            raise MessageRejected(RejectReason.DUPLICATE)
        self._seen.add(d)
        self.pending.append(msg)
        return d

    @property
    def height(self) -> int:
        return len(self.blocks)

    @property
    def head_digest(self) -> Digest:
        return self.blocks[-1].digest if self.blocks else crypto.ZERO_DIGEST

    def finalize_block(
        self,
        tick: int,
        signers: Mapping[str, KeyPair],
        withholding: Iterable[str] = (),
    ) -> LedgerBlock:
        """Propose the pending pool and collect consul proofs.

        ``signers`` maps consul ids to their IDL keys; consuls in ``withholding``
        do not sign.  Raises :class:`NoQuorum` and keeps messages pending if
        fewer than a quorum sign.
        """
        if not self.consuls.members:
            raise RuntimeError("consul set is empty")
        height = self.height
        proposer = self.consuls.members[height % self.consuls.size]
        messages = sorted(self.pending, key=lambda m: (m.author, m.digest))
        block = LedgerBlock(height, self.head_digest, messages, proposer, tick)
        header_digest = block.digest
        withheld = set(withholding)
        proofs = []
        for cid in self.consuls.members:
            if cid in withheld or cid not in signers:
                continue
            proofs.append(crypto.sign_message(signers[cid].secret_key, header_digest))
        if len(proofs) < self.consuls.quorum:
            raise NoQuorum(len(proofs), self.consuls.quorum)
        block.finality_proofs = proofs
        self.blocks.append(block)
        self._block_consuls.append(self.consuls)
        self.pending = []
        for msg in messages:
            self._index_message(msg)
        return block

    def _index_message(self, msg: LedgerMessage) -> None:
        self._index.setdefault((msg.kind,), []).append(msg)
        if msg.kind is Kind.SCORE_UPDATE:
            return
        body = msg.decoded()
        if msg.kind is Kind.COMMIT:
            feed, rnd = body.commitment.feed_id, body.commitment.round
        elif msg.kind is Kind.REVEAL:
            feed, rnd = body.reveal.feed_id, body.reveal.round
        else:
            feed, rnd = body.feed_id, body.round
        self._index.setdefault((msg.kind, feed, rnd), []).append(msg)

    def read_messages(
        self,
        kind: Kind,
        feed_id: Optional[str] = None,
        round: Optional[int] = None,
        nebula_id: Optional[str] = None,
    ) -> list[LedgerMessage]:
        if feed_id is None or round is None:
            msgs = list(self._index.get((kind,), []))
            if feed_id is not None or round is not None:
                msgs = [m for m in msgs if _matches(m, feed_id, round)]
        else:
            msgs = list(self._index.get((kind, feed_id, round), []))
        if nebula_id is not None:
            msgs = [m for m in msgs if m.decoded().nebula_id == nebula_id]
        return msgs

    # consuls

    def rotate_consuls(self, gravity_scores: Mapping[str, float]) -> ConsulSet:
        if len(gravity_scores) < self.consul_count:
            msg = (
                f"only {len(gravity_scores)} registered nodes for {self.consul_count} consul seats; "
                "keeping previous consul set"
            )
            log.warning(msg)
            self.warnings.append(msg)
            return self.consuls
        self.consuls = ConsulSet(select_consuls(gravity_scores, self.consul_count))
        return self.consuls

    def set_consuls(self, members: Sequence[str]) -> None:
        self.consuls = ConsulSet(tuple(members))

    # integrity

    def verify_chain(self) -> bool:
        parent = crypto.ZERO_DIGEST
        for i, (block, consuls) in enumerate(zip(self.blocks, self._block_consuls)):
            if block.height != i or block.parent_digest != parent:
                return False
            d = block.digest
            keys = {self.consul_keys.get(c) for c in consuls.members}
            signers = set()
            for proof in block.finality_proofs:
                if proof.signer in keys and crypto.verify_proof(proof, d):
                    signers.add(proof.signer)
            if len(signers) < consuls.quorum:
                return False
            parent = d
        return True

    def dump(self) -> str:
        return "".join(json.dumps(b.record(), sort_keys=True) + "\n" for b in self.blocks)


def _matches(msg: LedgerMessage, feed_id, round) -> bool:
    body = msg.decoded()
    if msg.kind is Kind.COMMIT:
        f, r = body.commitment.feed_id, body.commitment.round
    elif msg.kind is Kind.REVEAL:
        f, r = body.reveal.feed_id, body.reveal.round
    elif msg.kind is Kind.AGG_SIGNATURE:
        f, r = body.feed_id, body.round
    else:
        return False
    return (feed_id is None or f == feed_id) and (round is None or r == round)
