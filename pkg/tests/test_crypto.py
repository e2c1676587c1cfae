import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gravity_oracle import crypto
from gravity_oracle.crypto import KeyPair, Reveal, RevealCheck, RevealMismatch

SALT = bytes(range(32))
fields = st.one_of(st.integers(-(2**63), 2**63 - 1), st.text(max_size=40), st.binary(max_size=40))


def test_canonical_layout_by_hand():
    # 4-byte length prefix, then the raw field.
    expected = (
        b"\x00\x00\x00\x03btc"
        + b"\x00\x00\x00\x08" + (7).to_bytes(8, "big")
        + b"\x00\x00\x00\x02\xff\x00"
    )
    assert crypto.canonical("btc", 7, b"\xff\x00") == expected


def test_negative_int_is_twos_complement():
    assert crypto.encode_field(-1) == b"\x00\x00\x00\x08" + b"\xff" * 8


def test_bool_rejected():
    with pytest.raises(TypeError):
        crypto.encode_field(True)


def test_digest_length_enforced():
    with pytest.raises(ValueError):
        crypto.Digest(b"short")
    assert crypto.hash_bytes(b"abc") == hashlib.sha256(b"abc").digest()


@given(st.lists(st.binary(max_size=12), max_size=5), st.lists(st.binary(max_size=12), max_size=5))
def test_canonical_is_injective_over_field_lists(a, b):
    # Field types come from the message schema, so injectivity is per type.
    assert (crypto.canonical(*a) == crypto.canonical(*b)) == (a == b)


def test_keypair_is_deterministic_and_sizes():
    a = KeyPair.from_seed(b"node-1")
    b = KeyPair.from_seed(b"node-1")
    assert a == b
    assert len(a.public_key) == 32
    assert KeyPair.from_seed(b"node-2").public_key != a.public_key


def test_signatures_deterministic_and_verify():
    kp = KeyPair.from_seed(b"k")
    p1 = crypto.sign_message(kp.secret_key, b"msg")
    p2 = crypto.sign_message(kp.secret_key, b"msg")
    assert p1 == p2
    assert p1.signer == kp.public_key
    assert crypto.verify_proof(p1, b"msg")
    assert not crypto.verify_proof(p1, b"msg2")


def test_verify_rejects_wrong_signer_and_garbage():
    kp, other = KeyPair.from_seed(b"a"), KeyPair.from_seed(b"b")
    proof = crypto.sign_message(kp.secret_key, b"m")
    assert not crypto.verify_proof(crypto.Proof(proof.signature, other.public_key), b"m")
    assert not crypto.verify_proof(crypto.Proof(b"\x00" * 64, b"bad"), b"m")


@settings(max_examples=30)
@given(st.binary(max_size=64), st.integers(0, 63))
def test_bitflip_breaks_signature(msg, bit):
    kp = KeyPair.from_seed(b"flip")
    proof = crypto.sign_message(kp.secret_key, msg)
    sig = bytearray(proof.signature)
    sig[bit // 8] ^= 1 << (bit % 8)
    assert not crypto.verify_proof(crypto.Proof(bytes(sig), proof.signer), msg)


def test_commit_reveal_roundtrip():
    author = KeyPair.from_seed(b"x").public_key
    c = crypto.make_commitment("eth_usd", 3, 2001, SALT, author)
    assert crypto.open_reveal(c, Reveal(2001, SALT, "eth_usd", 3, author)) is RevealCheck.VALID


def test_changed_value_is_fraud():
    c = crypto.make_commitment("eth_usd", 3, 2001, SALT)
    assert crypto.open_reveal(c, Reveal(2008, SALT, "eth_usd", 3, b"")) is RevealCheck.FRAUDULENT


def test_changed_salt_is_fraud():
    c = crypto.make_commitment("eth_usd", 3, 2001, SALT)
    other = bytes(32)
    assert crypto.open_reveal(c, Reveal(2001, other, "eth_usd", 3, b"")) is RevealCheck.FRAUDULENT


def test_short_salt_is_fraud_not_crash():
    c = crypto.make_commitment("eth_usd", 3, 2001, SALT)
    assert crypto.open_reveal(c, Reveal(2001, b"x", "eth_usd", 3, b"")) is RevealCheck.FRAUDULENT


def test_reveal_for_other_round_raises():
    c = crypto.make_commitment("eth_usd", 3, 2001, SALT)
    with pytest.raises(RevealMismatch):
        crypto.open_reveal(c, Reveal(2001, SALT, "eth_usd", 4, b""))


def test_commitment_needs_full_salt():
    with pytest.raises(ValueError):
        crypto.commitment_digest("f", 0, 1, b"abc")


def test_int_and_string_values_commit_differently():
    assert crypto.commitment_digest("f", 0, 1, SALT) != crypto.commitment_digest("f", 0, "1", SALT)


@settings(max_examples=50)
@given(fields, fields, st.binary(min_size=32, max_size=32))
def test_binding(v1, v2, salt):
    c = crypto.make_commitment("f", 1, v1, salt)
    check = crypto.open_reveal(c, Reveal(v2, salt, "f", 1, b""))
    same = crypto.canonical(v1) == crypto.canonical(v2)
    assert (check is RevealCheck.VALID) == same
