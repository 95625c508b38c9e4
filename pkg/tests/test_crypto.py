"""Hashing, signatures, commitments and the canonical encoding."""
from __future__ import annotations

import hashlib
import struct

import pytest
from hypothesis import given, settings, strategies as st

from dca import crypto
from dca.encoding import DecodeError, Reader, Writer

# RFC 8032, section 7.1, TEST 1 (empty message) and TEST 2 (one octet).
RFC_SK1 = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
RFC_PK1 = bytes.fromhex("d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a")
RFC_SIG1 = bytes.fromhex(
    "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b")
RFC_SK2 = bytes.fromhex("4ccd089b28ff96da9db6c346ec114e0f5b8a319f35aba624da8cf6ed4fb8a6fb")
RFC_PK2 = bytes.fromhex("3d4017c3e843895a92b70aa74d1b7ebc9c982ccf2ec4968cc0cd55f12af4660c")
RFC_SIG2 = bytes.fromhex(
    "92a009a9f0d4cab8720e820b5f642540a2b27b5416503f8fb3762223ebdb69da085ac1e43e15996e458f3613d0f11d8c387b2eaeb4302aeeb00d291612bb0c00")


def test_digest_is_sha256():
    assert crypto.digest(b"abc").hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


@pytest.mark.parametrize("sk,pk,msg,sig", [
    (RFC_SK1, RFC_PK1, b"", RFC_SIG1),
    (RFC_SK2, RFC_PK2, b"\x72", RFC_SIG2),
])
def test_ed25519_rfc8032_vectors(sk, pk, msg, sig):
    assert crypto.public_key_of(sk) == pk
    assert crypto.sign(sk, msg) == sig
    assert crypto.verify(pk, msg, sig)


def test_verify_rejects_tampering_and_bad_lengths():
    assert not crypto.verify(RFC_PK1, b"x", RFC_SIG1)
    bad = bytearray(RFC_SIG1)
    bad[0] ^= 1
    assert not crypto.verify(RFC_PK1, b"", bytes(bad))
    assert not crypto.verify(RFC_PK1[:31], b"", RFC_SIG1)
    assert not crypto.verify(RFC_PK1, b"", RFC_SIG1[:63])


def test_keypair_from_seed_is_deterministic():
    a, b = crypto.KeyPair.from_seed("voice/1/0"), crypto.KeyPair.from_seed("voice/1/0")
    assert a == b
    # Independent derivation: secret = SHA-256(tag || seed), public from the RFC scalar rule.
    assert a.secret_key == hashlib.sha256(b"dca/keygen/v1" + b"voice/1/0").digest()
    assert crypto.KeyPair.from_seed(7).secret_key == hashlib.sha256(
        b"dca/keygen/v1" + (7).to_bytes(8, "big")).digest()
    assert crypto.KeyPair.from_seed("voice/1/1") != a


def test_invalid_secret_key():
    with pytest.raises(crypto.InvalidKeyError):
        crypto.sign(b"short", b"m")


@settings(max_examples=50, deadline=None)
@given(st.binary(min_size=16, max_size=64), st.binary(min_size=16, max_size=64))
def test_commitment_binds_to_secret(secret, other):
    c = crypto.commit(secret)
    assert c.digest == hashlib.sha256(b"dca/commit/v1" + secret).digest()
    assert crypto.open_commitment(c, secret)
    assert crypto.open_commitment(c, other) == (other == secret)


@pytest.mark.parametrize("n", [0, 15, 65])
def test_commit_rejects_bad_secret_length(n):
    with pytest.raises(ValueError):
        crypto.commit(bytes(n))


@settings(max_examples=50, deadline=None)
@given(st.binary(max_size=200), st.binary(min_size=1, max_size=300))
def test_signatures_verify_and_bind_message(message, seed):
    keys = crypto.KeyPair.from_seed(seed)
    sig = keys.sign(message)
    assert crypto.verify(keys.public_key, message, sig)
    assert not crypto.verify(keys.public_key, message + b"\x00", sig)


def test_encoding_is_big_endian_with_length_prefixes():
    data = Writer().u8(1).u32(2).u64(3).bool(True).blob(b"ab").raw(b"z").getvalue()
    assert data == struct.pack(">BIQB", 1, 2, 3, 1) + b"\x00\x00\x00\x02ab" + b"z"


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 255), st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1),
       st.booleans(), st.binary(max_size=64))
def test_encoding_round_trip(a, b, c, d, e):
    data = Writer().u8(a).u32(b).u64(c).bool(d).blob(e).getvalue()
    r = Reader(data)
    assert (r.u8(), r.u32(), r.u64(), r.bool(), r.blob()) == (a, b, c, d, e)
    r.expect_done()


def test_decoder_errors():
    with pytest.raises(DecodeError):
        Reader(b"\x00\x00\x00\x05ab").blob()
    with pytest.raises(DecodeError):
        Reader(b"\x02").bool()
    with pytest.raises(DecodeError):
        Reader(b"\x00\x01").expect_done()
    with pytest.raises(ValueError):
        Writer().u64(-1)
