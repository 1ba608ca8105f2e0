"""Signing keys and signature verification.

The default scheme is RSA-2048 with PKCS#1 v1.5 padding over SHA-256. Ed25519
is available as a faster drop-in for tests; verification dispatches on the
type of the DER-encoded public key, so callers never name the scheme.
"""
from __future__ import annotations

import random
from functools import lru_cache

import gmpy2
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, padding, rsa

from .hashing import H

RSA_BITS = 2048
RSA_EXPONENT = 65537


class KeyPair:
    def __init__(self, private_key):
        self._private = private_key
        self.public_der: bytes = private_key.public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        )

    @property
    def address(self) -> bytes:
        return address_of(self.public_der)

    @property
    def scheme(self) -> str:
        return "rsa" if isinstance(self._private, rsa.RSAPrivateKey) else "ed25519"

    def sign(self, message: bytes) -> bytes:
        if isinstance(self._private, rsa.RSAPrivateKey):
            return self._private.sign(message, padding.PKCS1v15(), hashes.SHA256())
        return self._private.sign(message)

    def to_pkcs8(self) -> bytes:
        return self._private.private_bytes(
            serialization.Encoding.DER,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )

    @classmethod
    def from_pkcs8(cls, der: bytes) -> "KeyPair":
        return cls(serialization.load_der_private_key(der, password=None))

    def __repr__(self) -> str:
        return f"KeyPair({self.scheme}, {self.address.hex()})"


def address_of(public_der: bytes) -> bytes:
    return H(public_der)[:20]


def _prime(rng: random.Random, bits: int) -> int:
    while True:
        candidate = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(candidate))
        if p.bit_length() == bits and gmpy2.gcd(p - 1, RSA_EXPONENT) == 1:
            return p


def rsa_keypair(seed: int | bytes | str, bits: int = RSA_BITS) -> KeyPair:
    """Derive an RSA key pair deterministically from ``seed``.

    Used so that simulated runs are reproducible; the primes come from a
    seeded PRNG and are not suitable for real deployments.
    """
    rng = random.Random(H(b"rsa-keygen:" + _seed_bytes(seed)))
    while True:
        p = _prime(rng, bits // 2)
        q = _prime(rng, bits // 2)
        n = p * q
        if p != q and n.bit_length() == bits:
            break
    if p < q:
        p, q = q, p
    priv_exp = int(gmpy2.invert(RSA_EXPONENT, (p - 1) * (q - 1)))
    numbers = rsa.RSAPrivateNumbers(
        p=p,
        q=q,
        d=priv_exp,
        dmp1=rsa.rsa_crt_dmp1(priv_exp, p),
        dmq1=rsa.rsa_crt_dmq1(priv_exp, q),
        iqmp=rsa.rsa_crt_iqmp(p, q),
        public_numbers=rsa.RSAPublicNumbers(RSA_EXPONENT, n),
    )
    return KeyPair(numbers.private_key())


def ed25519_keypair(seed: int | bytes | str) -> KeyPair:
    return KeyPair(ed25519.Ed25519PrivateKey.from_private_bytes(H(b"ed25519:" + _seed_bytes(seed))))


def keypair(seed: int | bytes | str, scheme: str = "rsa") -> KeyPair:
    if scheme == "rsa":
        return rsa_keypair(seed)
    if scheme == "ed25519":
        return ed25519_keypair(seed)
    raise ValueError(f"unknown signature scheme {scheme!r}")


def _seed_bytes(seed: int | bytes | str) -> bytes:
    if isinstance(seed, bytes):
        return seed
    if isinstance(seed, int):
        return seed.to_bytes(16, "big", signed=True)
    return seed.encode()


@lru_cache(maxsize=4096)
def _load_public(public_der: bytes):
    return serialization.load_der_public_key(public_der)


def verify_signature(public_der: bytes, message: bytes, signature: bytes) -> bool:
    """SigVrfy: true iff ``signature`` over ``message`` verifies under the key."""
    try:
        key = _load_public(bytes(public_der))
    except (ValueError, TypeError):
        return False
    try:
        if isinstance(key, rsa.RSAPublicKey):
            key.verify(signature, message, padding.PKCS1v15(), hashes.SHA256())
        elif isinstance(key, ed25519.Ed25519PublicKey):
            key.verify(signature, message)
        else:
            return False
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def der_length(data: bytes) -> int:
    """Total length of the DER TLV at the head of ``data``."""
    if len(data) < 2:
        raise ValueError("truncated DER")
    first = data[1]
    if first < 0x80:
        return 2 + first
    n = first & 0x7F
    if n == 0 or n > 4 or len(data) < 2 + n:
        raise ValueError("bad DER length")
    return 2 + n + int.from_bytes(data[2 : 2 + n], "big")
