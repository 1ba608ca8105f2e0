import hashlib

HASH_NAME = "sha256"
DIGEST_SIZE = 32

Digest = bytes


def H(data: bytes) -> Digest:
    return hashlib.sha256(data).digest()


def u64(n: int) -> bytes:
    return n.to_bytes(8, "big")


def word(n: int) -> bytes:
    """Encode a non-negative integer as a 32-byte big-endian storage word."""
    return n.to_bytes(32, "big")


def from_word(b: bytes) -> int:
    return int.from_bytes(b, "big")
