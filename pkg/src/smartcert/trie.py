# Sparse binary Merkle trie over 256-bit keys.
#
# leaf     = H(0x00 || key || H(value))
# internal = H(0x01 || left || right)
# empty subtree of height h = E[h], E[0] = H(0x02), E[h+1] = H(0x01 || E[h] || E[h])
#
# Depth 0 is the root, depth 256 the leaves; bit d of a key (MSB first)
# selects the child taken when leaving depth d.
from __future__ import annotations

import struct
from bisect import bisect_left
from dataclasses import dataclass

from .hashing import H, Digest

KEY_BITS = 256


def _empty_chain() -> list[Digest]:
    chain = [H(b"\x02")]
    for _ in range(KEY_BITS):
        chain.append(H(b"\x01" + chain[-1] + chain[-1]))
    return chain


EMPTY = _empty_chain()
EMPTY_ROOT = EMPTY[KEY_BITS]


class KeyAbsent(KeyError):
    pass


def leaf_hash(key: bytes, value: bytes) -> Digest:
    return H(b"\x00" + key + H(value))


def _bit(k: int, depth: int) -> int:
    return (k >> (KEY_BITS - 1 - depth)) & 1


def _combine(h: Digest, sibling: Digest, bit: int) -> Digest:
    if bit:
        return H(b"\x01" + sibling + h)
    return H(b"\x01" + h + sibling)


@dataclass(frozen=True)
class InclusionProof:
    key: bytes
    value: bytes
    bitmap: bytes  # 32 bytes, bit d (MSB first) set when the sibling at depth d is non-default
    siblings: tuple[Digest, ...]  # root -> leaf order

    def to_bytes(self) -> bytes:
        return (
            self.key
            + struct.pack(">I", len(self.value))
            + self.value
            + self.bitmap
            + b"".join(self.siblings)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "InclusionProof":
        proof, rest = cls.parse(data)
        if rest:
            raise ValueError("trailing bytes after proof")
        return proof

    @classmethod
    def parse(cls, data: bytes) -> tuple["InclusionProof", bytes]:
        """Decode a proof from the head of ``data``; return it with the unread tail.

        The sibling count is taken from the bitmap's popcount.
        """
        if len(data) < 36:
            raise ValueError("truncated proof")
        key = data[:32]
        (vlen,) = struct.unpack(">I", data[32:36])
        pos = 36 + vlen
        value = data[36:pos]
        bitmap = data[pos : pos + 32]
        if len(value) != vlen or len(bitmap) != 32:
            raise ValueError("truncated proof")
        pos += 32
        n = popcount(bitmap)
        end = pos + 32 * n
        if len(data) < end:
            raise ValueError("truncated proof")
        siblings = tuple(data[pos + 32 * i : pos + 32 * (i + 1)] for i in range(n))
        return cls(key, value, bitmap, siblings), data[end:]


def popcount(bitmap: bytes) -> int:
    return int.from_bytes(bitmap, "big").bit_count()


class Trie:
    """Authenticated map from 32-byte keys to non-empty byte strings.

    The root depends only on the set of entries. Node hashes at branching
    points are memoised until the next mutation.
    """

    def __init__(self, entries: dict[bytes, bytes] | None = None):
        self._entries: dict[int, bytes] = {}
        self._sorted: list[int] | None = None
        self._memo: dict[tuple[int, int], Digest] = {}
        self._root: Digest | None = None
        for k, v in (entries or {}).items():
            self.put(k, v)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: bytes) -> bool:
        return int.from_bytes(key, "big") in self._entries

    def copy(self) -> "Trie":
        t = Trie()
        t._entries = dict(self._entries)
        t._root = self._root
        return t

    def items(self):
        for k in sorted(self._entries):
            yield k.to_bytes(32, "big"), self._entries[k]

    def get(self, key: bytes) -> bytes | None:
        return self._entries.get(int.from_bytes(key, "big"))

    def put(self, key: bytes, value: bytes) -> None:
        if len(key) != 32:
            raise ValueError("trie keys are 32 bytes")
        if not value:
            self.delete(key)
            return
        k = int.from_bytes(key, "big")
        if self._entries.get(k) == value:
            return
        self._entries[k] = bytes(value)
        self._invalidate()

    def delete(self, key: bytes) -> None:
        k = int.from_bytes(key, "big")
        if k in self._entries:
            del self._entries[k]
            self._invalidate()

    def _invalidate(self) -> None:
        self._sorted = None
        self._memo.clear()
        self._root = None

    def _keys(self) -> list[int]:
        if self._sorted is None:
            self._sorted = sorted(self._entries)
        return self._sorted

    @property
    def root(self) -> Digest:
        if self._root is None:
            keys = self._keys()
            self._root = self._subtree(0, len(keys), 0)
        return self._root

    def _leaf(self, k: int) -> Digest:
        return leaf_hash(k.to_bytes(32, "big"), self._entries[k])

    def _lift(self, h: Digest, k: int, from_depth: int, to_depth: int) -> Digest:
        # carry a lone subtree hash at from_depth up to to_depth through empty siblings
        for d in range(from_depth - 1, to_depth - 1, -1):
            h = _combine(h, EMPTY[KEY_BITS - 1 - d], _bit(k, d))
        return h

    def _subtree(self, lo: int, hi: int, depth: int) -> Digest:
        """Hash of the subtree at ``depth`` holding sorted keys[lo:hi]."""
        if lo == hi:
            return EMPTY[KEY_BITS - depth]
        keys = self._keys()
        first = keys[lo]
        if hi - lo == 1:
            return self._lift(self._leaf(first), first, KEY_BITS, depth)
        last = keys[hi - 1]
        # depth of the branching node: length of the common prefix
        branch = KEY_BITS - (first ^ last).bit_length()
        memo_key = (branch, lo)
        h = self._memo.get(memo_key)
        if h is None:
            mid = self._split(lo, hi, branch)
            h = H(b"\x01" + self._subtree(lo, mid, branch + 1) + self._subtree(mid, hi, branch + 1))
            self._memo[memo_key] = h
        return self._lift(h, first, branch, depth)

    def _split(self, lo: int, hi: int, depth: int) -> int:
        keys = self._keys()
        shift = KEY_BITS - 1 - depth
        threshold = ((keys[lo] >> shift) | 1) << shift
        return bisect_left(keys, threshold, lo, hi)

    def prove(self, key: bytes) -> InclusionProof:
        k = int.from_bytes(key, "big")
        if k not in self._entries:
            raise KeyAbsent(key.hex())
        self.root  # populate memo
        lo, hi = 0, len(self._keys())
        bits = 0
        siblings = []
        for depth in range(KEY_BITS):
            if hi - lo == 1:
                break  # every remaining sibling is empty
            mid = self._split(lo, hi, depth)
            if _bit(k, depth):
                sib = (lo, mid)
                lo = mid
            else:
                sib = (mid, hi)
                hi = mid
            if sib[0] != sib[1]:
                bits |= 1 << (KEY_BITS - 1 - depth)
                siblings.append(self._subtree(sib[0], sib[1], depth + 1))
        return InclusionProof(
            key=bytes(key),
            value=self._entries[k],
            bitmap=bits.to_bytes(32, "big"),
            siblings=tuple(siblings),
        )


def verify(root: Digest, proof: InclusionProof) -> bool:
    """Recompute the path hash from ``proof`` and compare it to ``root``."""
    try:
        if len(proof.key) != 32 or len(proof.bitmap) != 32 or len(root) != 32:
            return False
        if len(proof.siblings) != popcount(proof.bitmap):
            return False
        if any(len(s) != 32 for s in proof.siblings):
            return False
        k = int.from_bytes(proof.key, "big")
        bitmap = int.from_bytes(proof.bitmap, "big")
        h = leaf_hash(proof.key, proof.value)
        idx = len(proof.siblings)
        for depth in range(KEY_BITS - 1, -1, -1):
            if (bitmap >> (KEY_BITS - 1 - depth)) & 1:
                idx -= 1
                sib = proof.siblings[idx]
            else:
                sib = EMPTY[KEY_BITS - 1 - depth]
            h = _combine(h, sib, _bit(k, depth))
        return h == root
    except (TypeError, AttributeError):
        return False
