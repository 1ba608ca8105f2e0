"""TLS-client side: a header-only light client and the certificate check."""
from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from typing import Iterable

from .chain import Account, BlockHeader
from .codec import DecodeError
from .contracts import CertStorage
from .domain import SmartCertCertificate
from .hashing import H, Digest
from .trie import verify as verify_proof

REASONS = (
    "DECODE_ERROR",
    "UNKNOWN_ROOT",
    "PROOF_INCONSISTENT",
    "BAD_CODE",
    "BAD_STORAGE_PROOF",
    "NAME_MISMATCH",
    "INVALID",
    "STALE",
)


class BrokenChain(Exception):
    def __init__(self, header: BlockHeader, appended: int):
        super().__init__(f"header {header.number} does not extend the stored chain")
        self.header = header
        self.appended = appended


class HeaderStore:
    """Contiguous window of recent headers, pruned to ``prune_horizon`` seconds.

    The first header accepted is trusted as a checkpoint; every later one must
    extend the newest stored header.
    """

    def __init__(self, prune_horizon: int):
        self.prune_horizon = prune_horizon
        self._headers: deque[BlockHeader] = deque()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._headers)

    @property
    def newest(self) -> BlockHeader | None:
        return self._headers[-1] if self._headers else None

    @property
    def oldest(self) -> BlockHeader | None:
        return self._headers[0] if self._headers else None

    def sync(self, feed: Iterable[BlockHeader]) -> int:
        appended = 0
        with self._lock:
            for header in feed:
                tip = self._headers[-1] if self._headers else None
                if tip is not None:
                    if header.number <= tip.number:
                        continue  # already known
                    if header.number != tip.number + 1 or header.parent_hash != tip.hash \
                            or header.timestamp <= tip.timestamp:
                        self._prune(tip.timestamp)
                        raise BrokenChain(header, appended)
                self._headers.append(header)
                appended += 1
            if self._headers:
                self._prune(self._headers[-1].timestamp)
        return appended

    def _prune(self, now: int) -> None:
        horizon = now - self.prune_horizon
        while len(self._headers) > 1 and self._headers[0].timestamp < horizon:
            self._headers.popleft()

    def get(self, number: int) -> BlockHeader | None:
        headers = self._headers
        if not headers:
            return None
        i = number - headers[0].number
        if 0 <= i < len(headers):
            return headers[i]
        return None

    def serialize(self) -> bytes:
        return b"".join(h.serialize() for h in self._headers)

    @classmethod
    def from_bytes(cls, data: bytes, prune_horizon: int) -> "HeaderStore":
        if len(data) % BlockHeader.SIZE:
            raise ValueError("header dump length is not a multiple of the header size")
        store = cls(prune_horizon)
        size = BlockHeader.SIZE
        store.sync(BlockHeader.parse(data[i : i + size]) for i in range(0, len(data), size))
        return store


@dataclass(frozen=True)
class TrustAnchors:
    code_hash: Digest
    max_stale: int


@dataclass(frozen=True)
class Verdict:
    reason: str
    st: CertStorage | None = None

    @property
    def ok(self) -> bool:
        return self.reason == "OK"


def verify_cert(name: str, cert: bytes | SmartCertCertificate, time_now: int,
                headers: HeaderStore, anchors: TrustAnchors) -> Verdict:
    """Offline certificate check against stored headers and the pinned code hash.

    Checks run in a fixed order and the first failure is reported.
    """
    if isinstance(cert, (bytes, bytearray)):
        try:
            cert = SmartCertCertificate.parse(bytes(cert))
        except (ValueError, UnicodeDecodeError):
            return Verdict("DECODE_ERROR")

    header = headers.get(cert.anchor)
    if header is None:
        return Verdict("UNKNOWN_ROOT")

    acct_proof = cert.account_proof
    if acct_proof.key != H(cert.addr) or not verify_proof(header.state_root, acct_proof):
        return Verdict("PROOF_INCONSISTENT")
    try:
        account = Account.parse(acct_proof.value)
    except ValueError:
        return Verdict("PROOF_INCONSISTENT")
    labels = [label for label, _ in cert.slots]
    if len(set(labels)) != len(labels):
        return Verdict("PROOF_INCONSISTENT")
    for label, proof in cert.slots:
        if proof.key != H(label.encode("ascii")):
            return Verdict("PROOF_INCONSISTENT")

    if account.code_hash != anchors.code_hash:
        return Verdict("BAD_CODE")

    for _, proof in cert.slots:
        if not verify_proof(account.storage_root, proof):
            return Verdict("BAD_STORAGE_PROOF")

    try:
        st = cert.st
    except DecodeError:
        return Verdict("DECODE_ERROR")

    if st.domain_name != name:
        return Verdict("NAME_MISMATCH", st)
    if not st.valid:
        return Verdict("INVALID", st)
    if time_now - st.updated > anchors.max_stale:
        return Verdict("STALE", st)
    return Verdict("OK", st)


class CertValidator:
    """Binds a header store and trust anchors; has no handle on the chain."""

    def __init__(self, headers: HeaderStore, anchors: TrustAnchors):
        self.headers = headers
        self.anchors = anchors

    def verify(self, name: str, cert: bytes | SmartCertCertificate, now: int) -> Verdict:
        return verify_cert(name, cert, now, self.headers, self.anchors)
