"""Domain side: certificate assembly, staple refresh and policy bootstrap."""
from __future__ import annotations

import logging
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterable

from . import crypto
from .chain import Chain, Transaction, UnknownAccount
from .contracts import (
    CERT_TEMPLATE,
    POLICY_ADDRESS,
    CertStorage,
    Policy,
    cert_labels,
    decode_cert,
    encode_init,
    encode_new_policy,
)
from .handshake import HandshakeServer
from .trie import InclusionProof

log = logging.getLogger(__name__)


class UnknownContract(Exception):
    pass


@dataclass(frozen=True)
class SmartCertCertificate:
    """Contract address, anchor block and the proofs for every storage slot.

    ``account_proof`` serves both as the code proof (it exposes codeHash) and
    as the root of the storage proofs (it exposes storageRoot).
    """

    addr: bytes
    anchor: int
    account_proof: InclusionProof
    slots: tuple[tuple[str, InclusionProof], ...]

    def serialize(self) -> bytes:
        out = [self.addr, struct.pack(">Q", self.anchor), self.account_proof.to_bytes(),
               struct.pack(">H", len(self.slots))]
        for label, proof in self.slots:
            raw = label.encode("ascii")
            out.append(bytes([len(raw)]) + raw + proof.to_bytes())
        return b"".join(out)

    @classmethod
    def parse(cls, data: bytes) -> "SmartCertCertificate":
        if len(data) < 28:
            raise ValueError("truncated certificate")
        addr = data[:20]
        (anchor,) = struct.unpack(">Q", data[20:28])
        account_proof, rest = InclusionProof.parse(data[28:])
        if len(rest) < 2:
            raise ValueError("truncated certificate")
        (count,) = struct.unpack(">H", rest[:2])
        rest = rest[2:]
        slots = []
        for _ in range(count):
            if not rest:
                raise ValueError("truncated certificate")
            n = rest[0]
            label = rest[1 : 1 + n].decode("ascii")
            proof, rest = InclusionProof.parse(rest[1 + n :])
            slots.append((label, proof))
        if rest:
            raise ValueError("trailing bytes after certificate")
        return cls(addr, anchor, account_proof, tuple(slots))

    @property
    def st(self) -> CertStorage:
        """Storage decoded from the proven slot values (unverified until a client checks it)."""
        values = {label: proof.value for label, proof in self.slots}
        return decode_cert(values.get)


def assemble_certificate(chain: Chain, addr: bytes) -> SmartCertCertificate:
    try:
        storage = chain.storage(addr)
    except UnknownAccount:
        raise UnknownContract(addr.hex()) from None
    labels = cert_labels(storage.get)
    _, account_proof, slots = chain.get_storage_proof(addr, labels)
    return SmartCertCertificate(
        addr=addr,
        anchor=chain.height,
        account_proof=account_proof,
        slots=tuple((label, proof) for label, (_, proof) in zip(labels, slots)),
    )


class CASigner:
    """Co-signing service a CA runs for policy registration requests."""

    def __init__(self, key: crypto.KeyPair):
        self.key = key

    @property
    def address(self) -> bytes:
        return self.key.address

    def sign_policy(self, name: str, policy: Policy) -> tuple[bytes, bytes]:
        return self.key.public_der, self.key.sign(policy.signing_message(name))


def bootstrap_policy(chain: Chain, sender: crypto.KeyPair, name: str, draft: Policy,
                     signers: Iterable[CASigner]) -> bytes:
    """Collect CA signatures over ``draft`` and submit it; returns the tx id."""
    sigs = dict(s.sign_policy(name, draft) for s in signers)
    tx = Transaction.build(sender, chain.nonce_of(sender.address), POLICY_ADDRESS, "newPolicy",
                           encode_new_policy(name, draft, sigs))
    return chain.submit_tx(tx)


def create_cert_tx(chain: Chain, sender: crypto.KeyPair, name: str, pks: list[bytes],
                   cas: list[bytes]) -> Transaction:
    return Transaction.build(sender, chain.nonce_of(sender.address), None, "init",
                             encode_init(name, pks, cas), template=CERT_TEMPLATE)


class DomainAgent:
    """Holds the TLS key online and keeps the stapled certificate fresh.

    The policy key lives in a separate keystore and is only needed for
    policy changes, certificate creation and revocation.
    """

    def __init__(self, name: str, tls_key: crypto.KeyPair, policy_key: crypto.KeyPair | None = None,
                 server: HandshakeServer | None = None):
        self.name = name
        self.tls_key = tls_key
        self.policy_key = policy_key
        self.server = server or HandshakeServer(tls_key)
        self.addr: bytes | None = None
        self.last_refresh: int | None = None
        self.anchor_time: int | None = None
        self.errors: list[str] = []

    def refresh(self, chain: Chain) -> SmartCertCertificate:
        if self.addr is None:
            raise UnknownContract("agent has no contract yet")
        cert = assemble_certificate(chain, self.addr)
        self.server.staple = cert.serialize()
        self.last_refresh = chain.head.timestamp
        self.anchor_time = chain.head.timestamp
        return cert

    def tick(self, chain: Chain, period: int) -> bool:
        """Refresh if ``period`` has elapsed on the chain clock; returns True if refreshed."""
        if self.addr is None:
            return False
        now = chain.head.timestamp
        if self.last_refresh is not None and now - self.last_refresh < period:
            return False
        try:
            self.refresh(chain)
        except Exception as exc:  # keep serving the old staple
            self.errors.append(str(exc))
            log.warning("refresh for %s failed: %s", self.name, exc)
            return False
        return True


def refresh_loop(agent: DomainAgent, load_chain: Callable[[], Chain], period: float,
                 stop: threading.Event) -> None:
    """Wall-clock refresh loop for a live agent; ``load_chain`` returns the latest chain view."""
    while not stop.is_set():
        try:
            agent.refresh(load_chain())
        except Exception as exc:
            agent.errors.append(str(exc))
            log.warning("refresh for %s failed: %s", agent.name, exc)
        stop.wait(period)
