"""Deterministic single-miner blockchain simulator.

Accounts live in a state trie keyed by H(address); every contract account owns
a storage trie keyed by H(slot label). Contract code is a native handler
looked up by code hash. Time only moves when the caller mines a block.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import crypto
from .hashing import H, Digest, from_word, u64, word
from .trie import EMPTY_ROOT, KeyAbsent, Trie

log = logging.getLogger(__name__)

ZERO_HASH = bytes(32)
ZERO_CODE = bytes(32)
SYSTEM_ADDRESS = bytes(20)


class ChainError(Exception):
    pass


class BadSignature(ChainError):
    pass


class NonMonotonicTimestamp(ChainError):
    pass


class OutOfWindow(ChainError):
    pass


class UnknownBlock(ChainError):
    pass


class UnknownAccount(ChainError):
    pass


class UnknownSlot(ChainError):
    pass


class Revert(Exception):
    """Raised by a contract handler to abort the current transaction."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


def contract_address(creator: bytes, nonce: int) -> bytes:
    return H(creator + u64(nonce))[:20]


def slot_key(label: str) -> bytes:
    return H(label.encode("ascii"))


@dataclass(frozen=True)
class ChainConfig:
    block_interval: int = 15
    hash_window: int = 256
    epoch: int = 6 * 3600
    max_stale: int = 24 * 3600
    genesis_time: int = 0
    revoke_mode: str = "literal"  # or "quorum"

    def __post_init__(self):
        if self.max_stale <= self.epoch:
            raise ValueError("max_stale must exceed epoch")
        if self.hash_window < 1:
            raise ValueError("hash_window must be at least 1")
        if self.epoch < 1 or self.block_interval < 1:
            raise ValueError("epoch and block_interval must be positive")
        if self.revoke_mode not in ("literal", "quorum"):
            raise ValueError(f"unknown revoke_mode {self.revoke_mode!r}")


@dataclass(frozen=True)
class BlockHeader:
    parent_hash: Digest
    number: int
    timestamp: int
    state_root: Digest
    tx_root: Digest

    SIZE = 32 + 8 + 8 + 32 + 32

    def serialize(self) -> bytes:
        return self.parent_hash + u64(self.number) + u64(self.timestamp) + self.state_root + self.tx_root

    @classmethod
    def parse(cls, data: bytes) -> "BlockHeader":
        if len(data) != cls.SIZE:
            raise ValueError("bad header length")
        number, timestamp = struct.unpack(">QQ", data[32:48])
        return cls(data[:32], number, timestamp, data[48:80], data[80:112])

    @property
    def hash(self) -> Digest:
        return H(self.serialize())


@dataclass(frozen=True)
class Account:
    nonce: int
    code_hash: Digest
    storage_root: Digest

    def serialize(self) -> bytes:
        return u64(self.nonce) + self.code_hash + self.storage_root

    @classmethod
    def parse(cls, data: bytes) -> "Account":
        if len(data) != 72:
            raise ValueError("bad account length")
        return cls(from_word(data[:8]), data[8:40], data[40:72])


@dataclass(frozen=True)
class Transaction:
    sender_pub: bytes
    nonce: int
    target: bytes | None  # None marks contract creation
    method: str
    args: bytes = b""
    template: str = ""
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        target = b"\x00" if self.target is None else b"\x01" + self.target
        template = self.template.encode()
        method = self.method.encode()
        return (
            struct.pack(">H", len(self.sender_pub))
            + self.sender_pub
            + u64(self.nonce)
            + target
            + bytes([len(template)])
            + template
            + bytes([len(method)])
            + method
            + struct.pack(">I", len(self.args))
            + self.args
        )

    def serialize(self) -> bytes:
        return self.signing_bytes() + struct.pack(">H", len(self.signature)) + self.signature

    @classmethod
    def parse(cls, data: bytes) -> "Transaction":
        pos = 0

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(data):
                raise ValueError("truncated transaction")
            out = data[pos : pos + n]
            pos += n
            return out

        pub = take(struct.unpack(">H", take(2))[0])
        nonce = from_word(take(8))
        target = take(20) if take(1) == b"\x01" else None
        template = take(take(1)[0]).decode()
        method = take(take(1)[0]).decode()
        args = take(struct.unpack(">I", take(4))[0])
        sig = take(struct.unpack(">H", take(2))[0])
        if pos != len(data):
            raise ValueError("trailing bytes after transaction")
        return cls(pub, nonce, target, method, args, template, sig)

    @property
    def tx_id(self) -> Digest:
        return H(self.serialize())

    @property
    def sender(self) -> bytes:
        return crypto.address_of(self.sender_pub)

    @classmethod
    def build(cls, key: crypto.KeyPair, nonce: int, target: bytes | None, method: str,
              args: bytes = b"", template: str = "") -> "Transaction":
        unsigned = cls(key.public_der, nonce, target, method, args, template)
        return cls(key.public_der, nonce, target, method, args, template, key.sign(unsigned.signing_bytes()))


@dataclass
class Event:
    contract: bytes
    name: str
    payload: dict

    def to_json(self) -> dict:
        return {"contract": self.contract.hex(), "name": self.name, "payload": self.payload}


@dataclass
class Receipt:
    tx_id: Digest
    block: int
    index: int
    sender: bytes
    status: str  # OK | REVERTED | REJECTED_NONCE
    error: str = ""
    contract: bytes | None = None
    events: list[Event] = field(default_factory=list)
    ops: int = 0

    def to_json(self) -> dict:
        return {
            "tx": self.tx_id.hex(),
            "block": self.block,
            "index": self.index,
            "sender": self.sender.hex(),
            "status": self.status,
            "error": self.error,
            "contract": self.contract.hex() if self.contract else None,
            "events": [e.to_json() for e in self.events],
            "ops": self.ops,
        }


@dataclass
class Block:
    header: BlockHeader
    txs: list[Transaction]
    receipts: list[Receipt]

    def serialize(self) -> bytes:
        out = [self.header.serialize(), struct.pack(">I", len(self.txs))]
        for tx in self.txs:
            raw = tx.serialize()
            out.append(struct.pack(">I", len(raw)) + raw)
        return b"".join(out)


class Storage:
    """Contract storage view with a write buffer; labels are ASCII slot names."""

    def __init__(self, trie: Trie, ctx: "ExecutionContext | None" = None):
        self._trie = trie
        self._writes: dict[bytes, bytes] = {}
        self._ctx = ctx

    def _tick(self) -> None:
        if self._ctx is not None:
            self._ctx.ops += 1

    def get(self, label: str) -> bytes | None:
        self._tick()
        key = slot_key(label)
        if key in self._writes:
            return self._writes[key] or None
        return self._trie.get(key)

    def set(self, label: str, value: bytes) -> None:
        self._tick()
        self._writes[slot_key(label)] = bytes(value)

    def delete(self, label: str) -> None:
        self.set(label, b"")

    def get_int(self, label: str, default: int = 0) -> int:
        v = self.get(label)
        return default if v is None else from_word(v)

    def set_int(self, label: str, n: int) -> None:
        self.set(label, word(n))

    def commit(self) -> None:
        for k, v in self._writes.items():
            self._trie.put(k, v)
        self._writes.clear()


class Contract:
    """Base for native contract handlers.

    Subclasses set ``template_id``/``version`` and implement ``init`` and the
    methods listed in ``methods``; any of them may raise :class:`Revert`.
    """

    template_id = ""
    version = 1
    methods: tuple[str, ...] = ()

    @classmethod
    def code_hash(cls) -> Digest:
        return H(cls.template_id.encode() + struct.pack(">I", cls.version))

    def init(self, ctx: "ExecutionContext", args: bytes) -> None:
        pass

    def dispatch(self, ctx: "ExecutionContext", method: str, args: bytes) -> None:
        if method not in self.methods:
            raise Revert("REVERT_UNKNOWN_METHOD", method)
        getattr(self, method)(ctx, args)


class ExecutionContext:
    """Everything a handler sees while one transaction runs."""

    def __init__(self, chain: "Chain", address: bytes, sender: bytes, sender_pub: bytes):
        self.chain = chain
        self.address = address
        self.sender = sender
        self.sender_pub = sender_pub
        self.events: list[Event] = []
        self.ops = 0
        self.storage = Storage(chain._storage(address), self)

    @property
    def config(self) -> ChainConfig:
        return self.chain.config

    def now(self) -> int:
        return self.chain._pending_time

    def last_bhash(self, i: int) -> Digest:
        return self.chain._recent(i).hash

    def last_btime(self, i: int) -> int:
        return self.chain._recent(i).timestamp

    def view(self, address: bytes) -> Storage:
        """Read-only storage of another contract as committed so far."""
        return Storage(self.chain._storage(address), self)

    def emit(self, event: str, /, **payload) -> None:
        self.events.append(Event(self.address, event, payload))

    def verify(self, public_der: bytes, message: bytes, signature: bytes) -> bool:
        self.ops += 1
        return crypto.verify_signature(public_der, message, signature)


@dataclass
class _AccountState:
    nonce: int = 0
    code_hash: Digest = ZERO_CODE
    storage: Trie = field(default_factory=Trie)

    def account(self) -> Account:
        return Account(self.nonce, self.code_hash, self.storage.root)


GenesisHook = Callable[["Chain"], None]


class Chain:
    def __init__(self, config: ChainConfig | None = None, genesis: Iterable[GenesisHook] = (),
                 templates: Iterable[type[Contract]] = ()):
        self.config = config or ChainConfig()
        self._templates: dict[Digest, type[Contract]] = {}
        for t in templates:
            self.register_template(t)
        self._accounts: dict[bytes, _AccountState] = {}
        self._state = Trie()
        self._queue: list[Transaction] = []
        self._blocks: list[Block] = []
        self._receipts: dict[Digest, Receipt] = {}
        self._pending_time = self.config.genesis_time
        for hook in genesis:
            hook(self)
        self._flush_state(self._accounts.keys())
        genesis_header = BlockHeader(ZERO_HASH, 0, self.config.genesis_time, self._state.root, EMPTY_ROOT)
        self._blocks.append(Block(genesis_header, [], []))

    # -- setup ------------------------------------------------------------

    def register_template(self, template: type[Contract]) -> Digest:
        self._templates[template.code_hash()] = template
        return template.code_hash()

    def deploy_system(self, template: type[Contract], args: bytes = b"") -> bytes:
        """Create a contract in the genesis state, owned by the zero address."""
        if self._blocks:
            raise ChainError("system contracts can only be created at genesis")
        self.register_template(template)
        creator = self._accounts.setdefault(SYSTEM_ADDRESS, _AccountState())
        addr = contract_address(SYSTEM_ADDRESS, creator.nonce)
        creator.nonce += 1
        self._accounts[addr] = _AccountState(code_hash=template.code_hash())
        ctx = ExecutionContext(self, addr, SYSTEM_ADDRESS, b"")
        template().init(ctx, args)
        ctx.storage.commit()
        return addr

    # -- queries ----------------------------------------------------------

    @property
    def head(self) -> BlockHeader:
        return self._blocks[-1].header

    @property
    def height(self) -> int:
        return self.head.number

    def header_at(self, n: int) -> BlockHeader:
        if not 0 <= n < len(self._blocks):
            raise UnknownBlock(n)
        return self._blocks[n].header

    def block_at(self, n: int) -> Block:
        if not 0 <= n < len(self._blocks):
            raise UnknownBlock(n)
        return self._blocks[n]

    def head_range(self, from_time: int) -> list[BlockHeader]:
        out = []
        for block in reversed(self._blocks):
            if block.header.timestamp < from_time:
                break
            out.append(block.header)
        out.reverse()
        return out

    def receipt(self, tx_id: Digest) -> Receipt | None:
        return self._receipts.get(tx_id)

    def receipts(self) -> Iterable[Receipt]:
        for block in self._blocks:
            yield from block.receipts

    def nonce_of(self, address: bytes) -> int:
        """Next nonce for ``address``, counting transactions still queued."""
        acct = self._accounts.get(address)
        base = acct.nonce if acct else 0
        return base + sum(1 for tx in self._queue if tx.sender == address)

    def account(self, address: bytes) -> Account:
        acct = self._accounts.get(address)
        if acct is None:
            raise UnknownAccount(address.hex())
        return acct.account()

    def storage(self, address: bytes) -> Storage:
        """Read-only view of a contract's committed storage."""
        if address not in self._accounts:
            raise UnknownAccount(address.hex())
        return Storage(self._accounts[address].storage)

    def code_hash_of(self, address: bytes) -> Digest:
        return self.account(address).code_hash

    def get_storage_proof(self, address: bytes, labels: Iterable[str]):
        """Proofs for ``labels`` in the contract's storage, rooted in the head stateRoot.

        Returns ``(account_bytes, account_proof, [(slot_value, slot_proof), ...])``.
        """
        acct = self._accounts.get(address)
        if acct is None:
            raise UnknownAccount(address.hex())
        account_proof = self._state.prove(H(address))
        slots = []
        for label in labels:
            try:
                p = acct.storage.prove(slot_key(label))
            except KeyAbsent:
                raise UnknownSlot(label) from None
            slots.append((p.value, p))
        return account_proof.value, account_proof, slots

    # -- execution --------------------------------------------------------

    def submit_tx(self, tx: Transaction) -> Digest:
        if not crypto.verify_signature(tx.sender_pub, tx.signing_bytes(), tx.signature):
            raise BadSignature(tx.tx_id.hex())
        self._queue.append(tx)
        return tx.tx_id

    def _recent(self, i: int) -> BlockHeader:
        # during execution of block n the sealed blocks are 0..n-1
        if i < 1 or i > self.config.hash_window or i > len(self._blocks):
            raise OutOfWindow(i)
        return self._blocks[len(self._blocks) - i].header

    def _storage(self, address: bytes) -> Trie:
        acct = self._accounts.get(address)
        if acct is None:
            raise UnknownAccount(address.hex())
        return acct.storage

    def _ordered_queue(self) -> list[Transaction]:
        # keep submission order, but each sender's own slots are filled in nonce order
        by_sender: dict[bytes, list[Transaction]] = {}
        for tx in self._queue:
            by_sender.setdefault(tx.sender, []).append(tx)
        for txs in by_sender.values():
            txs.sort(key=lambda t: t.nonce)
        cursor = {s: iter(txs) for s, txs in by_sender.items()}
        return [next(cursor[tx.sender]) for tx in self._queue]

    def mine_block(self, timestamp: int | None = None) -> BlockHeader:
        if timestamp is None:
            timestamp = self.head.timestamp + self.config.block_interval
        if timestamp <= self.head.timestamp:
            raise NonMonotonicTimestamp(f"{timestamp} <= {self.head.timestamp}")
        number = self.head.number + 1
        self._pending_time = timestamp
        txs = self._ordered_queue()
        self._queue = []
        receipts = []
        touched: set[bytes] = set()
        tx_trie = Trie()
        for index, tx in enumerate(txs):
            receipt = self._execute(tx, number, index, touched)
            receipts.append(receipt)
            self._receipts[receipt.tx_id] = receipt
            tx_trie.put(H(u64(index)), tx.serialize())
        self._flush_state(touched)
        header = BlockHeader(self.head.hash, number, timestamp, self._state.root, tx_trie.root)
        self._blocks.append(Block(header, txs, receipts))
        log.debug("mined block %d at t=%d with %d txs", number, timestamp, len(txs))
        return header

    def _execute(self, tx: Transaction, number: int, index: int, touched: set[bytes]) -> Receipt:
        sender = tx.sender
        acct = self._accounts.get(sender)
        expected = acct.nonce if acct else 0
        receipt = Receipt(tx.tx_id, number, index, sender, "OK")
        if tx.nonce != expected:
            receipt.status = "REJECTED_NONCE"
            receipt.error = f"expected nonce {expected}, got {tx.nonce}"
            return receipt
        if acct is None:
            acct = self._accounts[sender] = _AccountState()
        acct.nonce += 1
        touched.add(sender)

        if tx.target is None:
            template = self._template_by_name(tx.template)
            if template is None:
                receipt.status, receipt.error = "REVERTED", "REVERT_UNKNOWN_TEMPLATE"
                return receipt
            addr = contract_address(sender, tx.nonce)
            self._accounts[addr] = _AccountState(code_hash=template.code_hash())
            ctx = ExecutionContext(self, addr, sender, tx.sender_pub)
            try:
                template().init(ctx, tx.args)
            except Revert as exc:
                del self._accounts[addr]
                receipt.status, receipt.error, receipt.ops = "REVERTED", exc.code, ctx.ops
                return receipt
            receipt.contract = addr
        else:
            addr = tx.target
            target = self._accounts.get(addr)
            handler = self._templates.get(target.code_hash) if target else None
            if handler is None:
                receipt.status, receipt.error = "REVERTED", "REVERT_NO_CONTRACT"
                return receipt
            ctx = ExecutionContext(self, addr, sender, tx.sender_pub)
            try:
                handler().dispatch(ctx, tx.method, tx.args)
            except Revert as exc:
                receipt.status, receipt.error, receipt.ops = "REVERTED", exc.code, ctx.ops
                return receipt
        ctx.storage.commit()
        touched.add(addr)
        receipt.events = ctx.events
        receipt.ops = ctx.ops
        return receipt

    def _template_by_name(self, name: str) -> type[Contract] | None:
        for t in self._templates.values():
            if t.template_id == name:
                return t
        return None

    def _flush_state(self, addresses: Iterable[bytes]) -> None:
        for addr in addresses:
            self._state.put(H(addr), self._accounts[addr].account().serialize())

    # -- persistence ------------------------------------------------------

    MAGIC = b"SCCHAIN1"

    def dump(self, genesis_spec: dict) -> bytes:
        """Serialize the chain as a genesis record followed by every block.

        ``genesis_spec`` must be enough for :func:`load` to rebuild genesis.
        """
        meta = json.dumps(genesis_spec, sort_keys=True, separators=(",", ":")).encode()
        out = [self.MAGIC, struct.pack(">I", len(meta)), meta]
        for block in self._blocks:
            raw = block.serialize()
            out.append(struct.pack(">I", len(raw)) + raw)
        return b"".join(out)

    def receipts_jsonl(self) -> str:
        return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in self.receipts())


def parse_dump(data: bytes) -> tuple[dict, list[tuple[BlockHeader, list[Transaction]]]]:
    if not data.startswith(Chain.MAGIC):
        raise ValueError("not a chain dump")
    pos = len(Chain.MAGIC)
    (mlen,) = struct.unpack(">I", data[pos : pos + 4])
    pos += 4
    meta = json.loads(data[pos : pos + mlen])
    pos += mlen
    blocks = []
    while pos < len(data):
        (blen,) = struct.unpack(">I", data[pos : pos + 4])
        raw = data[pos + 4 : pos + 4 + blen]
        if len(raw) != blen:
            raise ValueError("truncated block")
        pos += 4 + blen
        header = BlockHeader.parse(raw[: BlockHeader.SIZE])
        (count,) = struct.unpack(">I", raw[BlockHeader.SIZE : BlockHeader.SIZE + 4])
        p = BlockHeader.SIZE + 4
        txs = []
        for _ in range(count):
            (tlen,) = struct.unpack(">I", raw[p : p + 4])
            txs.append(Transaction.parse(raw[p + 4 : p + 4 + tlen]))
            p += 4 + tlen
        blocks.append((header, txs))
    return meta, blocks


def replay(chain: Chain, blocks: list[tuple[BlockHeader, list[Transaction]]]) -> Chain:
    """Re-execute dumped blocks on a fresh genesis chain, checking every header."""
    if not blocks or blocks[0][0] != chain.head:
        raise ChainError("genesis mismatch")
    for header, txs in blocks[1:]:
        for tx in txs:
            chain.submit_tx(tx)
        mined = chain.mine_block(header.timestamp)
        if mined != header:
            raise ChainError(f"replay diverged at block {header.number}")
    return chain
