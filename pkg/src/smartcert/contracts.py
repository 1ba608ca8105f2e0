"""The policy registry and the per-certificate SmartCert contract.

Both run as native handlers inside :class:`smartcert.chain.Chain`. State is
kept in storage slots so that clients can prove individual fields; the slot
layout of the certificate contract is part of the wire contract with clients.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Callable

from . import codec, crypto
from .chain import SYSTEM_ADDRESS, Contract, ExecutionContext, OutOfWindow, Revert, Storage, contract_address
from .hashing import H, from_word, u64

YEAR = 365 * 24 * 3600
DEFAULT_MAX_LIFETIME = 2 * YEAR

POLICY_TEMPLATE = "smartcert.policy"
CERT_TEMPLATE = "smartcert.cert"

# the policy contract is the first system deployment in every genesis
POLICY_ADDRESS = contract_address(SYSTEM_ADDRESS, 0)


class PolicyType(enum.IntEnum):
    NEW = 0
    UPDATE = 1


@dataclass(frozen=True)
class Policy:
    cas: frozenset[bytes]
    keyid: bytes | None = None
    max_lifetime: int = DEFAULT_MAX_LIFETIME
    max_err: int | None = None  # None: unlimited
    min_cas: int = 1
    version: int = 1
    type: PolicyType = PolicyType.NEW
    sig_no: int = 0

    def canonical(self) -> bytes:
        """Bytes the co-signing CAs sign; excludes ``sig_no``."""
        cas = sorted(self.cas)
        max_err = b"\x01" + u64(self.max_err) if self.max_err is not None else b"\x00" + u64(0)
        return (
            u64(self.version)
            + bytes([int(self.type)])
            + (self.keyid or bytes(20))
            + struct.pack(">H", len(cas))
            + b"".join(cas)
            + u64(self.max_lifetime)
            + max_err
            + struct.pack(">I", self.min_cas)
        )

    def stored(self) -> bytes:
        return self.canonical() + struct.pack(">I", self.sig_no)

    @classmethod
    def parse(cls, data: bytes, with_sig_no: bool = False) -> "Policy":
        try:
            version = from_word(data[0:8])
            ptype = PolicyType(data[8])
            keyid = data[9:29]
            (n,) = struct.unpack(">H", data[29:31])
            pos = 31
            cas = [data[pos + 20 * i : pos + 20 * (i + 1)] for i in range(n)]
            pos += 20 * n
            max_lifetime = from_word(data[pos : pos + 8])
            has_err = data[pos + 8]
            max_err = from_word(data[pos + 9 : pos + 17])
            (min_cas,) = struct.unpack(">I", data[pos + 17 : pos + 21])
            pos += 21
            sig_no = 0
            if with_sig_no:
                (sig_no,) = struct.unpack(">I", data[pos : pos + 4])
                pos += 4
        except (IndexError, ValueError, struct.error) as exc:
            raise codec.DecodeError(f"bad policy encoding: {exc}") from None
        if pos != len(data) or any(len(c) != 20 for c in cas) or has_err not in (0, 1):
            raise codec.DecodeError("bad policy encoding")
        return cls(
            cas=frozenset(cas),
            keyid=None if keyid == bytes(20) else keyid,
            max_lifetime=max_lifetime,
            max_err=max_err if has_err else None,
            min_cas=min_cas,
            version=version,
            type=ptype,
            sig_no=sig_no,
        )

    def signing_message(self, name: str) -> bytes:
        return name.encode() + self.canonical()


def default_policy(trusted: frozenset[bytes]) -> Policy:
    return Policy(cas=frozenset(trusted))


# -- policy contract ------------------------------------------------------


def _policy_label(name: str) -> str:
    return "policy:" + H(name.encode()).hex()


def trusted_cas(storage: Storage) -> frozenset[bytes]:
    n = storage.get_int("trustedCount")
    return frozenset(storage.get(f"trusted:{i}")[12:] for i in range(n))


def lookup_policy(storage: Storage, name: str) -> tuple[Policy, bool]:
    """Return ``(policy, is_default)`` for ``name`` from policy-contract storage."""
    raw = storage.get(_policy_label(name))
    if raw is None:
        return default_policy(trusted_cas(storage)), True
    return Policy.parse(raw, with_sig_no=True), False


def encode_new_policy(name: str, policy: Policy, sigs: dict[bytes, bytes]) -> bytes:
    """``sigs`` maps a signer's DER public key to its signature."""
    pairs = [codec.pack(pub, sig) for pub, sig in sorted(sigs.items())]
    return codec.pack(name.encode(), policy.canonical(), codec.pack_list(pairs))


class PolicyContract(Contract):
    template_id = POLICY_TEMPLATE
    methods = ("newPolicy",)

    def init(self, ctx: ExecutionContext, args: bytes) -> None:
        cas = codec.unpack_list(args)
        ctx.storage.set_int("trustedCount", len(cas))
        for i, ca in enumerate(sorted(cas)):
            ctx.storage.set(f"trusted:{i}", bytes(12) + ca)

    def newPolicy(self, ctx: ExecutionContext, args: bytes) -> None:
        try:
            name_b, canonical, sig_blob = codec.unpack(args, 3)
            name = name_b.decode()
            policy = Policy.parse(canonical)
            sigs = [codec.unpack(p, 2) for p in codec.unpack_list(sig_blob)]
        except (codec.DecodeError, UnicodeDecodeError) as exc:
            raise Revert("REVERT_BAD_ARGS", str(exc)) from None
        current, is_default = lookup_policy(ctx.storage, name)
        trusted = trusted_cas(ctx.storage)

        if not is_default and policy.type == PolicyType.UPDATE:
            if ctx.sender != current.keyid:
                raise Revert("REVERT_UNAUTHORIZED", "sender is not the policy key")
            _check_policy_shape(policy, trusted)
            stored = _with_sig_no(policy, current.sig_no)
        else:
            signers = {crypto.address_of(pub): (pub, sig) for pub, sig in sigs}
            if len(signers) != len(sigs):
                raise Revert("REVERT_BAD_ARGS", "duplicate signer")
            if len(signers) == 0:
                raise Revert("REVERT_INSUFFICIENT_SIGS", "at least one CA must sign")
            if not is_default and current.sig_no > len(signers):
                raise Revert("REVERT_INSUFFICIENT_SIGS", f"need {current.sig_no}, got {len(signers)}")
            message = policy.signing_message(name)
            for addr, (pub, sig) in sorted(signers.items()):
                if addr not in trusted:
                    raise Revert("REVERT_UNTRUSTED_SIGNER", addr.hex())
                if not ctx.verify(pub, message, sig):
                    raise Revert("REVERT_BAD_SIG", addr.hex())
            _check_policy_shape(policy, trusted)
            stored = _with_sig_no(policy, len(signers))
        ctx.storage.set(_policy_label(name), stored.stored())
        ctx.emit(
            "PolicyRegistered" if is_default else "PolicyReplaced",
            name=name,
            version=stored.version,
            type=stored.type.name,
            sigNo=stored.sig_no,
        )


def _check_policy_shape(policy: Policy, trusted: frozenset[bytes]) -> None:
    if policy.min_cas < 1:
        raise Revert("REVERT_BAD_POLICY", "MIN_CAs must be positive")
    if not policy.cas or not policy.cas <= trusted:
        raise Revert("REVERT_BAD_POLICY", "CAs must be a non-empty subset of trusted CAs")


def _with_sig_no(policy: Policy, sig_no: int) -> Policy:
    return Policy(policy.cas, policy.keyid, policy.max_lifetime, policy.max_err,
                  policy.min_cas, policy.version, policy.type, sig_no)


# -- certificate contract -------------------------------------------------


@dataclass
class CAState:
    last_upd: int = 0
    last_err: int = 0
    err_no: int = 0


@dataclass
class CertStorage:
    domain_name: str
    pks: list[bytes]
    created: int
    updated: int
    revoked: bool
    valid: bool
    revs: list[bytes] = field(default_factory=list)
    states: dict[bytes, CAState] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "domainName": self.domain_name,
            "pks": [pk.hex() for pk in self.pks],
            "created": self.created,
            "updated": self.updated,
            "revoked": self.revoked,
            "valid": self.valid,
            "revs": [r.hex() for r in self.revs],
            "s": {
                ca.hex(): {"lastUpd": s.last_upd, "lastErr": s.last_err, "errNo": s.err_no}
                for ca, s in self.states.items()
            },
        }


def is_compliant(policy: Policy, states: dict[bytes, CAState], created: int, now: int) -> bool:
    # lifetime does not depend on the CA, so it is checked once up front
    if now - created > policy.max_lifetime:
        return False
    count = 0
    for ca, s in states.items():
        if ca in policy.cas and (policy.max_err is None or s.err_no <= policy.max_err):
            count += 1
    return count >= policy.min_cas


def ca_tag(address: bytes) -> bytes:
    return H(address)[:4]


def client_random_for(ca_address: bytes, block_hash: bytes) -> bytes:
    return ca_tag(ca_address) + block_hash[:28]


def _chunks(data: bytes) -> list[bytes]:
    return [data[i : i + 32].ljust(32, b"\x00") for i in range(0, len(data), 32)] or [bytes(32)]


def _addr_word(addr: bytes) -> bytes:
    return bytes(12) + addr


def cert_labels(get: Callable[[str], bytes | None]) -> list[str]:
    """Every slot label holding part of a certificate contract's state."""
    labels = ["name"]
    i = 0
    while get(f"nameRaw:{i}") is not None:
        labels.append(f"nameRaw:{i}")
        i += 1
    labels.append("pkCount")
    for j in range(from_word(get("pkCount"))):
        first = get(f"pk:{j}:0")
        n = (crypto.der_length(first) + 31) // 32
        labels += [f"pk:{j}:{i}" for i in range(n)]
    labels += ["created", "updated", "revoked", "valid", "caCount"]
    cas = []
    for i in range(from_word(get("caCount"))):
        labels.append(f"ca:{i}")
        cas.append(get(f"ca:{i}")[12:])
    for ca in cas:
        labels += [f"ca:{ca.hex()}:lastUpd", f"ca:{ca.hex()}:lastErr", f"ca:{ca.hex()}:errNo"]
    labels.append("revCount")
    labels += [f"rev:{i}" for i in range(from_word(get("revCount")))]
    return labels


def decode_cert(get: Callable[[str], bytes | None]) -> CertStorage:
    """Rebuild :class:`CertStorage` from slot values; raises DecodeError if any are missing."""

    def need(label: str) -> bytes:
        v = get(label)
        if v is None:
            raise codec.DecodeError(f"missing slot {label}")
        if len(v) != 32:
            raise codec.DecodeError(f"slot {label} is not a word")
        return v

    def need_int(label: str) -> int:
        return from_word(need(label))

    def need_bool(label: str) -> bool:
        v = need_int(label)
        if v not in (0, 1):
            raise codec.DecodeError(f"slot {label} is not a boolean")
        return bool(v)

    name_hash = need("name")
    raw = b""
    i = 0
    while get(f"nameRaw:{i}") is not None:
        raw += need(f"nameRaw:{i}")
        i += 1
    raw = raw.rstrip(b"\x00")
    if H(raw) != name_hash:
        raise codec.DecodeError("name chunks do not match the name hash")
    try:
        name = raw.decode()
    except UnicodeDecodeError:
        raise codec.DecodeError("name is not UTF-8") from None

    pks = []
    for j in range(need_int("pkCount")):
        blob = need(f"pk:{j}:0")
        try:
            total = crypto.der_length(blob)
        except ValueError as exc:
            raise codec.DecodeError(str(exc)) from None
        for i in range(1, (total + 31) // 32):
            blob += need(f"pk:{j}:{i}")
        pks.append(blob[:total])
    if not pks:
        raise codec.DecodeError("no public keys")

    states = {}
    for i in range(need_int("caCount")):
        ca = need(f"ca:{i}")[12:]
        h = ca.hex()
        states[ca] = CAState(
            last_upd=need_int(f"ca:{h}:lastUpd"),
            last_err=need_int(f"ca:{h}:lastErr"),
            err_no=need_int(f"ca:{h}:errNo"),
        )
    revs = [need(f"rev:{i}")[12:] for i in range(need_int("revCount"))]
    return CertStorage(
        domain_name=name,
        pks=pks,
        created=need_int("created"),
        updated=need_int("updated"),
        revoked=need_bool("revoked"),
        valid=need_bool("valid"),
        revs=revs,
        states=states,
    )


def encode_init(name: str, pks: list[bytes], cas: list[bytes]) -> bytes:
    return codec.pack(name.encode(), codec.pack_list(pks), codec.pack_list(cas))


def encode_update(cli_rnd: bytes, srv_rnd: bytes, params: bytes, sigma: bytes) -> bytes:
    return codec.pack(cli_rnd, srv_rnd, params, sigma)


class SmartCertContract(Contract):
    template_id = CERT_TEMPLATE
    methods = ("update", "revoke")

    def _policy(self, ctx: ExecutionContext, name: str) -> tuple[Policy, bool]:
        return lookup_policy(ctx.view(POLICY_ADDRESS), name)

    def _load(self, ctx: ExecutionContext) -> CertStorage:
        return decode_cert(ctx.storage.get)

    def _store_state(self, ctx: ExecutionContext, ca: bytes, s: CAState) -> None:
        h = ca.hex()
        ctx.storage.set_int(f"ca:{h}:lastUpd", s.last_upd)
        ctx.storage.set_int(f"ca:{h}:lastErr", s.last_err)
        ctx.storage.set_int(f"ca:{h}:errNo", s.err_no)

    def init(self, ctx: ExecutionContext, args: bytes) -> None:
        try:
            name_b, pk_blob, ca_blob = codec.unpack(args, 3)
            name = name_b.decode()
            pks = codec.unpack_list(pk_blob)
            cas = codec.unpack_list(ca_blob)
        except (codec.DecodeError, UnicodeDecodeError) as exc:
            raise Revert("REVERT_BAD_ARGS", str(exc)) from None
        if not pks or not name or any(len(c) != 20 for c in cas) or len(set(cas)) != len(cas):
            raise Revert("REVERT_BAD_ARGS", "need a name, at least one key and distinct CA addresses")
        for pk in pks:
            try:
                if crypto.der_length(pk) != len(pk):
                    raise ValueError
            except ValueError:
                raise Revert("REVERT_BAD_ARGS", "public keys must be DER") from None
        policy, is_default = self._policy(ctx, name)
        if not is_default and ctx.sender != policy.keyid:
            raise Revert("REVERT_UNAUTHORIZED", "sender is not the domain's policy key")
        for ca in cas:
            if ca not in policy.cas:
                raise Revert("REVERT_CA_NOT_AUTHORIZED", ca.hex())

        now = ctx.now()
        st = ctx.storage
        raw = name.encode()
        st.set("name", H(raw))
        for i, chunk in enumerate(_chunks(raw)):
            st.set(f"nameRaw:{i}", chunk)
        st.set_int("pkCount", len(pks))
        for j, pk in enumerate(pks):
            for i, chunk in enumerate(_chunks(pk)):
                st.set(f"pk:{j}:{i}", chunk)
        st.set_int("created", now)
        st.set_int("updated", 0)
        st.set_int("revoked", 0)
        st.set_int("valid", 1)
        st.set_int("revCount", 0)
        st.set_int("caCount", len(cas))
        for i, ca in enumerate(cas):
            st.set(f"ca:{i}", _addr_word(ca))
            self._store_state(ctx, ca, CAState(last_upd=now, last_err=0, err_no=0))
        ctx.emit("CertCreated", name=name, cas=[c.hex() for c in cas], keys=len(pks))

    def update(self, ctx: ExecutionContext, args: bytes) -> None:
        try:
            cli_rnd, srv_rnd, params, sigma = codec.unpack(args, 4)
        except codec.DecodeError as exc:
            raise Revert("REVERT_BAD_ARGS", str(exc)) from None
        cert = self._load(ctx)
        ca = ctx.sender
        if ca not in cert.states:
            raise Revert("REVERT_UNAUTHORIZED", "sender is not a tracked CA")
        if not cert.valid:
            raise Revert("REVERT_ALREADY_INVALID")
        now = ctx.now()
        epoch = ctx.config.epoch

        # skipped validations count as errors, once each
        for tmp, s in cert.states.items():
            missed = (now - s.last_upd) // epoch
            if missed >= 1:
                s.last_err = now - epoch
                s.err_no += missed
                s.last_upd += missed * epoch

        epoch_start = now - now % epoch
        expected_tag = ca_tag(ca)
        fresh = False
        for i in range(1, ctx.config.hash_window + 1):
            try:
                if ctx.last_btime(i) < epoch_start:
                    break
                if cli_rnd == expected_tag + ctx.last_bhash(i)[:28]:
                    fresh = True
                    break
            except OutOfWindow:
                break

        message = cli_rnd + srv_rnd + params
        authentic = any(ctx.verify(pk, message, sigma) for pk in cert.pks)
        s = cert.states[ca]
        if fresh and authentic:
            s.last_upd = now
            ctx.emit("ValidationOk", ca=ca.hex(), time=now)
        else:
            s.last_err = now
            s.err_no += 1
            ctx.emit("ValidationError", ca=ca.hex(), time=now,
                     reason="stale" if not fresh else "signature")
        for tmp, state in cert.states.items():
            self._store_state(ctx, tmp, state)

        policy, _ = self._policy(ctx, cert.domain_name)
        ctx.storage.set_int("updated", now)
        ctx.storage.set_int("valid", int(is_compliant(policy, cert.states, cert.created, now)))

    def revoke(self, ctx: ExecutionContext, args: bytes) -> None:
        cert = self._load(ctx)
        if cert.revoked:
            raise Revert("REVERT_ALREADY_REVOKED")
        policy, _ = self._policy(ctx, cert.domain_name)
        sender = ctx.sender
        revs = list(cert.revs)
        r = 0
        if sender in policy.cas:
            if sender not in revs:
                ctx.storage.set(f"rev:{len(revs)}", _addr_word(sender))
                revs.append(sender)
                ctx.storage.set_int("revCount", len(revs))
            r = len(policy.cas) - len(revs)
        is_owner = policy.keyid is not None and sender == policy.keyid
        if ctx.config.revoke_mode == "quorum":
            triggered = is_owner or (sender in policy.cas and len(set(revs) & policy.cas) >= policy.min_cas)
        else:
            triggered = is_owner or r >= policy.min_cas
        if not triggered:
            if sender not in policy.cas:
                raise Revert("REVERT_UNAUTHORIZED", "sender is neither the policy key nor an authorized CA")
            return
        now = ctx.now()
        ctx.storage.set_int("updated", now)
        ctx.storage.set_int("revoked", 1)
        ctx.storage.set_int("valid", 0)
        ctx.emit("Revoked", by=sender.hex(), time=now)


def policy_genesis(trusted: list[bytes]):
    """Genesis hook deploying the policy contract with the given trusted CAs."""

    def hook(chain) -> None:
        addr = chain.deploy_system(PolicyContract, codec.pack_list(sorted(trusted)))
        assert addr == POLICY_ADDRESS
        chain.register_template(SmartCertContract)

    return hook


def read_cert(chain, address: bytes) -> CertStorage:
    return decode_cert(chain.storage(address).get)


def read_policy(chain, name: str) -> tuple[Policy, bool]:
    return lookup_policy(chain.storage(POLICY_ADDRESS), name)
