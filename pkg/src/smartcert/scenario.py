"""Scenario files, the simulated world they drive, and the run report.

A scenario is JSON::

    {
      "name": "...", "seed": 7, "scheme": "rsa",
      "chain": {"epoch": 21600, "max_stale": 86400, "block_interval": 15,
                "hash_window": 256, "revoke_mode": "literal", "genesis_time": 0},
      "cas": ["ca1", "ca2"],
      "domains": [{"name": "example.com", "keys": 1, "refresh_period": 10800}],
      "attackers": ["mallory"],
      "clients": [{"id": "alice", "prune_horizon": 86400}],
      "end": 216000,
      "timeline": [{"at": 60, "do": "register_policy", ...}, ...]
    }

Every timeline entry has ``at`` (simulated seconds) and ``do`` (verb), an
optional ``id``, an optional ``expect`` and an optional
``repeat: {"every": s, "until": t}`` that expands it into copies. Blocks are
mined every ``block_interval`` seconds as time advances; an action at time
``t`` runs after every block stamped ``<= t``, so its transactions land in
the next block.
"""
from __future__ import annotations

import copy
import heapq
import json
import logging
import random
import statistics
import time
from dataclasses import dataclass, field
from typing import Any

from . import crypto
from .chain import Chain, ChainConfig, Transaction, parse_dump, replay
from .client import CertValidator, HeaderStore, TrustAnchors
from .contracts import (
    DEFAULT_MAX_LIFETIME,
    Policy,
    PolicyType,
    SmartCertContract,
    encode_update,
    policy_genesis,
    read_cert,
    read_policy,
)
from .domain import CASigner, DomainAgent, bootstrap_policy, create_cert_tx
from .handshake import HandshakeServer, InProcessEndpoint, ValidationProof, ca_probe, client_connect
from .hashing import H

log = logging.getLogger(__name__)

VERBS = (
    "advance_time",
    "mine",
    "register_policy",
    "replace_policy",
    "create_cert",
    "ca_probe",
    "revoke",
    "client_verify",
    "assert_storage",
    "capture_cert",
    "refresh",
)


class ScenarioParseError(ValueError):
    pass


class AssertionFailed(AssertionError):
    def __init__(self, action_id: str, message: str):
        super().__init__(f"{action_id}: {message}")
        self.action_id = action_id


CHAIN_KEYS = {"epoch", "max_stale", "block_interval", "hash_window", "revoke_mode", "genesis_time"}


@dataclass
class Scenario:
    name: str
    seed: int
    chain: ChainConfig
    cas: list[str]
    domains: list[dict]
    attackers: list[str]
    clients: list[dict]
    timeline: list[dict]
    scheme: str = "rsa"
    end: int | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        try:
            chain_cfg = dict(data.get("chain", {}))
            unknown = set(chain_cfg) - CHAIN_KEYS
            if unknown:
                raise ScenarioParseError(f"unknown chain keys {sorted(unknown)}")
            config = ChainConfig(**chain_cfg)
            timeline = _expand(data.get("timeline", []))
            scenario = cls(
                name=data.get("name", "unnamed"),
                seed=int(data.get("seed", 0)),
                chain=config,
                cas=list(data.get("cas", [])),
                domains=list(data.get("domains", [])),
                attackers=list(data.get("attackers", [])),
                clients=list(data.get("clients", [])),
                timeline=timeline,
                scheme=data.get("scheme", "rsa"),
                end=data.get("end"),
                raw=data,
            )
        except ScenarioParseError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ScenarioParseError(str(exc)) from None
        scenario._validate()
        return scenario

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioParseError(f"{path}: {exc}") from None
        return cls.from_dict(data)

    def _validate(self) -> None:
        if self.scheme not in ("rsa", "ed25519"):
            raise ScenarioParseError(f"unknown scheme {self.scheme!r}")
        names = {d.get("name") for d in self.domains}
        if None in names:
            raise ScenarioParseError("every domain needs a name")
        clients = {c.get("id") for c in self.clients}
        for a in self.timeline:
            if "at" not in a or "do" not in a:
                raise ScenarioParseError(f"action without 'at'/'do': {a}")
            if a["do"] not in VERBS:
                raise ScenarioParseError(f"unknown verb {a['do']!r}")
            if not isinstance(a["at"], int) or a["at"] < 0:
                raise ScenarioParseError(f"{a['id']}: 'at' must be a non-negative integer")
            for key in ("ca", "as"):
                if key in a and a[key] not in self.cas:
                    raise ScenarioParseError(f"{a['id']}: unknown CA {a[key]!r}")
            for signer in a.get("signers", []):
                if signer not in self.cas and signer not in self.attackers:
                    raise ScenarioParseError(f"{a['id']}: unknown signer {signer!r}")
            if "domain" in a and a["domain"] not in names:
                raise ScenarioParseError(f"{a['id']}: unknown domain {a['domain']!r}")
            if "client" in a and a["client"] not in clients:
                raise ScenarioParseError(f"{a['id']}: unknown client {a['client']!r}")


def _expand(timeline: list[dict]) -> list[dict]:
    out = []
    for i, action in enumerate(timeline):
        if not isinstance(action, dict):
            raise ScenarioParseError(f"timeline entry {i} is not an object")
        action = dict(action)
        action.setdefault("id", f"a{i}")
        rep = action.pop("repeat", None)
        if rep is None:
            out.append(action)
            continue
        every, until = int(rep["every"]), int(rep["until"])
        if every <= 0:
            raise ScenarioParseError(f"{action['id']}: repeat.every must be positive")
        k = 0
        t = action["at"]
        while t <= until:
            a = copy.deepcopy(action)
            a["at"] = t
            a["id"] = f"{action['id']}#{k}"
            out.append(a)
            k += 1
            t += every
    out.sort(key=lambda a: a["at"])  # stable: equal times keep file order
    return out


@dataclass
class CertHandle:
    id: str
    domain: str
    agent: DomainAgent
    addr: bytes | None = None
    refresh_period: int | None = None


class World:
    """Actors, chain and clients of one simulated run."""

    def __init__(self, config: ChainConfig, seed: int = 0, scheme: str = "rsa",
                 cas: list[str] = (), domains: list[dict] = (), attackers: list[str] = (),
                 clients: list[dict] = ()):
        self.config = config
        self.seed = seed
        self.scheme = scheme
        self.rng = random.Random(seed)
        self.ca_keys = {name: self._key("ca", name) for name in cas}
        self.attacker_keys = {name: self._key("attacker", name) for name in attackers}
        self.domain_cfg = {d["name"]: d for d in domains}
        self.domain_tls = {d["name"]: [self._key("tls", f"{d['name']}:{i}") for i in range(d.get("keys", 1))]
                           for d in domains}
        self.domain_policy_key = {d["name"]: self._key("policy", d["name"]) for d in domains}
        self.trusted = sorted(k.address for k in self.ca_keys.values())
        self.chain = Chain(config, genesis=[policy_genesis(self.trusted)])
        self.code_hash = SmartCertContract.code_hash()
        self.clients: dict[str, CertValidator] = {}
        for c in clients:
            horizon = c.get("prune_horizon", config.max_stale)
            store = HeaderStore(horizon)
            store.sync([self.chain.head])
            self.clients[c["id"]] = CertValidator(store, TrustAnchors(self.code_hash, c.get("max_stale", config.max_stale)))
        self.certs: dict[str, CertHandle] = {}
        self.proofs: dict[str, ValidationProof] = {}
        self.staples: dict[str, bytes] = {}
        self.names = {k.address: n for n, k in self.ca_keys.items()}
        self.names.update({k.address: n for n, k in self.attacker_keys.items()})
        self.names.update({k.address: f"policy:{d}" for d, k in self.domain_policy_key.items()})

    def _key(self, role: str, name: str) -> crypto.KeyPair:
        return crypto.keypair(f"{self.seed}:{role}:{name}", self.scheme)

    def genesis_spec(self) -> dict:
        c = self.config
        return {
            "config": {
                "block_interval": c.block_interval,
                "hash_window": c.hash_window,
                "epoch": c.epoch,
                "max_stale": c.max_stale,
                "genesis_time": c.genesis_time,
                "revoke_mode": c.revoke_mode,
            },
            "trusted": [a.hex() for a in self.trusted],
        }

    def dump(self) -> bytes:
        return self.chain.dump(self.genesis_spec())

    # -- clock ------------------------------------------------------------

    @property
    def now(self) -> int:
        return self.chain.head.timestamp

    def advance_to(self, t: int, on_block=None) -> None:
        interval = self.config.block_interval
        while self.chain.head.timestamp + interval <= t:
            self.mine(self.chain.head.timestamp + interval)
            if on_block:
                on_block()

    def mine(self, timestamp: int | None = None):
        header = self.chain.mine_block(timestamp)
        for handle in self.certs.values():
            if handle.refresh_period is not None:
                handle.agent.tick(self.chain, handle.refresh_period)
        return header

    # -- actors -----------------------------------------------------------

    def resolve_key(self, who: str, domain: str | None = None) -> crypto.KeyPair:
        """``keyid``/``domain`` (policy key), ``ca:<n>``, ``attacker:<n>``, ``tls``, or a bare name."""
        kind, _, name = who.partition(":")
        if not name:
            if who in ("keyid", "domain", "policy") and domain:
                return self.domain_policy_key[domain]
            if who == "tls" and domain:
                return self.domain_tls[domain][0]
            name, kind = who, ""
        if kind == "ca" or (not kind and name in self.ca_keys):
            return self.ca_keys[name]
        if kind == "attacker" or (not kind and name in self.attacker_keys):
            return self.attacker_keys[name]
        if kind == "tls":
            dom, _, idx = name.rpartition(":")
            if dom in self.domain_tls:
                return self.domain_tls[dom][int(idx or 0)]
            return self.domain_tls[name][0]
        if kind == "policy":
            return self.domain_policy_key[name]
        raise KeyError(f"unknown actor {who!r}")

    def ca_address(self, name: str) -> bytes:
        return self.ca_keys[name].address

    def submit(self, key: crypto.KeyPair, target: bytes | None, method: str, args: bytes,
               template: str = "") -> bytes:
        tx = Transaction.build(key, self.chain.nonce_of(key.address), target, method, args, template)
        return self.chain.submit_tx(tx)

    def make_policy(self, domain: str, spec: dict) -> Policy:
        cas = spec.get("cas")
        addresses = self.trusted if cas is None else [self.resolve_key(c).address for c in cas]
        keyid = spec.get("keyid", "keyid")
        return Policy(
            cas=frozenset(addresses),
            keyid=None if keyid is None else self.resolve_key(keyid, domain).address,
            max_lifetime=spec.get("max_lifetime", DEFAULT_MAX_LIFETIME),
            max_err=spec.get("max_err"),
            min_cas=spec.get("min_cas", 1),
            version=spec.get("version", 1),
            type=PolicyType[spec.get("type", "NEW")],
        )

    def register_policy(self, domain: str, spec: dict, signers: list[str], sender: str = "keyid") -> bytes:
        policy = self.make_policy(domain, spec)
        key = self.resolve_key(sender, domain)
        return bootstrap_policy(self.chain, key, domain, policy,
                                [CASigner(self.resolve_key(s)) for s in signers])

    def create_cert(self, cert_id: str, domain: str, cas: list[str] | None = None, sender: str = "keyid",
                    key: str = "tls", refresh_period: int | None = None) -> bytes:
        sender_key = self.resolve_key(sender, domain)
        if key == "tls":
            server_keys = self.domain_tls[domain]
        else:
            server_keys = [self.resolve_key(key, domain)]
        ca_names = cas if cas is not None else list(self.ca_keys)
        tx = create_cert_tx(self.chain, sender_key, domain, [k.public_der for k in server_keys],
                            [self.ca_address(c) for c in ca_names])
        server = HandshakeServer(server_keys[0], rng=random.Random(f"{self.seed}:server:{cert_id}"),
                                 clock=lambda: self.now)
        agent = DomainAgent(domain, server_keys[0], self.domain_policy_key.get(domain), server)
        if refresh_period is None:
            refresh_period = self.domain_cfg.get(domain, {}).get("refresh_period", self.config.epoch // 2)
        self.certs[cert_id] = CertHandle(cert_id, domain, agent, None, refresh_period)
        self.chain.submit_tx(tx)
        return tx.tx_id

    def bind_created(self, cert_id: str, tx_id: bytes) -> bool:
        receipt = self.chain.receipt(tx_id)
        handle = self.certs[cert_id]
        if receipt is None or receipt.contract is None:
            return False
        handle.addr = receipt.contract
        handle.agent.addr = receipt.contract
        handle.agent.refresh(self.chain)
        return True

    def probe(self, ca: str, cert_id: str, wrong_key: str | None = None) -> ValidationProof:
        handle = self.certs[cert_id]
        if wrong_key:
            mitm = HandshakeServer(self.resolve_key(wrong_key), rng=random.Random(f"{self.seed}:mitm:{self.rng.random()}"),
                                   clock=lambda: self.now)
            endpoint = InProcessEndpoint(mitm)
        else:
            endpoint = InProcessEndpoint(handle.agent.server)
        return ca_probe(endpoint, self.ca_address(ca), self.chain.head.hash)

    def submit_update(self, ca: str, cert_id: str, proof: ValidationProof) -> bytes:
        handle = self.certs[cert_id]
        return self.submit(self.ca_keys[ca], handle.addr, "update",
                           encode_update(proof.cli_rnd, proof.srv_rnd, proof.params, proof.sigma))

    def revoke(self, cert_id: str, by: str) -> bytes:
        handle = self.certs[cert_id]
        return self.submit(self.resolve_key(by, handle.domain), handle.addr, "revoke", b"")

    def client_verify(self, client: str, cert_id: str, now: int, staple: bytes | None = None,
                      server_key: str | None = None):
        validator = self.clients[client]
        validator.headers.sync(self.chain.head_range(self._sync_from(validator)))
        handle = self.certs[cert_id]
        server = handle.agent.server
        if staple is not None or server_key is not None:
            key = self.resolve_key(server_key, handle.domain) if server_key else server.key
            server = HandshakeServer(key, staple if staple is not None else server.staple,
                                     rng=random.Random(f"{self.seed}:replay:{now}"), clock=lambda: self.now)
        cli_rnd = self.rng.randbytes(32)
        return client_connect(InProcessEndpoint(server), handle.domain, validator, now, cli_rnd=cli_rnd)

    def _sync_from(self, validator: CertValidator) -> int:
        newest = validator.headers.newest
        return 0 if newest is None else newest.timestamp + 1

    def storage_json(self, cert_id: str) -> dict:
        st = read_cert(self.chain, self.certs[cert_id].addr).to_json()
        st["s"] = {self.names.get(bytes.fromhex(k), k): v for k, v in st["s"].items()}
        st["revs"] = [self.names.get(bytes.fromhex(r), r) for r in st["revs"]]
        st["pks"] = len(st["pks"])
        return st

    def policy_json(self, domain: str) -> dict:
        policy, is_default = read_policy(self.chain, domain)
        return {
            "default": is_default,
            "cas": sorted(self.names.get(c, c.hex()) for c in policy.cas),
            "keyid": None if policy.keyid is None else self.names.get(policy.keyid, policy.keyid.hex()),
            "max_lifetime": policy.max_lifetime,
            "max_err": policy.max_err,
            "min_cas": policy.min_cas,
            "version": policy.version,
            "type": policy.type.name,
            "sigNo": policy.sig_no,
        }


def load_chain(data: bytes) -> Chain:
    """Rebuild a chain from a dump by replaying every block from genesis."""
    meta, blocks = parse_dump(data)
    config = ChainConfig(**meta["config"])
    trusted = [bytes.fromhex(a) for a in meta["trusted"]]
    return replay(Chain(config, genesis=[policy_genesis(trusted)]), blocks)


def _lookup(doc: Any, path: str) -> Any:
    for part in path.split("."):
        if isinstance(doc, dict):
            if part not in doc:
                raise KeyError(path)
            doc = doc[part]
        elif isinstance(doc, list):
            doc = doc[int(part)]
        else:
            raise KeyError(path)
    return doc


class Runner:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        s = scenario
        self.world = World(s.chain, s.seed, s.scheme, s.cas, s.domains, s.attackers, s.clients)
        self._queue: list[tuple[int, int, dict]] = []
        self._seq = 0
        self._pending_receipts: dict[bytes, dict] = {}
        self.actions: list[dict] = []
        self.verdicts: list[dict] = []
        self.failures: list[str] = []
        self._verify_ms: list[float] = []
        self._probe_s = 0.0
        self._probes = 0

    def _push(self, action: dict) -> None:
        heapq.heappush(self._queue, (action["at"], self._seq, action))
        self._seq += 1

    def run(self) -> dict:
        for action in self.scenario.timeline:
            self._push(action)
        end = self.scenario.end
        if end is None:
            end = (self.scenario.timeline[-1]["at"] if self.scenario.timeline else 0) + self.world.config.block_interval
        while self._queue:
            at, _, action = heapq.heappop(self._queue)
            self.world.advance_to(at, self._check_receipts)
            self._execute(action)
        self.world.advance_to(max(end, self.world.now), self._check_receipts)
        if self.world.chain._queue:
            self.world.mine()
            self._check_receipts()
        for tx_id, action in self._pending_receipts.items():
            self._fail(action, "transaction never mined")
        return self.report()

    def _fail(self, action: dict, message: str) -> None:
        self.failures.append(f"{action['id']}: {message}")
        log.info("assertion failed %s: %s", action["id"], message)

    def _expect_receipt(self, action: dict, tx_id: bytes, on_ok=None) -> None:
        action = dict(action)
        action["_on_ok"] = on_ok
        self._pending_receipts[tx_id] = action

    def _check_receipts(self) -> None:
        done = []
        for tx_id, action in self._pending_receipts.items():
            receipt = self.world.chain.receipt(tx_id)
            if receipt is None:
                continue
            done.append(tx_id)
            outcome = "OK" if receipt.status == "OK" else (receipt.error or receipt.status)
            record = {"id": action["id"], "at": action["at"], "do": action["do"], "block": receipt.block,
                      "status": receipt.status, "error": receipt.error,
                      "events": [e.name for e in receipt.events]}
            self.actions.append(record)
            expected = action.get("expect")
            if expected is not None and expected != outcome:
                self._fail(action, f"expected {expected}, got {outcome}")
            event = action.get("expect_event")
            if event is not None and event not in record["events"]:
                self._fail(action, f"expected event {event}, got {record['events']}")
            if receipt.status == "OK" and action.get("_on_ok"):
                action["_on_ok"]()
        for tx_id in done:
            del self._pending_receipts[tx_id]

    def _execute(self, a: dict) -> None:
        w = self.world
        verb = a["do"]
        try:
            if verb == "advance_time":
                w.advance_to(w.now + int(a.get("by", 0)), self._check_receipts)
            elif verb == "mine":
                w.mine(max(a["at"], w.now + 1))
                self._check_receipts()
            elif verb in ("register_policy", "replace_policy"):
                tx = w.register_policy(a["domain"], a.get("policy", {}), a.get("signers", []),
                                       a.get("sender", "keyid"))
                self._expect_receipt(a, tx)
            elif verb == "create_cert":
                cert_id = a.get("cert", a["id"])
                tx = w.create_cert(cert_id, a["domain"], a.get("cas"), a.get("sender", "keyid"),
                                   a.get("key", "tls"), a.get("refresh_period"))
                self._expect_receipt(a, tx, on_ok=lambda: w.bind_created(cert_id, tx))
            elif verb == "ca_probe":
                self._probe(a)
            elif verb == "_submit":
                self._expect_receipt({**a, "do": "ca_probe"}, a["_fn"]())
            elif verb == "revoke":
                tx = w.revoke(a["cert"], a.get("by", "keyid"))
                self._expect_receipt(a, tx)
            elif verb == "client_verify":
                staple = w.staples[a["staple"]] if "staple" in a else None
                t0 = time.perf_counter()
                outcome = w.client_verify(a["client"], a["cert"], a["at"], staple, a.get("server_key"))
                self._verify_ms.append((time.perf_counter() - t0) * 1000)
                got = "OK" if outcome.accepted else outcome.reason
                expected = a.get("expect")
                self.verdicts.append({"id": a["id"], "at": a["at"], "client": a["client"], "cert": a["cert"],
                                      "verdict": got, "expected": expected})
                if expected is not None and got != expected:
                    self._fail(a, f"client verdict {got}, expected {expected}")
            elif verb == "assert_storage":
                doc = w.policy_json(a["domain"]) if "cert" not in a else w.storage_json(a["cert"])
                try:
                    got = _lookup(doc, a["path"])
                except (KeyError, IndexError, ValueError):
                    self._fail(a, f"no such path {a['path']}")
                    return
                self.actions.append({"id": a["id"], "at": a["at"], "do": verb, "path": a["path"], "value": got})
                if got != a["equals"]:
                    self._fail(a, f"{a['path']} = {got!r}, expected {a['equals']!r}")
            elif verb == "capture_cert":
                handle = w.certs[a["cert"]]
                w.staples[a["id"]] = handle.agent.refresh(w.chain).serialize()
            elif verb == "refresh":
                w.certs[a["cert"]].agent.refresh(w.chain)
        except KeyError as exc:
            raise ScenarioParseError(f"{a['id']}: unknown reference {exc}") from None

    def _probe(self, a: dict) -> None:
        w = self.world
        if "replay_from" in a:
            proof = w.proofs[a["replay_from"]]
        else:
            t0 = time.perf_counter()
            proof = w.probe(a["ca"], a["cert"], a.get("wrong_key"))
            self._probe_s += time.perf_counter() - t0
            self._probes += 1
        w.proofs[a["id"]] = proof
        if a.get("no_submit"):
            return
        hold = int(a.get("hold_seconds", 0))
        submitter = a.get("as", a.get("ca"))
        submit = {"id": a["id"], "at": a["at"] + hold, "do": "_submit", "expect": a.get("expect"),
                  "expect_event": a.get("expect_event"),
                  "_fn": lambda: w.submit_update(submitter, a["cert"], proof)}
        if hold:
            self._push(submit)
        else:
            self._execute(submit)

    def report(self) -> dict:
        w = self.world
        final = {}
        for cert_id, handle in sorted(w.certs.items()):
            if handle.addr is not None:
                final[cert_id] = {"addr": handle.addr.hex(), **w.storage_json(cert_id)}
        sizes = {cert_id: len(h.agent.server.staple) for cert_id, h in sorted(w.certs.items()) if h.addr}
        dump = w.dump()
        return {
            "scenario": self.scenario.name,
            "seed": self.scenario.seed,
            "hash": "sha256",
            "height": w.chain.height,
            "actions": self.actions,
            "verdicts": self.verdicts,
            "final": final,
            "metrics": {
                "certificate_bytes": sizes,
                "chain_dump_sha256": H(dump).hex(),
                "probes": self._probes,
                # wall-clock fields; excluded when comparing reports
                "timing": {
                    "verify_latency_ms": latency_summary(self._verify_ms),
                    "probe_rate_per_s": round(self._probes / self._probe_s, 1) if self._probe_s else None,
                },
            },
            "failures": self.failures,
            "ok": not self.failures,
        }


def latency_summary(samples_ms: list[float]) -> dict | None:
    if not samples_ms:
        return None
    return {
        "runs": len(samples_ms),
        "min": round(min(samples_ms), 3),
        "max": round(max(samples_ms), 3),
        "avg": round(statistics.fmean(samples_ms), 3),
        "median": round(statistics.median(samples_ms), 3),
    }


def strip_timing(report: dict) -> dict:
    out = copy.deepcopy(report)
    out.get("metrics", {}).pop("timing", None)
    return out


def check(report: dict) -> None:
    """Raise :class:`AssertionFailed` for the first failed assertion in ``report``."""
    if report["failures"]:
        action_id, _, message = report["failures"][0].partition(": ")
        raise AssertionFailed(action_id, message)


def run(scenario: Scenario | dict | str) -> dict:
    if isinstance(scenario, dict):
        scenario = Scenario.from_dict(scenario)
    elif isinstance(scenario, str):
        scenario = Scenario.load(scenario)
    return Runner(scenario).run()
