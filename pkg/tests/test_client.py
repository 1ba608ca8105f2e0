import builtins
import socket
from dataclasses import replace

import pytest

from smartcert.chain import BlockHeader, Chain, ChainConfig, Transaction
from smartcert.client import REASONS, BrokenChain, CertValidator, HeaderStore, TrustAnchors, verify_cert
from smartcert.contracts import CERT_TEMPLATE, SmartCertContract, encode_init
from smartcert.domain import SmartCertCertificate, assemble_certificate
from smartcert.trie import InclusionProof
from support import mined, update, with_cert, world


def headers(n, horizon=10**9):
    chain = Chain(ChainConfig())
    for _ in range(n):
        chain.mine_block()
    return chain, HeaderStore(horizon)


def test_sync_honest_feed():
    chain, store = headers(100)
    assert store.sync(chain.head_range(0)) == 101
    assert store.sync(chain.head_range(0)) == 0
    assert store.newest == chain.head and store.get(50) == chain.header_at(50)


def test_tampered_timestamp_breaks_at_next_header():
    chain, store = headers(10)
    feed = chain.head_range(0)
    feed[5] = replace(feed[5], timestamp=feed[5].timestamp + 1)
    with pytest.raises(BrokenChain) as info:
        store.sync(feed)
    assert info.value.header.number == 6
    assert store.newest.number == 5


def test_gap_in_feed():
    chain, store = headers(10)
    feed = chain.head_range(0)
    del feed[3]
    with pytest.raises(BrokenChain):
        store.sync(feed)


def test_pruning_and_serialization():
    chain, store = headers(200, horizon=600)
    store.sync(chain.head_range(0))
    assert store.oldest.timestamp >= chain.head.timestamp - 600
    assert len(store) == 600 // 15 + 1
    again = HeaderStore.from_bytes(store.serialize(), 600)
    assert again.newest == store.newest and len(again) == len(store)
    with pytest.raises(ValueError):
        HeaderStore.from_bytes(b"\x00" * 111, 600)


@pytest.fixture
def served():
    w = world(epoch=600, max_stale=1200)
    with_cert(w, {"min_cas": 1})
    update(w, "ca1")
    cert = assemble_certificate(w.chain, w.certs["site"].addr)
    v = w.clients["alice"]
    v.headers.sync(w.chain.head_range(0))
    return w, cert, v


def check(v, cert, now, name="example.com"):
    blob = cert.serialize() if isinstance(cert, SmartCertCertificate) else cert
    return v.verify(name, blob, now).reason


def test_ok_and_staleness_bound(served):
    w, cert, v = served
    updated = cert.st.updated
    assert check(v, cert, updated + 1200) == "OK"
    assert check(v, cert, updated + 1201) == "STALE"


def test_decode_error(served):
    _, cert, v = served
    assert check(v, b"\x00" * 10, 0) == "DECODE_ERROR"
    assert check(v, cert.serialize()[:-5], 0) == "DECODE_ERROR"


def test_unknown_root(served):
    _, cert, v = served
    assert check(v, replace(cert, anchor=10**6), 0) == "UNKNOWN_ROOT"


def test_inconsistent_proofs(served):
    w, cert, v = served
    assert check(v, replace(cert, addr=b"\x01" * 20), 0) == "PROOF_INCONSISTENT"
    other = mined(w, w.create_cert("other", "example.com", ["ca1"]))
    # account proof for a different contract under the same root
    _, acct_other, _ = w.chain.get_storage_proof(other.contract, ["name"])
    fresh = assemble_certificate(w.chain, w.certs["site"].addr)
    v.headers.sync(w.chain.head_range(0))
    assert check(v, replace(fresh, account_proof=acct_other), 0) == "PROOF_INCONSISTENT"
    label, proof = fresh.slots[0]
    swapped = ((fresh.slots[1][0], proof),) + fresh.slots[1:]
    assert check(v, replace(fresh, slots=swapped), 0) == "PROOF_INCONSISTENT"


def test_bad_code():
    class Evil(SmartCertContract):
        template_id = "evil.cert"

    w = world(epoch=600, max_stale=1200)
    w.chain.register_template(Evil)
    key = w.attacker_keys["mallory"]
    tx = Transaction.build(key, 0, None, "init",
                           encode_init("example.com", [key.public_der], [w.ca_address("ca1")]), template="evil.cert")
    r = mined(w, w.chain.submit_tx(tx))
    assert r.status == "OK"
    cert = assemble_certificate(w.chain, r.contract)
    v = w.clients["alice"]
    v.headers.sync(w.chain.head_range(0))
    assert check(v, cert, w.now) == "BAD_CODE"
    assert CERT_TEMPLATE != Evil.template_id


def test_bad_storage_proof(served):
    _, cert, v = served
    slots = list(cert.slots)
    i = [label for label, _ in slots].index("valid")
    label, p = slots[i]
    slots[i] = (label, InclusionProof(p.key, (0).to_bytes(32, "big"), p.bitmap, p.siblings))
    assert check(v, replace(cert, slots=tuple(slots)), 0) == "BAD_STORAGE_PROOF"


def test_name_mismatch(served):
    _, cert, v = served
    assert check(v, cert, 0, name="evil.example") == "NAME_MISMATCH"


def test_invalid(served):
    w, _, v = served
    mined(w, w.revoke("site", "keyid"))
    cert = assemble_certificate(w.chain, w.certs["site"].addr)
    v.headers.sync(w.chain.head_range(0))
    assert check(v, cert, w.now) == "INVALID"
    assert check(v, cert, w.now + 10**6) == "INVALID"  # validity is checked before freshness


def test_check_order(served):
    w, cert, v = served
    # name wrong, stale and unknown root at once: the root wins
    assert check(v, replace(cert, anchor=10**6), 10**9, name="x") == "UNKNOWN_ROOT"
    # name wrong and stale: name wins
    assert check(v, cert, 10**9, name="x") == "NAME_MISMATCH"
    assert REASONS.index("UNKNOWN_ROOT") < REASONS.index("PROOF_INCONSISTENT") < REASONS.index("BAD_CODE") \
        < REASONS.index("BAD_STORAGE_PROOF") < REASONS.index("NAME_MISMATCH") < REASONS.index("INVALID") \
        < REASONS.index("STALE")


def test_no_io_during_verify(served, monkeypatch):
    _, cert, v = served
    blob = cert.serialize()

    def boom(*a, **k):
        raise AssertionError("verification touched I/O")

    monkeypatch.setattr(socket, "socket", boom)
    monkeypatch.setattr(socket, "create_connection", boom)
    monkeypatch.setattr(builtins, "open", boom)
    assert v.verify("example.com", blob, 0).reason == "OK"


def test_three_day_store_bound():
    chain = Chain(ChainConfig(max_stale=3 * 86400))
    store = HeaderStore(3 * 86400)
    for _ in range(4 * 86400 // 15):
        chain.mine_block()
    store.sync(chain.head_range(0))
    assert len(store) <= 17_400
    assert len(store.serialize()) <= 12 * 1024 * 1024
    assert len(store.serialize()) == len(store) * BlockHeader.SIZE


def test_validator_interface_is_chain_free(served):
    _, _, v = served
    assert isinstance(v, CertValidator)
    assert set(vars(v)) == {"headers", "anchors"}
    assert isinstance(v.anchors, TrustAnchors)
    assert verify_cert.__code__.co_argcount == 5
