import os
import random
import socket
import socketserver
import struct
import threading
from concurrent.futures import ThreadPoolExecutor

import pytest

from smartcert import crypto
from smartcert.contracts import client_random_for
from smartcert.handshake import (
    CH,
    SH,
    SKE,
    STAPLE,
    ClientHello,
    ConnectFailed,
    HandshakeServer,
    MalformedResponse,
    ServerKeyExchange,
    TcpEndpoint,
    TcpHandshakeServer,
    ValidationProof,
    ca_probe,
    client_connect,
    frame,
)
from support import mined, update

RSA = crypto.rsa_keypair("handshake-server")


def test_honest_response_verifies():
    server = HandshakeServer(RSA, b"staple", clock=lambda: 0x01020304)
    ch = ClientHello(os.urandom(32))
    flight = server.respond(ch)
    assert flight.hello.srv_rnd[:4] == b"\x01\x02\x03\x04" and len(flight.hello.srv_rnd) == 32
    params = flight.ske.params
    assert params[:2] == b"\x00\x17" and params[2] == 65 and params[3] == 0x04 and len(params) == 68
    assert crypto.verify_signature(RSA.public_der, ch.cli_rnd + flight.hello.srv_rnd + params, flight.ske.sigma)
    assert flight.staple == b"staple"


def test_wrong_key_fails_under_certified_key():
    mitm = HandshakeServer(crypto.ed25519_keypair("mitm"))
    ch = ClientHello(os.urandom(32))
    f = mitm.respond(ch)
    assert not crypto.verify_signature(RSA.public_der, ch.cli_rnd + f.hello.srv_rnd + f.ske.params, f.ske.sigma)


def test_responses_do_not_repeat():
    server = HandshakeServer(crypto.ed25519_keypair("fresh"))
    ch = ClientHello(b"\x00" * 32)
    seen_rnd, seen_params = set(), set()
    for _ in range(1000):
        f = server.respond(ch)
        seen_rnd.add(f.hello.srv_rnd)
        seen_params.add(f.ske.params)
    assert len(seen_rnd) == len(seen_params) == 1000


def test_client_hello_length():
    with pytest.raises(ValueError):
        ClientHello(b"short")


def test_wire_format():
    assert frame(CH, b"\xaa" * 32) == struct.pack(">I", 33) + b"\x01" + b"\xaa" * 32
    ske = ServerKeyExchange(b"pp", b"sss")
    assert ske.encode() == b"\x00\x02pp\x00\x03sss"
    assert ServerKeyExchange.decode(ske.encode()) == ske
    with pytest.raises(MalformedResponse):
        ServerKeyExchange.decode(b"\x00\x05pp")


def test_proof_hex_roundtrip():
    p = ValidationProof(b"a" * 32, b"b" * 32, b"params", b"sig")
    assert ValidationProof.from_hex(p.to_hex()) == p
    assert p.signed_message == b"a" * 32 + b"b" * 32 + b"params"


def test_probe_over_tcp():
    server = HandshakeServer(RSA, b"cert-bytes")
    ca, block = b"\x11" * 20, b"\x22" * 32
    with TcpHandshakeServer(server) as srv:
        proof = ca_probe(srv.endpoint(), ca, block)
    assert proof.cli_rnd == client_random_for(ca, block)
    assert crypto.verify_signature(RSA.public_der, proof.signed_message, proof.sigma)


def test_connect_failed():
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    with pytest.raises(ConnectFailed):
        ca_probe(TcpEndpoint("127.0.0.1", port, timeout=1), b"\x00" * 20, b"\x00" * 32)
    assert client_connect(TcpEndpoint("127.0.0.1", port, timeout=1), "x", None, 0).reason == "CONNECT_FAILED"


class _Garbage(socketserver.BaseRequestHandler):
    def handle(self):
        self.request.recv(64)
        self.request.sendall(frame(SKE, b"") + frame(SH, b"x" * 32) + frame(STAPLE) + frame(SKE))


def test_malformed_response():
    srv = socketserver.TCPServer(("127.0.0.1", 0), _Garbage)
    t = threading.Thread(target=srv.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
    t.start()
    try:
        endpoint = TcpEndpoint(*srv.server_address[:2])
        with pytest.raises(MalformedResponse):
            ca_probe(endpoint, b"\x00" * 20, b"\x00" * 32)
        assert client_connect(endpoint, "x", None, 0).reason == "MALFORMED"
    finally:
        srv.shutdown()
        srv.server_close()


def test_forgeries_rejected():
    rng = random.Random(10)
    server = HandshakeServer(RSA)
    ch = ClientHello(rng.randbytes(32))
    f = server.respond(ch)
    message = ch.cli_rnd + f.hello.srv_rnd + f.ske.params
    for _ in range(10_000):
        assert not crypto.verify_signature(RSA.public_der, message, rng.randbytes(256))


def test_client_connect_outcomes(certified):
    w = certified
    update(w, "ca1")
    w.certs["site"].agent.refresh(w.chain)
    assert str(w.client_verify("alice", "site", w.now)) == "ACCEPT"
    assert str(w.client_verify("alice", "site", w.now, server_key="mallory")) == "REJECT(BAD_SKE_SIG)"
    mined(w, w.revoke("site", "keyid"))
    w.certs["site"].agent.refresh(w.chain)
    assert str(w.client_verify("alice", "site", w.now)) == "REJECT(INVALID)"


def test_accepted_proof_verifies_off_chain(certified):
    w = certified
    proof = w.probe("ca1", "site")
    r = mined(w, w.submit_update("ca1", "site", proof))
    assert r.events[0].name == "ValidationOk"
    pk = w.domain_tls["example.com"][0].public_der
    assert crypto.verify_signature(pk, proof.cli_rnd + proof.srv_rnd + proof.params, proof.sigma)


def test_staple_swap_under_load():
    server = HandshakeServer(crypto.ed25519_keypair("swap"), b"A" * 100)
    stop = threading.Event()

    def swapper():
        i = 0
        while not stop.is_set():
            server.staple = (b"A" if i % 2 else b"B") * 100
            i += 1

    t = threading.Thread(target=swapper)
    t.start()
    try:
        with TcpHandshakeServer(server) as srv:
            endpoint = srv.endpoint()
            with ThreadPoolExecutor(8) as pool:
                flights = list(pool.map(lambda _: endpoint.handshake(ClientHello(os.urandom(32))), range(200)))
    finally:
        stop.set()
        t.join()
    assert {f.staple for f in flights} <= {b"A" * 100, b"B" * 100}
