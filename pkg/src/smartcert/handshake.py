"""Head of a TLS-1.2-style ephemeral DH handshake.

Only CH -> SH, stapled certificate, SKE, SHD is modelled: enough for a CA to
extract a signed validation proof and for a client to check the stapled
certificate and the SKE signature. No keys are derived.

Wire format: every message is ``u32 length || type || body`` where length
covers type and body.
"""
from __future__ import annotations

import os
import random
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Protocol

from . import codec, crypto
from .contracts import client_random_for

CH, SH, STAPLE, SKE, SHD = 0x01, 0x02, 0x03, 0x04, 0x05
GROUP_SECP256R1 = 0x0017
MAX_FRAME = 1 << 20


class HandshakeError(Exception):
    pass


class ConnectFailed(HandshakeError):
    pass


class MalformedResponse(HandshakeError):
    pass


@dataclass(frozen=True)
class ClientHello:
    cli_rnd: bytes

    def __post_init__(self):
        if len(self.cli_rnd) != 32:
            raise ValueError("client random must be 32 bytes")


@dataclass(frozen=True)
class ServerHello:
    srv_rnd: bytes


@dataclass(frozen=True)
class ServerKeyExchange:
    params: bytes
    sigma: bytes

    def encode(self) -> bytes:
        return struct.pack(">H", len(self.params)) + self.params + struct.pack(">H", len(self.sigma)) + self.sigma

    @classmethod
    def decode(cls, body: bytes) -> "ServerKeyExchange":
        try:
            (n,) = struct.unpack(">H", body[:2])
            params = body[2 : 2 + n]
            (m,) = struct.unpack(">H", body[2 + n : 4 + n])
            sigma = body[4 + n : 4 + n + m]
        except struct.error:
            raise MalformedResponse("truncated SKE") from None
        if len(params) != n or len(sigma) != m or 4 + n + m != len(body):
            raise MalformedResponse("bad SKE length")
        return cls(params, sigma)


@dataclass(frozen=True)
class ServerFlight:
    hello: ServerHello
    staple: bytes
    ske: ServerKeyExchange


@dataclass(frozen=True)
class ValidationProof:
    cli_rnd: bytes
    srv_rnd: bytes
    params: bytes
    sigma: bytes

    @property
    def signed_message(self) -> bytes:
        return self.cli_rnd + self.srv_rnd + self.params

    def to_bytes(self) -> bytes:
        return codec.pack(self.cli_rnd, self.srv_rnd, self.params, self.sigma)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ValidationProof":
        return cls(*codec.unpack(data, 4))

    def to_hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def from_hex(cls, text: str) -> "ValidationProof":
        return cls.from_bytes(bytes.fromhex(text.strip()))


def frame(msg_type: int, body: bytes = b"") -> bytes:
    return struct.pack(">I", 1 + len(body)) + bytes([msg_type]) + body


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    header = _recv_exact(sock, 4)
    (n,) = struct.unpack(">I", header)
    if n < 1 or n > MAX_FRAME:
        raise MalformedResponse(f"bad frame length {n}")
    data = _recv_exact(sock, n)
    return data[0], data[1:]


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise MalformedResponse("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


class HandshakeServer:
    """Server identity plus the currently stapled certificate.

    ``staple`` may be replaced at any time from another thread; each
    response reads it once.
    """

    def __init__(self, key: crypto.KeyPair, staple: bytes = b"", rng: random.Random | None = None,
                 clock: Callable[[], int] | None = None):
        self.key = key
        self.staple = staple  # swapped by plain assignment, which is atomic
        self._rng = rng
        self._lock = threading.Lock()
        self._clock = clock or (lambda: 0)

    def _random(self, n: int) -> bytes:
        if self._rng is None:
            return os.urandom(n)
        with self._lock:
            return self._rng.randbytes(n)

    def respond(self, ch: ClientHello) -> ServerFlight:
        srv_rnd = struct.pack(">I", self._clock() & 0xFFFFFFFF) + self._random(28)
        ephemeral = b"\x04" + self._random(64)
        params = struct.pack(">H", GROUP_SECP256R1) + bytes([len(ephemeral)]) + ephemeral
        sigma = self.key.sign(ch.cli_rnd + srv_rnd + params)
        return ServerFlight(ServerHello(srv_rnd), self.staple, ServerKeyExchange(params, sigma))


class Endpoint(Protocol):
    def handshake(self, ch: ClientHello) -> ServerFlight: ...


class InProcessEndpoint:
    def __init__(self, server: HandshakeServer):
        self.server = server

    def handshake(self, ch: ClientHello) -> ServerFlight:
        return self.server.respond(ch)


class TcpEndpoint:
    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.host, self.port, self.timeout = host, port, timeout

    def handshake(self, ch: ClientHello) -> ServerFlight:
        try:
            sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except OSError as exc:
            raise ConnectFailed(f"{self.host}:{self.port}: {exc}") from None
        try:
            with sock:
                sock.sendall(frame(CH, ch.cli_rnd))
                frames = [read_frame(sock) for _ in range(4)]
        except OSError as exc:
            raise ConnectFailed(str(exc)) from None
        return _parse_flight(frames)

    def __repr__(self) -> str:
        return f"TcpEndpoint({self.host}:{self.port})"


def _parse_flight(frames: list[tuple[int, bytes]]) -> ServerFlight:
    types = [t for t, _ in frames]
    if types != [SH, STAPLE, SKE, SHD]:
        raise MalformedResponse(f"unexpected message sequence {types}")
    sh, staple, ske, shd = (body for _, body in frames)
    if len(sh) != 32 or shd:
        raise MalformedResponse("bad ServerHello or ServerHelloDone")
    return ServerFlight(ServerHello(sh), staple, ServerKeyExchange.decode(ske))


def encode_flight(flight: ServerFlight) -> bytes:
    return (
        frame(SH, flight.hello.srv_rnd)
        + frame(STAPLE, flight.staple)
        + frame(SKE, flight.ske.encode())
        + frame(SHD)
    )


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        try:
            msg_type, body = read_frame(self.request)
            if msg_type != CH:
                return
            flight = self.server.hs.respond(ClientHello(body))
            self.request.sendall(encode_flight(flight))
        except (HandshakeError, ValueError, OSError):
            return


class _ThreadingServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128


class TcpHandshakeServer:
    """Serve ``hs`` on a TCP port in a background thread (one thread per connection)."""

    def __init__(self, hs: HandshakeServer, host: str = "127.0.0.1", port: int = 0):
        self._server = _ThreadingServer((host, port), _Handler)
        self._server.hs = hs
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def endpoint(self) -> TcpEndpoint:
        return TcpEndpoint(*self.address)

    def start(self) -> "TcpHandshakeServer":
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def ca_probe(endpoint: Endpoint, ca_address: bytes, block_hash: bytes) -> ValidationProof:
    """Run a handshake whose client random binds the CA and a recent block."""
    ch = ClientHello(client_random_for(ca_address, block_hash))
    flight = endpoint.handshake(ch)
    return ValidationProof(ch.cli_rnd, flight.hello.srv_rnd, flight.ske.params, flight.ske.sigma)


@dataclass(frozen=True)
class Outcome:
    accepted: bool
    reason: str = "OK"

    def __str__(self) -> str:
        return "ACCEPT" if self.accepted else f"REJECT({self.reason})"


def client_connect(endpoint: Endpoint, name: str, validator, now: int,
                   cli_rnd: bytes | None = None) -> Outcome:
    """Check the stapled certificate, then the SKE signature under the certified keys.

    ``validator`` is a :class:`smartcert.client.CertValidator` (anything with a
    ``verify(name, cert_bytes, now)`` returning a verdict with ``ok``,
    ``reason`` and ``st``).
    """
    ch = ClientHello(cli_rnd if cli_rnd is not None else os.urandom(32))
    try:
        flight = endpoint.handshake(ch)
    except ConnectFailed:
        return Outcome(False, "CONNECT_FAILED")
    except MalformedResponse:
        return Outcome(False, "MALFORMED")
    verdict = validator.verify(name, flight.staple, now)
    if not verdict.ok:
        return Outcome(False, verdict.reason)
    message = ch.cli_rnd + flight.hello.srv_rnd + flight.ske.params
    if not any(crypto.verify_signature(pk, message, flight.ske.sigma) for pk in verdict.st.pks):
        return Outcome(False, "BAD_SKE_SIG")
    return Outcome(True)
