"""Desk-scale benchmarks: CA probe throughput and client verification latency."""
from __future__ import annotations

import itertools
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import ExitStack

from .chain import ChainConfig
from .client import CertValidator, verify_cert
from .handshake import HandshakeServer, TcpHandshakeServer, ca_probe
from .scenario import World, latency_summary


def sample_world(seed: int = 0, scheme: str = "rsa") -> tuple[World, str]:
    """A chain with one policy-bound certificate validated once by each of three CAs."""
    world = World(ChainConfig(), seed=seed, scheme=scheme, cas=["ca1", "ca2", "ca3"],
                  domains=[{"name": "bench.example"}], clients=[{"id": "bench"}])
    world.register_policy("bench.example", {"min_cas": 2}, ["ca1", "ca2"])
    world.mine()
    tx = world.create_cert("site", "bench.example")
    world.mine()
    world.bind_created("site", tx)
    for ca in ("ca1", "ca2", "ca3"):
        world.submit_update(ca, "site", world.probe(ca, "site"))
        world.mine()
    world.certs["site"].agent.refresh(world.chain)
    return world, "site"


def bench_probe(endpoints: int = 100, parallelism: int = 32, duration: float = 10.0,
                epoch: int = ChainConfig.epoch, seed: int = 0) -> dict:
    """Sustained CA probe rate against ``endpoints`` loopback servers."""
    world, cert_id = sample_world(seed)
    agent = world.certs[cert_id].agent
    ca_addr = world.ca_address("ca1")
    block_hash = world.chain.head.hash
    with ExitStack() as stack:
        servers = [
            stack.enter_context(TcpHandshakeServer(HandshakeServer(agent.tls_key, agent.server.staple)))
            for _ in range(endpoints)
        ]
        targets = itertools.cycle([s.endpoint() for s in servers])
        lock = threading.Lock()
        failures = 0
        deadline = time.perf_counter() + duration

        def worker() -> int:
            nonlocal failures
            done = 0
            while time.perf_counter() < deadline:
                with lock:
                    endpoint = next(targets)
                try:
                    ca_probe(endpoint, ca_addr, block_hash)
                    done += 1
                except Exception:
                    with lock:
                        failures += 1
            return done

        start = time.perf_counter()
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            total = sum(pool.map(lambda _: worker(), range(parallelism)))
        elapsed = time.perf_counter() - start
    rate = total / elapsed
    return {
        "endpoints": endpoints,
        "parallelism": parallelism,
        "seconds": round(elapsed, 3),
        "handshakes": total,
        "failures": failures,
        "rate_per_s": round(rate, 1),
        # one CA probing at this rate covers this many certificates per epoch
        "certificates_per_epoch": int(rate * 3600 * (epoch / 3600)),
    }


def bench_verify(iterations: int = 100, seed: int = 0, scheme: str = "rsa") -> dict:
    """Latency of offline certificate verification over ``iterations`` runs (ms)."""
    world, cert_id = sample_world(seed, scheme)
    validator: CertValidator = world.clients["bench"]
    validator.headers.sync(world.chain.head_range(0))
    staple = world.certs[cert_id].agent.server.staple
    name = world.certs[cert_id].domain
    now = world.now

    def measure(blob: bytes, expect: str) -> list[float]:
        samples = []
        for _ in range(iterations):
            t0 = time.perf_counter()
            verdict = verify_cert(name, blob, now, validator.headers, validator.anchors)
            samples.append((time.perf_counter() - t0) * 1000)
            if verdict.reason != expect:
                raise RuntimeError(f"benchmark certificate verified as {verdict.reason}, expected {expect}")
        return samples

    ok = measure(staple, "OK")
    tampered = bytearray(staple)
    tampered[-1] ^= 1  # last sibling of the last slot proof
    bad = measure(bytes(tampered), "BAD_STORAGE_PROOF")
    return {
        "iterations": iterations,
        "certificate_bytes": len(staple),
        "latency_ms": latency_summary(ok),
        "tampered_latency_ms": latency_summary(bad),
    }
