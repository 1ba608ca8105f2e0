"""Shared builders for tests; fast Ed25519 keys unless a test needs RSA."""
from smartcert.chain import ChainConfig
from smartcert.scenario import World


def world(cas=("ca1", "ca2", "ca3"), scheme="ed25519", seed=0, domains=("example.com",),
          attackers=("mallory",), clients=("alice",), **config):
    return World(
        ChainConfig(**config),
        seed=seed,
        scheme=scheme,
        cas=list(cas),
        domains=[{"name": d} for d in domains],
        attackers=list(attackers),
        clients=[{"id": c} for c in clients],
    )


def mined(w, tx_id):
    """Mine until ``tx_id`` has a receipt and return it."""
    while w.chain.receipt(tx_id) is None:
        w.mine()
    return w.chain.receipt(tx_id)


def with_cert(w, policy=None, signers=("ca1",), cas=None, domain="example.com", cert_id="site"):
    """Register a policy (unless ``policy`` is False) and create a certificate."""
    if policy is not False:
        r = mined(w, w.register_policy(domain, policy or {}, list(signers)))
        assert r.status == "OK", r.error
    tx = w.create_cert(cert_id, domain, cas)
    r = mined(w, tx)
    assert r.status == "OK", r.error
    w.bind_created(cert_id, tx)
    return cert_id


def update(w, ca, cert_id="site", wrong_key=None):
    r = mined(w, w.submit_update(ca, cert_id, w.probe(ca, cert_id, wrong_key)))
    return r


# criterion number -> "PASS/FAIL criterion N: ..." line, filled by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def record(n, title, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line
