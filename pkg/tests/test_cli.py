import json
import shutil
import subprocess

import pytest

from smartcert import crypto
from smartcert.cli import main
from smartcert.contracts import ca_tag
from smartcert.handshake import HandshakeServer, TcpHandshakeServer, ValidationProof


@pytest.fixture(scope="module")
def dumped(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    report, dump = d / "report.json", d / "chain.bin"
    assert main(["run", "revoke-then-replay", "--report", str(report), "--dump", str(dump)]) == 0
    return d, json.loads(report.read_text()), dump


def test_run_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"timeline": [{"at": 0, "do": "teleport"}]}')
    assert main(["run", str(bad)]) == 3
    failing = tmp_path / "failing.json"
    failing.write_text(json.dumps({
        "scheme": "ed25519", "cas": ["ca1"], "domains": [{"name": "f.example"}],
        "timeline": [{"at": 0, "id": "nope", "do": "assert_storage", "domain": "f.example",
                      "path": "default", "equals": False}],
    }))
    assert main(["run", str(failing)]) == 2
    assert "FAILED nope" in capsys.readouterr().out


def test_scenarios_listing(capsys):
    assert main(["scenarios"]) == 0
    assert "honest-3ca-10epochs" in capsys.readouterr().out.split()


def test_chain_load_and_inspect(dumped, capsys):
    d, report, dump = dumped
    headers = d / "headers.bin"
    assert main(["chain", "load", str(dump), "--headers", str(headers), "--since", "0"]) == 0
    assert json.loads(capsys.readouterr().out)["height"] == report["height"]
    addr = report["final"]["shop"]["addr"]
    assert main(["contract", "inspect", addr, "--chain", str(dump)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["revoked"] is True and doc["domainName"] == "shop.example"
    assert main(["contract", "inspect", "00" * 20, "--chain", str(dump)]) == 1


def test_policy_inspect(dumped, capsys):
    _, _, dump = dumped
    from smartcert.contracts import POLICY_ADDRESS

    assert main(["contract", "inspect", POLICY_ADDRESS.hex(), "--chain", str(dump), "--name", "shop.example"]) == 0
    assert json.loads(capsys.readouterr().out)["sigNo"] == 1


def test_client_verify_exit_codes(dumped, capsys):
    d, report, dump = dumped
    headers, cert = d / "h.bin", d / "cert.bin"
    main(["chain", "load", str(dump), "--headers", str(headers)])
    main(["contract", "certificate", report["final"]["shop"]["addr"], "--chain", str(dump), "--out", str(cert)])
    capsys.readouterr()
    args = ["client", "verify", "--cert", str(cert), "--headers", str(headers), "--now", "90100"]
    assert main(args + ["--name", "shop.example"]) == 1
    assert capsys.readouterr().out.strip() == "INVALID"
    assert main(args + ["--name", "other.example"]) == 1
    assert capsys.readouterr().out.strip() == "NAME_MISMATCH"


def test_chain_dump_is_deterministic(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert main(["chain", "dump", "policy-collusion", "--out", str(a), "--receipts", str(tmp_path / "r.jsonl")]) == 0
    assert main(["chain", "dump", "policy-collusion", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "r.jsonl").read_text().count("\n") > 5


def test_handshake_probe(tmp_path, dumped, capsys):
    _, _, dump = dumped
    key_file = tmp_path / "ca.key"
    assert main(["keygen", "--seed", "cli-ca", "--scheme", "ed25519", "--out", str(key_file)]) == 0
    ca_addr = capsys.readouterr().out.strip()
    server_key = crypto.ed25519_keypair("cli-server")
    with TcpHandshakeServer(HandshakeServer(server_key)) as srv:
        host, port = srv.address
        assert main(["handshake", "probe", "--endpoint", f"{host}:{port}", "--ca-key", str(key_file),
                     "--chain", str(dump)]) == 0
    proof = ValidationProof.from_hex(capsys.readouterr().out)
    assert proof.cli_rnd[:4] == ca_tag(bytes.fromhex(ca_addr))
    assert crypto.verify_signature(server_key.public_der, proof.signed_message, proof.sigma)


def test_bench_commands(capsys):
    assert main(["bench", "verify", "--iterations", "5"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["latency_ms"]["runs"] == 5
    assert main(["bench", "probe", "--endpoints", "3", "--parallelism", "2", "--duration", "0.5"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["handshakes"] > 0 and out["failures"] == 0


@pytest.mark.skipif(shutil.which("smartcert") is None, reason="console script not installed")
def test_console_script():
    done = subprocess.run(["smartcert", "scenarios"], capture_output=True, text=True, check=True)
    assert "revocation-race" in done.stdout
