"""``smartcert`` command line."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from importlib import resources
from pathlib import Path

from . import crypto
from .chain import ChainError, UnknownAccount
from .codec import DecodeError
from .client import CertValidator, HeaderStore, TrustAnchors
from .contracts import POLICY_ADDRESS, SmartCertContract, read_cert
from .domain import DomainAgent, refresh_loop
from .handshake import HandshakeServer, TcpEndpoint, TcpHandshakeServer, ca_probe

EXIT_OK, EXIT_FAIL, EXIT_ASSERT, EXIT_PARSE = 0, 1, 2, 3


def bundled_scenarios() -> dict[str, Path]:
    root = resources.files("smartcert") / "scenarios"
    return {p.name[:-5]: Path(str(p)) for p in root.iterdir() if p.name.endswith(".json")}


def _scenario_path(arg: str) -> str:
    if Path(arg).exists():
        return arg
    bundled = bundled_scenarios()
    if arg in bundled:
        return str(bundled[arg])
    return arg  # let the loader report it


def _read_blob(path: str) -> bytes:
    data = Path(path).read_bytes()
    try:
        return bytes.fromhex(data.decode("ascii").strip())
    except (UnicodeDecodeError, ValueError):
        return data


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_run(args) -> int:
    from .scenario import Runner, Scenario, ScenarioParseError

    try:
        scenario = Scenario.load(_scenario_path(args.scenario))
        runner = Runner(scenario)
        report = runner.run()
    except ScenarioParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    for v in report["verdicts"]:
        print(f"t={v['at']:>8} {v['client']:>8} {v['cert']:>10} {v['verdict']}")
    for f in report["failures"]:
        print(f"FAILED {f}")
    print(f"{scenario.name}: {'ok' if report['ok'] else 'FAILED'} "
          f"({len(report['verdicts'])} verdicts, height {report['height']})")
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True))
    if args.dump:
        Path(args.dump).write_bytes(runner.world.dump())
    return EXIT_OK if report["ok"] else EXIT_ASSERT


def cmd_scenarios(args) -> int:
    for name in sorted(bundled_scenarios()):
        print(name)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench_probe, bench_verify

    if args.which == "probe":
        _emit(bench_probe(args.endpoints, args.parallelism, args.duration))
    else:
        _emit(bench_verify(args.iterations))
    return EXIT_OK


def _load_chain(path: str):
    from .scenario import load_chain

    return load_chain(Path(path).read_bytes())


def cmd_chain_dump(args) -> int:
    from .scenario import Runner, Scenario, ScenarioParseError

    try:
        runner = Runner(Scenario.load(_scenario_path(args.scenario)))
    except ScenarioParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    runner.run()
    Path(args.out).write_bytes(runner.world.dump())
    if args.receipts:
        Path(args.receipts).write_text(runner.world.chain.receipts_jsonl())
    print(f"wrote {args.out} (height {runner.world.chain.height})")
    return EXIT_OK


def cmd_chain_load(args) -> int:
    try:
        chain = _load_chain(args.dump)
    except (ValueError, ChainError) as exc:
        print(f"replay failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps({"height": chain.height, "head": chain.head.hash.hex(),
                      "timestamp": chain.head.timestamp}))
    if args.headers:
        since = args.since if args.since is not None else chain.head.timestamp - chain.config.max_stale
        Path(args.headers).write_bytes(b"".join(h.serialize() for h in chain.head_range(since)))
    return EXIT_OK


def cmd_contract_inspect(args) -> int:
    from .contracts import read_policy

    chain = _load_chain(args.chain)
    addr = bytes.fromhex(args.addr.removeprefix("0x"))
    try:
        if addr == POLICY_ADDRESS:
            if not args.name:
                print("the policy contract needs --name", file=sys.stderr)
                return EXIT_FAIL
            policy, is_default = read_policy(chain, args.name)
            _emit({
                "default": is_default,
                "cas": sorted(c.hex() for c in policy.cas),
                "keyid": policy.keyid.hex() if policy.keyid else None,
                "max_lifetime": policy.max_lifetime,
                "max_err": policy.max_err,
                "min_cas": policy.min_cas,
                "version": policy.version,
                "type": policy.type.name,
                "sigNo": policy.sig_no,
            })
        else:
            doc = read_cert(chain, addr).to_json()
            doc["codeHash"] = chain.code_hash_of(addr).hex()
            _emit(doc)
    except (UnknownAccount, DecodeError):
        print(f"no contract at {addr.hex()}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_contract_certificate(args) -> int:
    from .domain import UnknownContract, assemble_certificate

    chain = _load_chain(args.chain)
    try:
        cert = assemble_certificate(chain, bytes.fromhex(args.addr.removeprefix("0x")))
    except UnknownContract as exc:
        print(f"no contract at {exc}", file=sys.stderr)
        return EXIT_FAIL
    Path(args.out).write_bytes(cert.serialize())
    print(f"wrote {args.out} ({len(cert.serialize())} bytes, anchor {cert.anchor})")
    return EXIT_OK


def cmd_client_verify(args) -> int:
    headers = HeaderStore.from_bytes(Path(args.headers).read_bytes(), args.prune_horizon)
    code_hash = bytes.fromhex(args.code_hash) if args.code_hash else SmartCertContract.code_hash()
    validator = CertValidator(headers, TrustAnchors(code_hash, args.max_stale))
    verdict = validator.verify(args.name, _read_blob(args.cert), args.now)
    print(verdict.reason)
    return EXIT_OK if verdict.ok else EXIT_FAIL


def _endpoint(text: str) -> TcpEndpoint:
    host, _, port = text.rpartition(":")
    return TcpEndpoint(host or "127.0.0.1", int(port))


def cmd_handshake_probe(args) -> int:
    key = crypto.KeyPair.from_pkcs8(_read_blob(args.ca_key))
    block_hash = _load_chain(args.chain).head.hash
    proof = ca_probe(_endpoint(args.endpoint), key.address, block_hash)
    print(proof.to_hex())
    return EXIT_OK


def cmd_keygen(args) -> int:
    key = crypto.keypair(args.seed, args.scheme)
    Path(args.out).write_text(key.to_pkcs8().hex() + "\n")
    print(key.address.hex())
    return EXIT_OK


def cmd_domain_run(args) -> int:
    """Serve handshakes and refresh the staple from a chain dump file on a wall-clock period.

    Config keys: name, tls_key (PKCS#8 file), addr (contract hex), chain (dump file),
    host, port, period (seconds).
    """
    cfg = json.loads(Path(args.config).read_text())
    key = crypto.KeyPair.from_pkcs8(_read_blob(cfg["tls_key"]))
    agent = DomainAgent(cfg["name"], key, server=HandshakeServer(key))
    agent.addr = bytes.fromhex(cfg["addr"])
    stop = threading.Event()
    with TcpHandshakeServer(agent.server, cfg.get("host", "127.0.0.1"), cfg.get("port", 0)) as srv:
        print("serving on {}:{}".format(*srv.address), flush=True)
        try:
            refresh_loop(agent, lambda: _load_chain(cfg["chain"]), cfg.get("period", 3600), stop)
        except KeyboardInterrupt:
            stop.set()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smartcert", description="Self-enforcing certificate simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file or a bundled scenario by name")
    r.add_argument("scenario")
    r.add_argument("--report")
    r.add_argument("--dump", help="also write the chain dump")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("scenarios", help="list bundled scenarios")
    s.set_defaults(fn=cmd_scenarios)

    b = sub.add_parser("bench", help="desk-scale benchmarks")
    b.add_argument("which", choices=["probe", "verify"])
    b.add_argument("--endpoints", type=int, default=100)
    b.add_argument("--parallelism", type=int, default=32)
    b.add_argument("--duration", type=float, default=10.0)
    b.add_argument("--iterations", type=int, default=100)
    b.set_defaults(fn=cmd_bench)

    c = sub.add_parser("chain", help="chain dumps")
    csub = c.add_subparsers(dest="chain_cmd", required=True)
    cd = csub.add_parser("dump", help="run a scenario and write its chain")
    cd.add_argument("scenario")
    cd.add_argument("--out", required=True)
    cd.add_argument("--receipts", help="write receipts as JSON lines")
    cd.set_defaults(fn=cmd_chain_dump)
    cl = csub.add_parser("load", help="replay a dump and check every header")
    cl.add_argument("dump")
    cl.add_argument("--headers", help="write recent headers for a light client")
    cl.add_argument("--since", type=int)
    cl.set_defaults(fn=cmd_chain_load)

    k = sub.add_parser("contract", help="contract storage")
    ksub = k.add_subparsers(dest="contract_cmd", required=True)
    ki = ksub.add_parser("inspect")
    ki.add_argument("addr")
    ki.add_argument("--chain", required=True)
    ki.add_argument("--name", help="domain name, for the policy contract")
    ki.set_defaults(fn=cmd_contract_inspect)
    kc = ksub.add_parser("certificate", help="assemble a certificate at the chain head")
    kc.add_argument("addr")
    kc.add_argument("--chain", required=True)
    kc.add_argument("--out", required=True)
    kc.set_defaults(fn=cmd_contract_certificate)

    cli = sub.add_parser("client", help="offline certificate check")
    clsub = cli.add_subparsers(dest="client_cmd", required=True)
    cv = clsub.add_parser("verify")
    cv.add_argument("--cert", required=True, help="certificate file (binary or hex)")
    cv.add_argument("--name", required=True)
    cv.add_argument("--headers", required=True)
    cv.add_argument("--now", type=int, required=True)
    cv.add_argument("--max-stale", type=int, default=86400)
    cv.add_argument("--prune-horizon", type=int, default=3 * 86400)
    cv.add_argument("--code-hash")
    cv.set_defaults(fn=cmd_client_verify)

    h = sub.add_parser("handshake", help="CA-side handshake")
    hsub = h.add_subparsers(dest="hs_cmd", required=True)
    hp = hsub.add_parser("probe")
    hp.add_argument("--endpoint", required=True, help="host:port")
    hp.add_argument("--ca-key", required=True, help="PKCS#8 file (binary or hex)")
    hp.add_argument("--chain", required=True, help="chain dump supplying the freshness anchor")
    hp.set_defaults(fn=cmd_handshake_probe)

    kg = sub.add_parser("keygen", help="deterministic key for experiments")
    kg.add_argument("--seed", required=True)
    kg.add_argument("--scheme", choices=["rsa", "ed25519"], default="rsa")
    kg.add_argument("--out", required=True)
    kg.set_defaults(fn=cmd_keygen)

    d = sub.add_parser("domain", help="domain agent")
    dsub = d.add_subparsers(dest="domain_cmd", required=True)
    dr = dsub.add_parser("run")
    dr.add_argument("--config", required=True)
    dr.set_defaults(fn=cmd_domain_run)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
