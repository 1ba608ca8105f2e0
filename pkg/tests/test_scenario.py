import json
import re
from pathlib import Path

import pytest

from smartcert.cli import bundled_scenarios
from smartcert.scenario import (
    AssertionFailed,
    Runner,
    Scenario,
    ScenarioParseError,
    check,
    load_chain,
    run,
    strip_timing,
)

BASE = {
    "name": "t",
    "seed": 11,
    "scheme": "ed25519",
    "chain": {"epoch": 600, "max_stale": 1200},
    "cas": ["ca1", "ca2"],
    "domains": [{"name": "t.example", "refresh_period": 120}],
    "clients": [{"id": "c"}],
}


def scenario(*timeline, **extra):
    return {**BASE, **extra, "timeline": list(timeline)}


@pytest.mark.parametrize("bad", [
    scenario({"at": 0, "do": "explode"}),
    scenario({"at": 0, "do": "ca_probe", "ca": "nobody", "cert": "x"}),
    scenario({"at": 0, "do": "client_verify", "client": "ghost", "cert": "x"}),
    scenario({"at": 0, "do": "register_policy", "domain": "unknown.example"}),
    scenario({"at": 0, "do": "register_policy", "domain": "t.example", "signers": ["who"]}),
    scenario({"do": "mine"}),
    scenario({"at": -5, "do": "mine"}),
    {**BASE, "chain": {"epoch": 600, "max_stale": 100}, "timeline": []},
    {**BASE, "chain": {"colour": "blue"}, "timeline": []},
    {**BASE, "scheme": "dsa", "timeline": []},
])
def test_parse_errors(bad):
    with pytest.raises(ScenarioParseError):
        Scenario.from_dict(bad)


def test_parse_error_from_file(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{ not json")
    with pytest.raises(ScenarioParseError):
        Scenario.load(p)


def test_repeat_expands_in_time_order():
    s = Scenario.from_dict(scenario(
        {"at": 0, "id": "m", "do": "mine", "repeat": {"every": 100, "until": 250}},
        {"at": 150, "id": "x", "do": "mine"},
    ))
    assert [(a["id"], a["at"]) for a in s.timeline] == [("m#0", 0), ("m#1", 100), ("x", 150), ("m#2", 200)]


LIFECYCLE = scenario(
    {"at": 0, "id": "p", "do": "register_policy", "domain": "t.example", "signers": ["ca1"], "expect": "OK"},
    {"at": 15, "id": "c", "do": "create_cert", "domain": "t.example", "cert": "s", "expect": "OK"},
    {"at": 100, "id": "u", "do": "ca_probe", "ca": "ca1", "cert": "s", "expect_event": "ValidationOk",
     "repeat": {"every": 200, "until": 1000}},
    {"at": 400, "id": "v", "do": "client_verify", "client": "c", "cert": "s", "expect": "OK"},
    {"at": 500, "id": "a", "do": "assert_storage", "cert": "s", "path": "s.ca1.errNo", "equals": 0},
    end=1200,
)


def test_lifecycle_report():
    report = run(LIFECYCLE)
    assert report["ok"], report["failures"]
    assert report["verdicts"][0]["verdict"] == "OK"
    assert report["final"]["s"]["domainName"] == "t.example"
    assert report["metrics"]["certificate_bytes"]["s"] > 0
    assert report["metrics"]["probes"] == 5
    assert report["height"] == 1200 // 15
    assert {a["do"] for a in report["actions"]} >= {"register_policy", "create_cert", "ca_probe", "assert_storage"}


def test_same_seed_same_report():
    a, b = run(LIFECYCLE), run(LIFECYCLE)
    assert json.dumps(strip_timing(a), sort_keys=True) == json.dumps(strip_timing(b), sort_keys=True)
    c = run({**LIFECYCLE, "seed": 12})
    assert c["metrics"]["chain_dump_sha256"] != a["metrics"]["chain_dump_sha256"]


def test_failed_assertion_is_reported():
    s = scenario(
        {"at": 0, "id": "p", "do": "register_policy", "domain": "t.example", "signers": ["ca1"]},
        {"at": 15, "id": "c", "do": "create_cert", "domain": "t.example", "cert": "s"},
        {"at": 60, "id": "wrong", "do": "assert_storage", "cert": "s", "path": "valid", "equals": False},
        {"at": 60, "id": "bad-path", "do": "assert_storage", "cert": "s", "path": "s.nobody.errNo", "equals": 0},
        {"at": 60, "id": "bad-receipt", "do": "revoke", "cert": "s", "by": "ca:ca1", "expect": "REVERT_UNAUTHORIZED"},
    )
    report = run(s)
    assert not report["ok"]
    assert [f.split(":")[0] for f in report["failures"]] == ["wrong", "bad-path", "bad-receipt"]
    with pytest.raises(AssertionFailed) as info:
        check(report)
    assert info.value.action_id == "wrong"


def test_unmined_expectation_fails():
    s = scenario(
        {"at": 0, "id": "p", "do": "register_policy", "domain": "t.example", "signers": ["ca1"], "expect": "OK"},
        end=0,
    )
    assert run(s)["ok"]  # the runner mines a final block for queued transactions


def test_held_probe_lands_later():
    s = scenario(
        {"at": 0, "id": "p", "do": "register_policy", "domain": "t.example", "signers": ["ca1"]},
        {"at": 15, "id": "c", "do": "create_cert", "domain": "t.example", "cert": "s"},
        {"at": 100, "id": "held", "do": "ca_probe", "ca": "ca1", "cert": "s", "hold_seconds": 600,
         "expect_event": "ValidationError"},
    )
    report = run(s)
    assert report["ok"], report["failures"]
    held = next(a for a in report["actions"] if a["id"] == "held")
    assert held["block"] == (100 + 600) // 15 + 1


def test_dump_reloads():
    runner = Runner(Scenario.from_dict(LIFECYCLE))
    runner.run()
    dump = runner.world.dump()
    chain = load_chain(dump)
    assert chain.head == runner.world.chain.head


def test_bundled_scenarios_assert_state_and_verdicts():
    bundled = bundled_scenarios()
    assert {"honest-3ca-10epochs", "mitm-one-epoch", "revoke-then-replay", "policyless-ca-compromise",
            "policy-collusion", "skipped-validations", "replayed-proofs", "revocation-race"} <= set(bundled)
    for path in bundled.values():
        s = Scenario.load(path)
        verbs = {a["do"] for a in s.timeline}
        assert "assert_storage" in verbs and "client_verify" in verbs, path.name
        assert any("expect" in a for a in s.timeline if a["do"] == "client_verify")


@pytest.mark.parametrize("name", sorted(bundled_scenarios()))
def test_bundled_scenario_passes(name):
    report = run(str(bundled_scenarios()[name]))
    assert report["ok"], report["failures"]
    if name == "honest-3ca-10epochs":
        assert all(v["verdict"] == "OK" for v in report["verdicts"])


def test_probe_event_expectation_is_enforced():
    s = scenario(
        {"at": 0, "id": "p", "do": "register_policy", "domain": "t.example", "signers": ["ca1"]},
        {"at": 15, "id": "c", "do": "create_cert", "domain": "t.example", "cert": "s"},
        {"at": 100, "id": "honest", "do": "ca_probe", "ca": "ca1", "cert": "s", "expect_event": "ValidationError"},
    )
    report = run(s)
    assert report["failures"] == ["honest: expected event ValidationError, got ['ValidationOk']"]


def test_readme_example_runs():
    readme = (Path(__file__).parent.parent / "README.md").read_text()
    doc = json.loads(re.search(r"```json\n(.*?)```", readme, re.S).group(1))
    report = run(doc)
    assert report["ok"], report["failures"]
    assert [v["verdict"] for v in report["verdicts"]] == ["OK"]
