import json

import pytest

from punchsim.campaign import (
    CSV_FIELDS,
    EmptyInput,
    LatencyConfig,
    NatArchetype,
    ResultSet,
    ScenarioConfig,
    aggregate,
    export,
    format_number,
    import_jsonl,
    latency_ratio,
    load_preset,
    load_scenario,
    preset_names,
    relay_position,
    relay_position_bin,
    render_report,
    run_campaign,
)
from punchsim.dcutr import (
    AttemptOutcome,
    ConfigError,
    HolePunchAttempt,
    HolePunchResult,
    PunchOptions,
    ResultOutcome,
    RttKind,
    RttStats,
)
from punchsim.netsim import ms
from punchsim.oracle import population_mix

FLAT = LatencyConfig(core_mean_ms=30, core_std_ms=10, core_min_ms=5, local_mean_ms=1, local_std_ms=0,
                     jitter_frac=0, relay_stretch=(1, 3), asymmetry=(1, 1))


def small(**kw):
    base = dict(trials=60, seed=99, latency=FLAT, networks=5)
    base.update(kw)
    return ScenarioConfig(**base)


def result(outcome=ResultOutcome.SUCCESS, mapped=False, to_relay=ms(700), via=ms(1000), direct=ms(700),
           attempts=None):
    rtts = [RttStats(RttKind.TO_RELAY, [to_relay]), RttStats(RttKind.TO_REMOTE_THROUGH_RELAY, [via])]
    if outcome is ResultOutcome.SUCCESS:
        rtts.append(RttStats(RttKind.TO_REMOTE_AFTER_HOLEPUNCH, [direct]))
    if attempts is None:
        attempts = [HolePunchAttempt(1, AttemptOutcome.SUCCESS if outcome is ResultOutcome.SUCCESS
                                     else AttemptOutcome.FAILED)]
    return HolePunchResult("client", "remote", "relay", outcome=outcome, attempts=attempts, rtts=rtts,
                           port_mappings=["203.0.113.1:4001/udp"] if mapped else [], network_id="n0")


def test_config_validation():
    with pytest.raises(ConfigError):
        ScenarioConfig(trials=0)
    with pytest.raises(ConfigError):
        ScenarioConfig(nat_mix=[NatArchetype(weight=0)])
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"schema": "punchsim.scenario/1", "bogus": 1})
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"schema": "other/2"})
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"schema": "punchsim.scenario/1", "options": {"max_atempts": 2}})


def test_config_round_trip(tmp_path):
    cfg = load_preset("paper-like")
    path = tmp_path / "s.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = load_scenario(path)
    assert again.to_dict() == cfg.to_dict()
    assert again.digest() == cfg.digest()


def test_presets_load():
    names = preset_names()
    assert "paper-like" in names
    for n in names:
        assert load_preset(n).trials >= 1


def test_replace_accepts_typed_values():
    cfg = small()
    out = cfg.replace(options=PunchOptions(max_attempts=1), trials=5)
    assert out.options.max_attempts == 1 and out.trials == 5
    assert cfg.options.max_attempts == 3


def test_determinism(tmp_path):
    a, b = run_campaign(small()), run_campaign(small())
    assert a == b
    export(a, "jsonl", tmp_path / "a.jsonl")
    export(b, "jsonl", tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_seed_changes_results():
    assert run_campaign(small()) != run_campaign(small(seed=100))


def test_parallel_matches_serial(tmp_path):
    cfg = small(trials=24)
    serial, parallel = run_campaign(cfg, jobs=1), run_campaign(cfg, jobs=2)
    export(serial, "jsonl", tmp_path / "s.jsonl")
    export(parallel, "jsonl", tmp_path / "p.jsonl")
    assert (tmp_path / "s.jsonl").read_bytes() == (tmp_path / "p.jsonl").read_bytes()


def test_clean_cone_population_always_succeeds():
    cfg = small(nat_mix=[NatArchetype("EIM", "APDF")], transport_filter_weights={"TCP": 1, "QUIC": 1})
    rep = aggregate(run_campaign(cfg))
    assert rep.success_rate == 1.0


def test_population_mix_matches_oracle():
    p = 0.11
    cfg = ScenarioConfig(
        trials=1500, seed=5, latency=FLAT, networks=20_000,
        nat_mix=[NatArchetype("EIM", "APDF", weight=1 - p), NatArchetype("APDM", "APDF", weight=p)],
        transport_filter_weights={"TCP": 1, "QUIC": 1}, options=PunchOptions(max_attempts=1))
    rep = aggregate(run_campaign(cfg))
    want = population_mix(p).eim_eim
    sigma = (want * (1 - want) / cfg.trials) ** 0.5
    assert abs(rep.success_rate - want) < 3 * sigma


def test_jsonl_round_trip(tmp_path):
    rs = run_campaign(small(trials=20))
    path = tmp_path / "r.jsonl"
    assert export(rs, "jsonl", path) == path.stat().st_size
    assert import_jsonl(path) == rs


def test_outcome_strings_in_export(tmp_path):
    rs = ResultSet("d", 1, [result(ResultOutcome.CONNECTION_REVERSED, attempts=[])])
    export(rs, "jsonl", tmp_path / "r.jsonl")
    rec = json.loads((tmp_path / "r.jsonl").read_text())
    assert rec["outcome"] == "CONNECTION_REVERSED"
    assert {r["mtype"] for r in rec["rtts"]} == {"TO_RELAY", "TO_REMOTE_THROUGH_RELAY"}


def test_empty_csv_is_header_only(tmp_path):
    path = tmp_path / "r.csv"
    export(ResultSet("d", 1), "csv", path)
    assert path.read_text() == ",".join(CSV_FIELDS) + "\n"


def test_unknown_export_format(tmp_path):
    with pytest.raises(ValueError):
        export(ResultSet("d", 1), "xml", tmp_path / "x")


def test_import_rejects_garbage(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{not json}\n")
    with pytest.raises(ConfigError):
        import_jsonl(path)


def test_latency_ratio_and_relay_position():
    r = result(via=ms(1000), direct=ms(700), to_relay=ms(700))
    assert latency_ratio(r) == pytest.approx(0.7)
    assert relay_position(r) == pytest.approx(0.7)
    assert relay_position_bin(0.7) == 70
    assert relay_position_bin(0.0499) == 0
    assert relay_position_bin(1.0) == 95


def test_aggregate_example():
    rs = ResultSet("d", 1, [result()])
    rep = aggregate(rs)
    assert rep.latency_ratio_quantiles["p50"] == pytest.approx(0.7)
    assert rep.relay_position_curve == {"70": 1.0}


def test_aggregate_filter():
    rs = ResultSet("d", 1, [
        result(), result(ResultOutcome.FAILED), result(mapped=True),
        result(ResultOutcome.CONNECTION_REVERSED, mapped=True, attempts=[]),
        result(ResultOutcome.NO_STREAM, attempts=[]),
    ])
    rep = aggregate(rs)
    assert rep.success_rate == 0.5
    assert sum(rep.outcome_histogram.values()) == 5
    assert rep.reversed_share_mapped == 0.5 and rep.reversed_share_unmapped == 0
    assert rep.first_attempt_share == 1.0


def test_aggregate_all_reversed_is_undefined():
    rs = ResultSet("d", 1, [result(ResultOutcome.CONNECTION_REVERSED, mapped=True, attempts=[])] * 3)
    rep = aggregate(rs)
    assert rep.success_rate is None and not rep.success_rate_defined
    assert "undefined" in render_report(rep)


def test_aggregate_empty():
    with pytest.raises(EmptyInput):
        aggregate(ResultSet("d", 1))


def test_per_network_threshold():
    rs = ResultSet("d", 1, [result()] * 3 + [result(ResultOutcome.FAILED)])
    assert aggregate(rs, min_network_samples=5).networks_counted == 0
    rep = aggregate(rs, min_network_samples=4)
    assert rep.networks_counted == 1 and rep.network_mean == 0.75 and rep.network_std == 0


@pytest.mark.parametrize("x,p,want", [(0.63356, 4, "0.6336"), (1.2207e-4, 4, "1.221e-04"), (None, 4, "undefined"),
                                      (3, 4, "3"), (0.5, 2, "0.50"), (0.0, 4, "0.0000")])
def test_format_number(x, p, want):
    assert format_number(x, p) == want
