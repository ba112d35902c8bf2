"""Acceptance suite: one PASS/FAIL line per criterion.

Run under pytest (lines appear in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""
from __future__ import annotations

import dataclasses
import functools
import io
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import build_pair  # noqa: E402
from punchsim.campaign import (  # noqa: E402
    LatencyConfig,
    NatArchetype,
    aggregate,
    export,
    load_preset,
    run_campaign,
)
from punchsim.cli import main as cli_main  # noqa: E402
from punchsim.dcutr import (  # noqa: E402
    AttemptOutcome,
    BirthdayOptions,
    PunchOptions,
    ResultOutcome,
    RttKind,
    run_hole_punch,
)
from punchsim.netsim import ms  # noqa: E402
from punchsim.oracle import BirthdayParams, SyncGeometry, birthday_success_prob, sync_safe  # noqa: E402

TABLE2 = {"UNKNOWN", "NO_CONNECTION", "NO_STREAM", "CONNECTION_REVERSED", "CANCELLED", "FAILED", "SUCCESS"}
TABLE3 = {"UNKNOWN", "DIRECT_DIAL", "PROTOCOL_ERROR", "CANCELLED", "TIMEOUT", "FAILED", "SUCCESS"}

RESULTS: dict[int, str] = {}


def record(n, title, ok, detail, elapsed, budget=None):
    within = budget is None or elapsed < budget
    status = "PASS" if ok and within else "FAIL"
    limit = f" (limit {budget:g}s)" if budget is not None else ""
    line = f"criterion {n:2d} [{status}] {title}: {detail}; {elapsed:.2f}s{limit}"
    RESULTS[n] = line
    print(line)
    return ok and within


def cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli_main(list(argv), out, err)
    return code, out.getvalue().strip()


def check_1():
    t = time.perf_counter()
    _, a = cli("oracle", "birthday", "--m", "256", "--k", "256")
    _, b = cli("oracle", "birthday", "--m", "256", "--k", "2048")
    _, c = cli("oracle", "birthday", "--m", "2048", "--k", "256", "--both-edm")
    elapsed = time.perf_counter() - t
    va, vb, vc = float(a), float(b), float(c)
    checks = [abs(va - 0.6325) <= 0.0005, vb >= 0.9995, abs(vc - 1.22e-4) <= 0.05 * 1.22e-4]
    detail = (f"(256,256)={a} want 0.6325+/-0.0005 [{'ok' if checks[0] else 'miss'}], "
              f"(256,2048)={b} want >=0.9995 [{'ok' if checks[1] else 'miss'}], "
              f"both_edm={c} want 1.22e-4+/-5% [{'ok' if checks[2] else 'miss'}]")
    return record(1, "birthday closed form", all(checks), detail, elapsed, 1)


def check_2():
    t = time.perf_counter()
    _, mix = cli("oracle", "mix", "--p", "0.11")
    _, imp = cli("oracle", "improvement", "--p", "0.11", "--gain", "0.64")
    elapsed = time.perf_counter() - t
    vals = dict(zip(mix.split()[::2], map(float, mix.split()[1::2])))
    ok = (abs(vals["mixed"] - 0.1958) <= 1e-4 and abs(vals["both"] - 0.0121) <= 1e-4
          and abs(float(imp) - 0.1253) <= 1e-3)
    detail = f"mixed={vals['mixed']} both={vals['both']} improvement={imp}"
    return record(2, "mix and improvement", ok, detail, elapsed, 1)


def check_3():
    base = load_preset("birthday")
    t = time.perf_counter()
    parts, ok = [], True
    for k in (256, 2048):
        cfg = base.replace(trials=10_000, options=dataclasses.replace(base.options, birthday=BirthdayOptions(256, k)))
        rep = aggregate(run_campaign(cfg, jobs=1))
        p = birthday_success_prob(BirthdayParams(256, k))
        half = 3 * (p * (1 - p) / cfg.trials) ** 0.5
        inside = abs(rep.success_rate - p) <= half
        ok &= inside
        parts.append(f"(256,{k}) sim={rep.success_rate:.4f} oracle={p:.4f}+/-{half:.4f}")
    return record(3, "Monte Carlo vs oracle", ok, ", ".join(parts), time.perf_counter() - t, 120)


def sweep_config():
    mix = [NatArchetype("EIM", "APDF", weight=0.6), NatArchetype("EIM", "ADF", weight=0.15),
           NatArchetype("APDM", "APDF", weight=0.25)]
    lat = LatencyConfig(core_mean_ms=40, core_std_ms=15, core_min_ms=5, local_mean_ms=2, local_std_ms=1,
                        jitter_frac=0, relay_stretch=(1.2, 3.0), asymmetry=(1, 1))
    return load_preset("clean-cone").replace(trials=200, seed=404, nat_mix=mix, client_nat_mix=None,
                                             latency=lat, port_mapping_prevalence=0.0)


def check_4():
    base = sweep_config()
    t = time.perf_counter()
    rates = {}
    for pct in range(5, 100, 5):
        f = pct / 100
        rates[pct] = aggregate(run_campaign(base.replace(relay_position_range=[f, f]))).success_rate
    elapsed = time.perf_counter() - t
    spread = max(rates.values()) - min(rates.values())
    detail = f"{len(rates)} bins 5%..95%, rate={min(rates.values()):.4f}, max difference {spread:g}"
    return record(4, "relay position independence", spread == 0, detail, elapsed, 60)


def check_5():
    t = time.perf_counter()
    agree = total = 0
    misses = []
    opts = PunchOptions(transport_filter="TCP", max_attempts=1, retransmit_schedule=(0,), enable_reversal=False)
    for eps_ms in range(0, 51, 5):
        for d_ms in range(5, 51, 5):
            net, i, l = build_pair(core=ms(d_ms), i_local=ms(1 + eps_ms), l_local=ms(1))
            r = run_hole_punch(net, i, l, "R", opts)
            eps = r.attempts[0].timing_error_observed
            predicted = sync_safe(SyncGeometry(eps, ms(d_ms)))
            total += 1
            if predicted == (r.outcome is ResultOutcome.SUCCESS) and eps == ms(eps_ms):
                agree += 1
            else:
                misses.append((eps_ms, d_ms))
    elapsed = time.perf_counter() - t
    detail = f"{agree}/{total} grid points agree with sync_safe" + (f", misses {misses[:5]}" if misses else "")
    return record(5, "safety predicate equivalence", agree == total, detail, elapsed, 60)


def check_6():
    base = load_preset("paper-like")
    t = time.perf_counter()
    rates = {}
    for tf in ("TCP", "QUIC"):
        cfg = base.replace(transport_filter_weights={tf: 1.0})
        rates[tf] = aggregate(run_campaign(cfg, jobs=1)).success_rate
    elapsed = time.perf_counter() - t
    gap = abs(rates["TCP"] - rates["QUIC"])
    detail = f"TCP={rates['TCP']:.4f} QUIC={rates['QUIC']:.4f} gap={100 * gap:.2f} points (limit 2)"
    return record(6, "transport parity", gap < 0.02, detail, elapsed)


def check_7():
    t = time.perf_counter()
    patterns = set()
    opts = PunchOptions(transport_filter="QUIC", alternate_roles=True, enable_reversal=False)
    trials = 0
    for core in (5, 20, 40, 80):
        for seed in range(5):
            net, i, l = build_pair(i_nat=("APDM", "APDF"), l_nat=("EIM", "ADF"), core=ms(core), seed=seed)
            r = run_hole_punch(net, i, l, "R", opts)
            patterns.add(tuple(a.outcome.value for a in r.attempts))
            trials += 1
    elapsed = time.perf_counter() - t
    ok = patterns == {("FAILED", "SUCCESS")}
    return record(7, "role alternation", ok, f"{trials} trials, attempt patterns {sorted(patterns)}", elapsed, 1)


def check_8():
    t = time.perf_counter()
    out = {}
    for refined in (False, True):
        net, i, l = build_pair(core=ms(10), i_local=ms(5), l_local=ms(20))
        r = run_hole_punch(net, i, l, "R", PunchOptions(transport_filter="TCP", refined_rtt=refined, max_attempts=1,
                                                        enable_reversal=False))
        eps = r.attempts[0].timing_error_observed
        out[refined] = (r.attempts[0].outcome, eps, sync_safe(SyncGeometry(eps, ms(10))))
    elapsed = time.perf_counter() - t
    ok = (out[False][0] is AttemptOutcome.FAILED and not out[False][2]
          and out[True][0] is AttemptOutcome.SUCCESS and out[True][2])
    detail = (f"baseline {out[False][0].value} eps={out[False][1] / 1000:g}ms, "
              f"refined {out[True][0].value} eps={out[True][1] / 1000:g}ms")
    return record(8, "refined timing", ok, detail, elapsed, 1)


def check_9():
    cfg = load_preset("reversal")
    t = time.perf_counter()
    rep = aggregate(run_campaign(cfg, jobs=1))
    elapsed = time.perf_counter() - t
    mapped = sum(rep.outcome_histogram_mapped.values())
    ok = rep.reversed_share_mapped == 1.0 and rep.reversed_share_unmapped == 0.0 and mapped > 0
    detail = (f"prevalence {cfg.port_mapping_prevalence}, mapped n={mapped} reversed={rep.reversed_share_mapped}, "
              f"unmapped reversed={rep.reversed_share_unmapped}")
    return record(9, "reversal conditioning", ok, detail, elapsed, 60)


@functools.lru_cache(maxsize=1)
def paper_like_run():
    return run_campaign(load_preset("paper-like"), jobs=1)


def check_10(tmp: Path):
    t = time.perf_counter()
    rs = paper_like_run()
    again = run_campaign(load_preset("paper-like"), jobs=1)
    problems = []
    for r in rs.results:
        if r.outcome.value not in TABLE2 or any(a.outcome.value not in TABLE3 for a in r.attempts):
            problems.append(f"trial {r.trial}: unknown outcome string")
        if len(r.attempts) > 3:
            problems.append(f"trial {r.trial}: {len(r.attempts)} attempts")
        if max(r.signal_bytes.values()) > 500:
            problems.append(f"trial {r.trial}: {r.signal_bytes}")
        if (r.outcome is ResultOutcome.SUCCESS) != any(a.outcome is AttemptOutcome.SUCCESS for a in r.attempts):
            problems.append(f"trial {r.trial}: outcome/attempt mismatch")
    blobs = []
    for run, name in ((rs, "a"), (again, "b")):
        export(run, "jsonl", tmp / f"{name}.jsonl")
        export(run, "csv", tmp / f"{name}.csv")
        blobs.append((tmp / f"{name}.jsonl").read_bytes() + (tmp / f"{name}.csv").read_bytes())
    if blobs[0] != blobs[1]:
        problems.append("exports differ between identical runs")
    elapsed = time.perf_counter() - t
    max_bytes = max(max(r.signal_bytes.values()) for r in rs.results)
    detail = (f"{len(rs)} trials, max attempts {max(len(r.attempts) for r in rs.results)}, "
              f"max signal bytes {max_bytes}, identical exports {blobs[0] == blobs[1]}")
    if problems:
        detail += f", problems: {problems[:3]}"
    return record(10, "taxonomy and budget invariants", not problems, detail, elapsed)


def check_11():
    t = time.perf_counter()
    rs = paper_like_run()
    calm = []
    for r in rs.results:
        s = r.rtt(RttKind.TO_REMOTE_THROUGH_RELAY)
        if r.outcome is ResultOutcome.SUCCESS and s is not None and s.std < s.mean / 2:
            calm.append(r)
    share = sum(r.attempts[0].outcome is AttemptOutcome.SUCCESS for r in calm) / len(calm)
    elapsed = time.perf_counter() - t
    detail = f"first-attempt share {share:.4f} over {len(calm)} successes with rtt std < mean/2 (want >= 0.95)"
    return record(11, "paper-like first-attempt share", share >= 0.95, detail, elapsed)


def test_criterion_01_birthday_closed_form():
    assert check_1(), RESULTS[1]


def test_criterion_02_mix_and_improvement():
    assert check_2(), RESULTS[2]


@pytest.mark.slow
def test_criterion_03_monte_carlo_vs_oracle():
    assert check_3(), RESULTS[3]


def test_criterion_04_relay_position_independence():
    assert check_4(), RESULTS[4]


def test_criterion_05_safety_predicate():
    assert check_5(), RESULTS[5]


@pytest.mark.slow
def test_criterion_06_transport_parity():
    assert check_6(), RESULTS[6]


def test_criterion_07_role_alternation():
    assert check_7(), RESULTS[7]


def test_criterion_08_refined_timing():
    assert check_8(), RESULTS[8]


def test_criterion_09_reversal_conditioning():
    assert check_9(), RESULTS[9]


@pytest.mark.slow
def test_criterion_10_invariants(tmp_path):
    assert check_10(tmp_path), RESULTS[10]


@pytest.mark.slow
def test_criterion_11_first_attempt_share():
    assert check_11(), RESULTS[11]


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        outcomes = [check_1(), check_2(), check_3(), check_4(), check_5(), check_6(), check_7(), check_8(),
                    check_9(), check_10(Path(d)), check_11()]
    sys.exit(0 if all(outcomes) else 1)
