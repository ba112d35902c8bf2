"""``punchsim`` command line."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import oracle
from .campaign import (
    ScenarioConfig,
    aggregate,
    export,
    format_number,
    import_jsonl,
    load_preset,
    load_scenario,
    preset_names,
    render_report,
    run_campaign,
)
from .dcutr import BirthdayOptions, ConfigError, TransportFilter
from .netsim import MS

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 1, 2

ENABLE_FLAGS = {
    "reversal": "enable_reversal",
    "alternate-roles": "alternate_roles",
    "refined-rtt": "refined_rtt",
    "ttl-priming": "ttl_priming",
    "birthday": "birthday",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seed(text):
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _pair(text):
    try:
        m, k = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected M,K") from None
    return m, k


def build_parser():
    p = _Parser(prog="punchsim", description="Simulate relay-coordinated NAT hole punching.")
    p.add_argument("--precision", type=int, default=4, help="decimal places for numeric output")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a campaign")
    run.add_argument("--scenario", required=True, help="scenario JSON file or preset name")
    run.add_argument("--seed", type=_seed, help="master seed (falls back to PUNCHSIM_SEED)")
    run.add_argument("--trials", type=int)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--transport", choices=["tcp", "quic", "any"])
    run.add_argument("--enable", default="", help="comma list: " + ",".join(ENABLE_FLAGS))
    run.add_argument("--birthday", type=_pair, metavar="M,K")
    run.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")

    orc = sub.add_parser("oracle", help="closed-form calculators")
    osub = orc.add_subparsers(dest="calc", required=True, parser_class=_Parser)
    b = osub.add_parser("birthday")
    b.add_argument("--m", type=int, required=True)
    b.add_argument("--k", type=int, required=True)
    b.add_argument("--n", type=int, default=oracle.PORT_SPACE)
    b.add_argument("--both-edm", action="store_true")
    b.add_argument("--method", default="hypergeometric",
                   choices=["hypergeometric", "independent", "product", "pairs"])
    mx = osub.add_parser("mix")
    mx.add_argument("--p", type=float, required=True)
    imp = osub.add_parser("improvement")
    imp.add_argument("--p", type=float, required=True)
    imp.add_argument("--gain", type=float, required=True)
    ss = osub.add_parser("sync-safe")
    ss.add_argument("--eps", type=float, required=True, help="timing error in ms")
    ss.add_argument("--d", type=float, required=True, help="one-way NAT-to-NAT delay in ms")

    rep = sub.add_parser("report", help="re-aggregate exported results")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--min-network-samples", type=int, default=1)

    sub.add_parser("presets", help="list bundled scenarios")
    return p


def _scenario(arg) -> ScenarioConfig:
    if os.path.exists(arg):
        return load_scenario(arg)
    if arg in preset_names():
        return load_preset(arg)
    raise FileNotFoundError(arg)


def _apply_overrides(cfg: ScenarioConfig, a) -> ScenarioConfig:
    changes = {}
    seed = a.seed
    if seed is None and os.environ.get("PUNCHSIM_SEED"):
        try:
            seed = _seed(os.environ["PUNCHSIM_SEED"])
        except (ValueError, argparse.ArgumentTypeError):
            raise ConfigError("PUNCHSIM_SEED is not an unsigned 64-bit integer") from None
    if seed is not None:
        changes["seed"] = seed
    if a.trials is not None:
        changes["trials"] = a.trials
    opts = cfg.options
    if a.transport:
        tf = TransportFilter({"tcp": "TCP", "quic": "QUIC", "any": "Any"}[a.transport])
        opts = replace(opts, transport_filter=tf)
        changes["transport_filter_weights"] = {tf.value: 1.0}
    enabled = [x.strip() for x in a.enable.split(",") if x.strip()]
    for flag in enabled:
        if flag not in ENABLE_FLAGS:
            raise ConfigError(f"unknown --enable value {flag!r}")
        if flag != "birthday":
            opts = replace(opts, **{ENABLE_FLAGS[flag]: True})
    if "birthday" in enabled or a.birthday:
        m, k = a.birthday or (256, 256)
        opts = replace(opts, birthday=BirthdayOptions(m, k))
    return cfg.replace(options=opts, **changes)


def _cmd_run(a, out):
    cfg = _apply_overrides(_scenario(a.scenario), a)
    outdir = Path(a.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rs = run_campaign(cfg, jobs=a.jobs)
    export(rs, "jsonl", outdir / "results.jsonl")
    export(rs, "csv", outdir / "results.csv")
    rep = aggregate(rs, cfg.min_network_samples)
    (outdir / "scenario.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (outdir / "report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    text = render_report(rep, a.precision)
    (outdir / "report.txt").write_text(text)
    out.write(text)
    return EXIT_OK


def _cmd_oracle(a, out):
    f = lambda x: format_number(x, a.precision)  # noqa: E731
    if a.calc == "birthday":
        method = a.method
        if a.both_edm and method == "hypergeometric":
            method = "product"
        params = oracle.BirthdayParams(a.m, a.k, a.n, a.both_edm)
        out.write(f(oracle.birthday_success_prob(params, method)) + "\n")
    elif a.calc == "mix":
        mix = oracle.population_mix(a.p)
        out.write(f"eim_eim {f(mix.eim_eim)}\nmixed {f(mix.mixed)}\nboth {f(mix.edm_edm)}\n")
    elif a.calc == "improvement":
        out.write(f(oracle.expected_improvement(oracle.population_mix(a.p), a.gain)) + "\n")
    else:
        g = oracle.SyncGeometry(int(round(a.eps * MS)), int(round(a.d * MS)))
        out.write(("true" if oracle.sync_safe(g) else "false") + "\n")
    return EXIT_OK


def _cmd_report(a, out):
    rs = import_jsonl(a.inp)
    out.write(render_report(aggregate(rs, a.min_network_samples), a.precision))
    return EXIT_OK


def _cmd_presets(a, out):
    for name in preset_names():
        cfg = load_preset(name)
        out.write(f"{name:12s} {cfg.name} ({cfg.trials} trials)\n")
    return EXIT_OK


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        a = build_parser().parse_args(argv)
        cmd = {"run": _cmd_run, "oracle": _cmd_oracle, "report": _cmd_report, "presets": _cmd_presets}
        return cmd[a.command](a, out)
    except UsageError as e:
        err.write(f"{e}\n")
        return EXIT_CONFIG
    except (ConfigError, ValueError) as e:
        err.write(f"punchsim: configuration error: {e}\n")
        return EXIT_CONFIG
    except OSError as e:
        err.write(f"punchsim: I/O error: {e}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
