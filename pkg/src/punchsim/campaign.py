"""Monte Carlo campaigns: scenario files in, per-trial records and reports out."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources

from .dcutr import (
    AttemptOutcome,
    BirthdayOptions,
    ConfigError,
    HolePunchAttempt,
    HolePunchResult,
    PunchOptions,
    ResultOutcome,
    RttKind,
    RttStats,
    TransportFilter,
    attach_peer,
    run_hole_punch,
)
from .nat import DenylistPolicy, FilteringBehavior, MappingBehavior, NatDevice, RandomUniform, Sequential
from .netsim import MS, Distribution, DelayModel, Engine, Host, LinkModel, Network, Topology, derive_rng, derive_seed

SCHEMA = "punchsim.scenario/1"
RNG_PROVENANCE = "blake2b-64(seed, 'trial', index, purpose) seeds random.Random per purpose"


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class NatArchetype:
    mapping: MappingBehavior = MappingBehavior.EIM
    filtering: FilteringBehavior = FilteringBehavior.APDF
    allocator: str = "random"
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mapping", MappingBehavior(self.mapping))
        object.__setattr__(self, "filtering", FilteringBehavior(self.filtering))
        if self.allocator not in ("random", "sequential"):
            raise ConfigError(f"unknown allocator {self.allocator!r}")
        if self.weight < 0:
            raise ConfigError("archetype weights must be non-negative")

    @property
    def label(self):
        return f"{self.mapping.value}/{self.filtering.value}/{self.allocator}"

    def to_dict(self):
        return {"mapping": self.mapping.value, "filtering": self.filtering.value,
                "allocator": self.allocator, "weight": self.weight}


@dataclass(frozen=True)
class LatencyConfig:
    core_mean_ms: float = 40.0
    core_std_ms: float = 15.0
    core_min_ms: float = 2.0
    local_mean_ms: float = 2.0
    local_std_ms: float = 0.5
    jitter_frac: float = 0.0
    distribution: str = "normal"
    relay_stretch: tuple = (1.0, 3.0)
    asymmetry: tuple = (1.0, 1.0)

    def __post_init__(self):
        for name in ("relay_stretch", "asymmetry"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"latency.{name} must be an increasing positive range")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if min(self.core_mean_ms, self.core_std_ms, self.local_mean_ms, self.local_std_ms, self.jitter_frac) < 0:
            raise ConfigError("latency parameters must be non-negative")
        Distribution(self.distribution)


_OPTION_KEYS = {"transport_filter", "max_attempts", "attempt_timeout_ms", "enable_reversal", "alternate_roles",
                "refined_rtt", "ttl_priming", "birthday", "retransmit_schedule_ms", "rst_on_unexpected_syn",
                "rtt_samples"}


def options_from_dict(d) -> PunchOptions:
    unknown = set(d) - _OPTION_KEYS
    if unknown:
        raise ConfigError(f"unknown option keys: {sorted(unknown)}")
    kw = {k: v for k, v in d.items() if k in {"transport_filter", "max_attempts", "enable_reversal",
                                              "alternate_roles", "refined_rtt", "ttl_priming",
                                              "rst_on_unexpected_syn", "rtt_samples"}}
    if "attempt_timeout_ms" in d:
        kw["attempt_timeout"] = int(d["attempt_timeout_ms"] * MS)
    if "retransmit_schedule_ms" in d:
        kw["retransmit_schedule"] = tuple(int(x * MS) for x in d["retransmit_schedule_ms"])
    if d.get("birthday"):
        b = d["birthday"]
        kw["birthday"] = BirthdayOptions(int(b["m_open"]), int(b["k_probe"]))
    try:
        return PunchOptions(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def options_to_dict(o: PunchOptions):
    return {
        "transport_filter": o.transport_filter.value, "max_attempts": o.max_attempts,
        "attempt_timeout_ms": o.attempt_timeout / MS, "enable_reversal": o.enable_reversal,
        "alternate_roles": o.alternate_roles, "refined_rtt": o.refined_rtt, "ttl_priming": o.ttl_priming,
        "birthday": asdict(o.birthday) if o.birthday else None,
        "retransmit_schedule_ms": [x / MS for x in o.retransmit_schedule],
        "rst_on_unexpected_syn": o.rst_on_unexpected_syn, "rtt_samples": o.rtt_samples,
    }


@dataclass
class ScenarioConfig:
    trials: int = 100
    seed: int = 0
    name: str = ""
    nat_mix: list = field(default_factory=lambda: [NatArchetype()])
    client_nat_mix: list | None = None
    networks: int = 20
    min_network_samples: int = 1
    port_mapping_prevalence: float = 0.0
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    relay_position_range: tuple = (0.05, 0.95)
    transport_filter_weights: dict = field(default_factory=lambda: {"TCP": 1.0, "QUIC": 1.0})
    options: PunchOptions = field(default_factory=PunchOptions)
    loss_prob: float = 0.0
    denylist: bool = False
    tcp_unsolicited_rst: bool = True

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.networks < 1 or self.min_network_samples < 1:
            raise ConfigError("networks and min_network_samples must be >= 1")
        for mix in (self.nat_mix, self.client_nat_mix or self.nat_mix):
            if not mix or sum(a.weight for a in mix) <= 0:
                raise ConfigError("NAT mixes need positive total weight")
        if not 0 <= self.port_mapping_prevalence <= 1 or not 0 <= self.loss_prob <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")
        lo, hi = self.relay_position_range
        if not 0 < lo <= hi < 1:
            raise ConfigError("relay_position_range must satisfy 0 < lo <= hi < 1")
        self.relay_position_range = (float(lo), float(hi))
        tf = {TransportFilter(k).value: float(v) for k, v in self.transport_filter_weights.items()}
        if not tf or sum(tf.values()) <= 0 or min(tf.values()) < 0:
            raise ConfigError("transport_filter_weights need positive total weight")
        self.transport_filter_weights = tf

    @classmethod
    def from_dict(cls, d) -> "ScenarioConfig":
        d = dict(d)
        schema = d.pop("schema", None)
        if schema != SCHEMA:
            raise ConfigError(f"expected schema {SCHEMA!r}, got {schema!r}")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            if "nat_mix" in d:
                d["nat_mix"] = [NatArchetype(**a) for a in d["nat_mix"]]
            if d.get("client_nat_mix") is not None:
                d["client_nat_mix"] = [NatArchetype(**a) for a in d["client_nat_mix"]]
            if "latency" in d:
                d["latency"] = LatencyConfig(**d["latency"])
            if "options" in d:
                d["options"] = options_from_dict(d["options"])
            return cls(**d)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    def to_dict(self):
        return {
            "schema": SCHEMA, "name": self.name, "trials": self.trials, "seed": self.seed,
            "nat_mix": [a.to_dict() for a in self.nat_mix],
            "client_nat_mix": [a.to_dict() for a in self.client_nat_mix] if self.client_nat_mix else None,
            "networks": self.networks, "min_network_samples": self.min_network_samples,
            "port_mapping_prevalence": self.port_mapping_prevalence,
            "latency": {**asdict(self.latency), "relay_stretch": list(self.latency.relay_stretch),
                        "asymmetry": list(self.latency.asymmetry)},
            "relay_position_range": list(self.relay_position_range),
            "transport_filter_weights": dict(sorted(self.transport_filter_weights.items())),
            "options": options_to_dict(self.options), "loss_prob": self.loss_prob,
            "denylist": self.denylist, "tcp_unsolicited_rst": self.tcp_unsolicited_rst,
        }

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ScenarioConfig":
        """Copy with *changes* applied; values may be typed objects or plain dicts."""
        typed = {"options": PunchOptions, "latency": LatencyConfig}
        d = self.to_dict()
        for k, v in changes.items():
            if k in typed and isinstance(v, typed[k]):
                v = options_to_dict(v) if k == "options" else ScenarioConfig(latency=v).to_dict()["latency"]
            elif k in ("nat_mix", "client_nat_mix") and v:
                v = [a.to_dict() if isinstance(a, NatArchetype) else a for a in v]
            d[k] = v
        return ScenarioConfig.from_dict(d)


def load_scenario(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    return ScenarioConfig.from_dict(data)


def preset_names():
    files = resources.files("punchsim").joinpath("presets")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load_preset(name) -> ScenarioConfig:
    p = resources.files("punchsim").joinpath("presets", f"{name}.json")
    if not p.is_file():
        raise ConfigError(f"no preset named {name!r}")
    return ScenarioConfig.from_dict(json.loads(p.read_text(encoding="utf-8")))


def _weighted(rng, items, weights):
    return rng.choices(items, weights=weights, k=1)[0]


def _pick(rng, mix):
    return _weighted(rng, mix, [a.weight for a in mix])


def _positive_normal(rng, mean, std, floor):
    if std == 0:
        return max(mean, floor)
    return max(rng.normalvariate(mean, std), floor)


def _delay(mean_us, lat: LatencyConfig):
    mean_us = int(round(mean_us))
    return DelayModel(mean_us, int(round(mean_us * lat.jitter_frac)), Distribution(lat.distribution))


def _link(mean_us, lat: LatencyConfig, asym, loss):
    return LinkModel(_delay(mean_us * asym, lat), _delay(mean_us / asym, lat), loss)


def _network(cfg: ScenarioConfig, j):
    """Stable properties of client network *j*: NAT archetype and local delay."""
    rng = derive_rng(cfg.seed, "network", j)
    arch = _pick(rng, cfg.client_nat_mix or cfg.nat_mix)
    lat = cfg.latency
    local = _positive_normal(rng, lat.local_mean_ms, lat.local_std_ms, 0.0) * MS
    netid = hashlib.blake2b(f"{arch.label}|{j}".encode(), digest_size=6).hexdigest()
    return arch, local, netid


def _nat(cfg, arch: NatArchetype, address, rng):
    alloc = Sequential() if arch.allocator == "sequential" else RandomUniform()
    return NatDevice(address, arch.mapping, arch.filtering, alloc, rng=rng,
                     denylist_policy=DenylistPolicy(enabled=cfg.denylist),
                     tcp_unsolicited_rst=cfg.tcp_unsolicited_rst)


def run_trial(cfg: ScenarioConfig, index: int, networks=None) -> HolePunchResult:
    def stream(purpose):
        return derive_rng(cfg.seed, "trial", index, purpose)

    pop = stream("population")
    j = pop.randrange(cfg.networks)
    client_arch, client_local, netid = (networks or {}).get(j) or _network(cfg, j)
    remote_arch = _pick(pop, cfg.nat_mix)
    mapped = pop.random() < cfg.port_mapping_prevalence

    lat = cfg.latency
    lr = stream("latency")
    d = _positive_normal(lr, lat.core_mean_ms, lat.core_std_ms, lat.core_min_ms) * MS
    remote_local = _positive_normal(lr, lat.local_mean_ms, lat.local_std_ms, 0.0) * MS
    stretch = lr.uniform(*lat.relay_stretch)
    asym = [lr.uniform(*lat.asymmetry) for _ in range(3)]
    f = stream("relay").uniform(*cfg.relay_position_range)
    relay_total = stretch * d
    tf_rng = stream("transport")
    names = sorted(cfg.transport_filter_weights)
    tfilter = _weighted(tf_rng, names, [cfg.transport_filter_weights[n] for n in names])

    ports = stream("ports")
    loss = cfg.loss_prob
    topo = Topology()
    topo.add_host(Host("initiator", "10.0.0.2", _nat(cfg, remote_arch, "198.51.100.1", ports),
                       LinkModel(_delay(remote_local, lat), _delay(remote_local, lat), loss, 2, 2)))
    topo.add_host(Host("listener", "192.168.1.2", _nat(cfg, client_arch, "203.0.113.1", ports),
                       LinkModel(_delay(client_local, lat), _delay(client_local, lat), loss, 2, 2)))
    topo.add_host(Host("relay", "192.0.2.1"))
    topo.connect("initiator", "listener", _link(d, lat, asym[0], loss))
    topo.connect("listener", "relay", _link(f * relay_total, lat, asym[1], loss))
    topo.connect("initiator", "relay", _link((1 - f) * relay_total, lat, asym[2], loss))
    net = Network(topo, Engine(), stream("net"), record_trace=False)

    initiator = attach_peer(net, "initiator", "remote", "relay")
    listener = attach_peer(net, "listener", "client", "relay", port_mapping=mapped)
    opts = cfg.options
    if opts.transport_filter.value != tfilter:
        opts = dataclasses.replace(opts, transport_filter=TransportFilter(tfilter))
    result = run_hole_punch(net, initiator, listener, "relay", opts, rng=stream("punch"))
    net.close()
    result.trial = index
    result.network_id = netid
    result.client_nat = client_arch.label
    result.remote_nat = remote_arch.label
    return result


def _run_chunk(args):
    cfg_dict, indices = args
    cfg = ScenarioConfig.from_dict(cfg_dict)
    cache = {}
    out = []
    for i in indices:
        r = run_trial(cfg, i, cache)
        out.append(result_to_record(r))
    return out


@dataclass
class ResultSet:
    scenario_digest: str
    seed: int
    results: list = field(default_factory=list)
    provenance: str = RNG_PROVENANCE

    def __len__(self):
        return len(self.results)

    def __eq__(self, other):
        if not isinstance(other, ResultSet):
            return NotImplemented
        return (self.scenario_digest, self.seed) == (other.scenario_digest, other.seed) and \
            [result_to_record(r) for r in self.results] == [result_to_record(r) for r in other.results]


def run_campaign(cfg: ScenarioConfig, jobs=1, progress=None) -> ResultSet:
    """Run every trial; result order follows trial index whatever *jobs* is."""
    rs = ResultSet(cfg.digest(), cfg.seed)
    if jobs is None:
        jobs = os.cpu_count() or 1
    if jobs <= 1 or cfg.trials < 2:
        cache = {j: _network(cfg, j) for j in range(cfg.networks)}
        for i in range(cfg.trials):
            rs.results.append(run_trial(cfg, i, cache))
            if progress:
                progress(i + 1, cfg.trials)
        return rs
    size = max(1, math.ceil(cfg.trials / (jobs * 4)))
    chunks = [list(range(s, min(s + size, cfg.trials))) for s in range(0, cfg.trials, size)]
    blob = cfg.to_dict()
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        done = 0
        for records in pool.map(_run_chunk, [(blob, c) for c in chunks]):
            rs.results.extend(result_from_record(r) for r in records)
            done += len(records)
            if progress:
                progress(done, cfg.trials)
    return rs


# -- serialization ----------------------------------------------------------

CSV_FIELDS = [
    "trial", "network_id", "client_id", "remote_id", "relay_id", "client_nat", "remote_nat",
    "outcome", "attempt_outcomes", "attempts", "transport_filter", "transport_used", "has_port_mapping",
    "rtt_to_relay_ms", "rtt_through_relay_ms", "rtt_after_holepunch_ms", "relayed_rtt_ms", "wait_time_ms",
    "timing_errors_ms", "signal_bytes_i2l", "signal_bytes_l2i",
]


def result_to_record(r: HolePunchResult, digest=None, seed=None):
    rec = {
        "trial": r.trial, "network_id": r.network_id, "client_id": r.client_id, "remote_id": r.remote_id,
        "relay_id": r.relay_id, "client_nat": r.client_nat, "remote_nat": r.remote_nat,
        "outcome": r.outcome.value,
        "attempts": [{"index": a.index, "outcome": a.outcome.value, "roles": a.roles,
                      "timing_error_observed": a.timing_error_observed, "transport": a.transport,
                      "started_at": a.started_at, "ended_at": a.ended_at} for a in r.attempts],
        "rtts": [{"mtype": s.kind.value, "samples": list(s.samples)} for s in r.rtts],
        "port_mappings": list(r.port_mappings), "transport_used": r.transport_used,
        "transport_filter": r.transport_filter, "signal_bytes": dict(r.signal_bytes),
        "wait_time": r.wait_time, "relayed_rtt": r.relayed_rtt, "relayed_closed": r.relayed_closed,
    }
    if digest is not None:
        rec["scenario_digest"] = digest
        rec["seed"] = seed
    return rec


def result_from_record(rec) -> HolePunchResult:
    r = HolePunchResult(rec["client_id"], rec["remote_id"], rec["relay_id"],
                        outcome=ResultOutcome(rec["outcome"]),
                        attempts=[HolePunchAttempt(a["index"], AttemptOutcome(a["outcome"]), a["roles"],
                                                   a["timing_error_observed"], a["transport"],
                                                   a["started_at"], a["ended_at"]) for a in rec["attempts"]],
                        rtts=[RttStats(RttKind(s["mtype"]), list(s["samples"])) for s in rec["rtts"]],
                        port_mappings=list(rec["port_mappings"]), transport_used=rec["transport_used"],
                        transport_filter=rec["transport_filter"], network_id=rec["network_id"],
                        signal_bytes=dict(rec["signal_bytes"]), wait_time=rec["wait_time"],
                        relayed_rtt=rec["relayed_rtt"], relayed_closed=rec["relayed_closed"])
    r.trial, r.client_nat, r.remote_nat = rec["trial"], rec["client_nat"], rec["remote_nat"]
    return r


def _ms(v):
    return "" if v is None else f"{v / MS:.3f}"


def _csv_row(r: HolePunchResult):
    def mean_of(kind):
        s = r.rtt(kind)
        return "" if s is None else f"{s.mean / MS:.3f}"

    return {
        "trial": r.trial, "network_id": r.network_id, "client_id": r.client_id, "remote_id": r.remote_id,
        "relay_id": r.relay_id, "client_nat": r.client_nat, "remote_nat": r.remote_nat,
        "outcome": r.outcome.value, "attempt_outcomes": ";".join(a.outcome.value for a in r.attempts),
        "attempts": len(r.attempts), "transport_filter": r.transport_filter,
        "transport_used": r.transport_used or "", "has_port_mapping": int(bool(r.port_mappings)),
        "rtt_to_relay_ms": mean_of(RttKind.TO_RELAY),
        "rtt_through_relay_ms": mean_of(RttKind.TO_REMOTE_THROUGH_RELAY),
        "rtt_after_holepunch_ms": mean_of(RttKind.TO_REMOTE_AFTER_HOLEPUNCH),
        "relayed_rtt_ms": _ms(r.relayed_rtt), "wait_time_ms": _ms(r.wait_time),
        "timing_errors_ms": ";".join(_ms(a.timing_error_observed) for a in r.attempts),
        "signal_bytes_i2l": r.signal_bytes["initiator_to_listener"],
        "signal_bytes_l2i": r.signal_bytes["listener_to_initiator"],
    }


def export(rs: ResultSet, fmt, path) -> int:
    """Write *rs* as ``jsonl`` or ``csv``; returns the number of bytes written."""
    fmt = fmt.lower()
    if fmt in ("jsonl", "jsonlines"):
        text = "".join(json.dumps(result_to_record(r, rs.scenario_digest, rs.seed), sort_keys=True,
                                  separators=(",", ":")) + "\n" for r in rs.results)
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rs.results:
            w.writerow(_csv_row(r))
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    data = text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def import_jsonl(path) -> ResultSet:
    digest, seed, results = "", 0, []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                digest, seed = rec.pop("scenario_digest"), rec.pop("seed")
                results.append(result_from_record(rec))
            except (KeyError, ValueError) as e:
                raise ConfigError(f"{path}:{n}: malformed record ({e})") from e
    return ResultSet(digest, seed, results)


# -- aggregation ------------------------------------------------------------

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def _quantiles(values):
    if not values:
        return {}
    xs = sorted(values)
    out = {}
    for q in QUANTILES:
        pos = q * (len(xs) - 1)
        lo = math.floor(pos)
        hi = min(lo + 1, len(xs) - 1)
        out[f"p{int(q * 100):02d}"] = xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)
    return out


def relay_position_bin(position):
    """Lower edge (percent) of the 5 % bin holding *position*."""
    return min(19, math.floor(round(position * 20, 9))) * 5


def latency_ratio(r: HolePunchResult):
    direct = r.rtt(RttKind.TO_REMOTE_AFTER_HOLEPUNCH)
    relayed = r.rtt(RttKind.TO_REMOTE_THROUGH_RELAY)
    if direct is None or relayed is None or relayed.mean == 0:
        return None
    return direct.mean / relayed.mean


def relay_position(r: HolePunchResult):
    to_relay = r.rtt(RttKind.TO_RELAY)
    via = r.rtt(RttKind.TO_REMOTE_THROUGH_RELAY)
    if to_relay is None or via is None or via.mean == 0:
        return None
    return to_relay.mean / via.mean


def in_success_filter(r: HolePunchResult):
    return r.outcome in (ResultOutcome.SUCCESS, ResultOutcome.FAILED) and not r.port_mappings


def _rate(rs):
    if not rs:
        return None
    return sum(r.outcome is ResultOutcome.SUCCESS for r in rs) / len(rs)


def _histogram(rs):
    h = {o.value: 0 for o in ResultOutcome}
    for r in rs:
        h[r.outcome.value] += 1
    return h


@dataclass
class Report:
    trials: int
    success_rate: float | None
    success_rate_defined: bool
    network_mean: float | None
    network_std: float | None
    networks_counted: int
    first_attempt_share: float | None
    outcome_histogram: dict
    outcome_histogram_mapped: dict
    outcome_histogram_unmapped: dict
    transport_success: dict
    latency_ratio_quantiles: dict
    relay_position_curve: dict
    rtt_std_over_mean_quantiles: dict
    rtt_std_below_half_mean_share: float | None
    reversed_share_mapped: float | None
    reversed_share_unmapped: float | None
    max_signal_bytes: int

    def to_dict(self):
        return asdict(self)


def aggregate(rs: ResultSet, min_network_samples=1) -> Report:
    results = rs.results if isinstance(rs, ResultSet) else list(rs)
    if not results:
        raise EmptyInput("cannot aggregate an empty result set")
    filtered = [r for r in results if in_success_filter(r)]
    rate = _rate(filtered)

    by_net = {}
    for r in filtered:
        by_net.setdefault(r.network_id, []).append(r)
    net_rates = [_rate(v) for k, v in sorted(by_net.items()) if len(v) >= min_network_samples]
    net_mean = statistics.fmean(net_rates) if net_rates else None
    net_std = statistics.stdev(net_rates) if len(net_rates) > 1 else (0.0 if net_rates else None)

    successes = [r for r in results if r.outcome is ResultOutcome.SUCCESS]
    first = None
    if successes:
        first = sum(r.attempts[0].outcome is AttemptOutcome.SUCCESS for r in successes) / len(successes)

    transport = {}
    for name in sorted({r.transport_filter for r in filtered}):
        transport[name] = _rate([r for r in filtered if r.transport_filter == name])

    curve_groups = {}
    for r in filtered:
        pos = relay_position(r)
        if pos is not None:
            curve_groups.setdefault(relay_position_bin(pos), []).append(r)
    curve = {str(b): _rate(v) for b, v in sorted(curve_groups.items())}

    ratios = [x for x in (latency_ratio(r) for r in successes) if x is not None]
    spread = []
    for r in results:
        s = r.rtt(RttKind.TO_REMOTE_THROUGH_RELAY)
        if s is not None and s.mean > 0:
            spread.append(s.std / s.mean)

    mapped = [r for r in results if r.port_mappings]
    unmapped = [r for r in results if not r.port_mappings]

    def reversed_share(rs_):
        if not rs_:
            return None
        return sum(r.outcome is ResultOutcome.CONNECTION_REVERSED for r in rs_) / len(rs_)

    return Report(
        trials=len(results), success_rate=rate, success_rate_defined=rate is not None,
        network_mean=net_mean, network_std=net_std, networks_counted=len(net_rates),
        first_attempt_share=first,
        outcome_histogram=_histogram(results), outcome_histogram_mapped=_histogram(mapped),
        outcome_histogram_unmapped=_histogram(unmapped), transport_success=transport,
        latency_ratio_quantiles=_quantiles(ratios), relay_position_curve=curve,
        rtt_std_over_mean_quantiles=_quantiles(spread),
        rtt_std_below_half_mean_share=(sum(x < 0.5 for x in spread) / len(spread)) if spread else None,
        reversed_share_mapped=reversed_share(mapped), reversed_share_unmapped=reversed_share(unmapped),
        max_signal_bytes=max(max(r.signal_bytes.values()) for r in results),
    )


def format_number(x, precision=4):
    if x is None:
        return "undefined"
    if isinstance(x, int) and not isinstance(x, bool):
        return str(x)
    if x != 0 and abs(x) < 10 ** -max(1, precision - 2):
        return f"{x:.{max(1, precision - 1)}e}"
    return f"{x:.{precision}f}"


def render_report(rep: Report, precision=4) -> str:
    f = lambda x: format_number(x, precision)  # noqa: E731
    lines = [f"trials                 {rep.trials}"]
    if rep.success_rate_defined:
        lines.append(f"success rate           {f(rep.success_rate)}")
    else:
        lines.append("success rate           undefined (no unmapped SUCCESS/FAILED results)")
    lines.append(f"per-network rate       {f(rep.network_mean)} +/- {f(rep.network_std)}"
                 f" over {rep.networks_counted} networks")
    lines.append(f"first-attempt share    {f(rep.first_attempt_share)}")
    for name, v in rep.transport_success.items():
        lines.append(f"success [{name}]".ljust(23) + f"{f(v)}")
    lines.append("outcomes               " + ", ".join(f"{k}={v}" for k, v in rep.outcome_histogram.items() if v))
    lines.append(f"reversed share         mapped {f(rep.reversed_share_mapped)}, "
                 f"unmapped {f(rep.reversed_share_unmapped)}")
    if rep.latency_ratio_quantiles:
        lines.append("latency ratio          " + ", ".join(f"{k}={f(v)}" for k, v in rep.latency_ratio_quantiles.items()))
    if rep.relay_position_curve:
        lines.append("relay position         " + ", ".join(f"{k}%={f(v)}" for k, v in rep.relay_position_curve.items()))
    lines.append(f"rtt std < mean/2       {f(rep.rtt_std_below_half_mean_share)}")
    lines.append(f"max signal bytes       {rep.max_signal_bytes}")
    return "\n".join(lines) + "\n"
