"""Relay-coordinated hole punching.

The flow per punch: optional connection reversal, a CONNECT exchange over the
relay (whose round trip times the dial), then up to ``max_attempts`` rounds
of SYNC followed by synchronized dialing.
"""
from __future__ import annotations

import enum
import statistics
from dataclasses import dataclass, field

from .nat import Endpoint, NatDevice, Transport
from .netsim import MS, SECOND, Direction, Network, UnroutableDestination, sample_delay
from .transports import (
    DEFAULT_RETRANSMITS,
    BirthdayPunch,
    ConnectionRecord,
    DialAttempt,
    DialOutcome,
    PassiveListener,
    PathKind,
    QuicHolePunch,
    TcpSimultaneousOpen,
    direct_dial,
)

SIGNAL_BUDGET = 500
REVERSAL_TIMEOUT = 5 * SECOND
DEFAULT_PORT = 4001


class ResultOutcome(str, enum.Enum):
    UNKNOWN = "UNKNOWN"
    NO_CONNECTION = "NO_CONNECTION"
    NO_STREAM = "NO_STREAM"
    CONNECTION_REVERSED = "CONNECTION_REVERSED"
    CANCELLED = "CANCELLED"
    FAILED = "FAILED"
    SUCCESS = "SUCCESS"


class AttemptOutcome(str, enum.Enum):
    UNKNOWN = "UNKNOWN"
    DIRECT_DIAL = "DIRECT_DIAL"
    PROTOCOL_ERROR = "PROTOCOL_ERROR"
    CANCELLED = "CANCELLED"
    TIMEOUT = "TIMEOUT"
    FAILED = "FAILED"
    SUCCESS = "SUCCESS"


class RttKind(str, enum.Enum):
    TO_RELAY = "TO_RELAY"
    TO_REMOTE_THROUGH_RELAY = "TO_REMOTE_THROUGH_RELAY"
    TO_REMOTE_AFTER_HOLEPUNCH = "TO_REMOTE_AFTER_HOLEPUNCH"


class PunchTransport(str, enum.Enum):
    TCP = "TCP"
    QUIC = "QUIC"

    @property
    def wire(self):
        return Transport.TCP if self is PunchTransport.TCP else Transport.UDP

    @classmethod
    def of(cls, wire: Transport):
        return cls.TCP if wire is Transport.TCP else cls.QUIC


class TransportFilter(str, enum.Enum):
    TCP = "TCP"
    QUIC = "QUIC"
    ANY = "Any"

    def admits(self, t: PunchTransport):
        return self is TransportFilter.ANY or self.value == t.value


class AllSamplesLost(Exception):
    pass


class ConfigError(ValueError):
    pass


class SignalBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class PeerAddress:
    endpoint: Endpoint
    relayed: bool = False
    relay_id: str | None = None

    def __str__(self):
        ep = self.endpoint
        proto = "tcp" if ep.transport is Transport.TCP else "udp"
        s = f"/ip4/{ep.address}/{proto}/{ep.port}"
        if ep.transport is Transport.UDP:
            s += "/quic-v1"
        if self.relayed:
            s += f"/p2p/{self.relay_id}/p2p-circuit"
        return s

    @property
    def wire_size(self):
        return 8 if self.endpoint.transport is Transport.TCP else 10


@dataclass
class PeerSpec:
    peer_id: str
    host_id: str
    nat: NatDevice | None
    advertised_addresses: list = field(default_factory=list)
    has_port_mapping: bool = False
    supported_transports: frozenset = frozenset({PunchTransport.TCP, PunchTransport.QUIC})
    listen_port: int = DEFAULT_PORT
    local_address: str = ""
    observed: dict = field(default_factory=dict)
    supports_dcutr: bool = True

    @property
    def is_public(self):
        return self.nat is None

    def endpoint(self, t: Transport):
        return Endpoint(self.local_address, self.listen_port, t)

    def direct_addresses(self):
        return [a for a in self.advertised_addresses if not a.relayed]

    def check(self):
        direct = self.direct_addresses()
        if (self.is_public or self.has_port_mapping) and not direct:
            raise ConfigError(f"{self.peer_id}: dialable peer advertises no direct address")
        if not self.is_public and not self.has_port_mapping and direct:
            raise ConfigError(f"{self.peer_id}: NATed peer without mapping advertises {direct[0]}")


def attach_peer(net: Network, host_id, peer_id=None, relay_host_id=None, listen_port=DEFAULT_PORT,
                transports=(PunchTransport.TCP, PunchTransport.QUIC), port_mapping=False,
                mapping_expires_at=None) -> PeerSpec:
    """Register a peer on *host_id* and run an Identify-style exchange with
    the relay, which leaves a real NAT mapping behind and yields the
    observed public endpoint per transport."""
    host = net.topology.hosts[host_id]
    peer = PeerSpec(peer_id or host_id, host_id, host.nat, listen_port=listen_port,
                    local_address=host.address, supported_transports=frozenset(transports))
    relay = net.topology.hosts[relay_host_id] if relay_host_id else None
    for t in sorted(peer.supported_transports, key=lambda t: t.value):
        local = peer.endpoint(t.wire)
        if port_mapping and host.nat is not None:
            host.nat.add_port_mapping(local, expires_at=mapping_expires_at)
        if host.nat is None:
            observed = local
        elif relay is not None:
            relay_ep = Endpoint(relay.public_address, DEFAULT_PORT, t.wire)
            observed = host.nat.translate_outbound(local, relay_ep, net.now)
        else:
            observed = None
        if observed is not None:
            peer.observed[t] = observed
        if relay is not None:
            relay_ep = Endpoint(relay.public_address, DEFAULT_PORT, t.wire)
            peer.advertised_addresses.append(PeerAddress(relay_ep, True, relay_host_id))
        if host.nat is None:
            peer.advertised_addresses.append(PeerAddress(local))
        elif port_mapping:
            peer.advertised_addresses.append(PeerAddress(
                Endpoint(host.nat.external_address, listen_port, t.wire)))
    peer.has_port_mapping = bool(port_mapping and host.nat is not None)
    return peer


@dataclass(frozen=True)
class SignalMessage:
    kind: str
    addresses: tuple = ()

    @property
    def size(self):
        if self.kind == "SYNC":
            return 3
        return 3 + sum(a.wire_size + 2 for a in self.addresses)


@dataclass
class RttStats:
    kind: RttKind
    samples: list

    def __post_init__(self):
        self.kind = RttKind(self.kind)
        if not 1 <= len(self.samples) <= 10:
            raise ValueError("RTT statistics need between 1 and 10 samples")

    @property
    def mean(self):
        return statistics.fmean(self.samples)

    @property
    def std(self):
        return statistics.stdev(self.samples) if len(self.samples) > 1 else 0.0


@dataclass(frozen=True)
class RefinedTiming:
    rtt_listener_initiator: int
    rtt_listener_nat: int = 0
    rtt_initiator_nat: int = 0

    def __post_init__(self):
        if min(self.rtt_listener_initiator, self.rtt_listener_nat, self.rtt_initiator_nat) < 0:
            raise ValueError("round-trip times must be non-negative")


def compute_wait_time(t: RefinedTiming, refined: bool) -> int:
    """Initiator's delay between sending SYNC and dialing."""
    if not refined:
        return t.rtt_listener_initiator // 2
    total = t.rtt_listener_initiator + t.rtt_listener_nat - t.rtt_initiator_nat
    return max(0, total // 2)


@dataclass(frozen=True)
class BirthdayOptions:
    m_open: int
    k_probe: int

    def __post_init__(self):
        for v in (self.m_open, self.k_probe):
            if not 1 <= v <= 65536:
                raise ConfigError("birthday m_open and k_probe must lie in [1, 65536]")


@dataclass(frozen=True)
class PunchOptions:
    transport_filter: TransportFilter = TransportFilter.ANY
    max_attempts: int = 3
    attempt_timeout: int = 15 * SECOND
    enable_reversal: bool = True
    alternate_roles: bool = False
    refined_rtt: bool = False
    ttl_priming: bool = False
    birthday: BirthdayOptions | None = None
    retransmit_schedule: tuple = DEFAULT_RETRANSMITS
    rst_on_unexpected_syn: bool = False
    rtt_samples: int = 10

    def __post_init__(self):
        object.__setattr__(self, "transport_filter", TransportFilter(self.transport_filter))
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if self.attempt_timeout <= 0:
            raise ConfigError("attempt_timeout must be positive")
        if not 1 <= self.rtt_samples <= 10:
            raise ConfigError("rtt_samples must lie in [1, 10]")
        if any(o < 0 for o in self.retransmit_schedule) or not self.retransmit_schedule:
            raise ConfigError("retransmit schedule needs at least one non-negative offset")


@dataclass
class HolePunchAttempt:
    index: int
    outcome: AttemptOutcome
    roles: str = "listener=client"
    timing_error_observed: int | None = None
    transport: str | None = None
    started_at: int = 0
    ended_at: int = 0


@dataclass
class HolePunchResult:
    client_id: str
    remote_id: str
    relay_id: str
    outcome: ResultOutcome = ResultOutcome.UNKNOWN
    attempts: list = field(default_factory=list)
    rtts: list = field(default_factory=list)
    port_mappings: list = field(default_factory=list)
    transport_used: str | None = None
    transport_filter: str = TransportFilter.ANY.value
    network_id: str = ""
    signal_bytes: dict = field(default_factory=lambda: {"initiator_to_listener": 0, "listener_to_initiator": 0})
    wait_time: int | None = None
    relayed_rtt: int | None = None
    relayed_closed: bool = False
    trial: int = 0
    client_nat: str = ""
    remote_nat: str = ""

    def rtt(self, kind):
        kind = RttKind(kind)
        return next((r for r in self.rtts if r.kind is kind), None)


def _legs(net: Network, src_id, dst_id):
    """(link, direction) pairs a packet crosses from *src_id* to *dst_id*."""
    topo = net.topology
    src, dst = topo.hosts[src_id], topo.hosts[dst_id]
    legs = []
    if src.nat is not None:
        legs.append((src.local_segment, Direction.FORWARD))
    legs.append(topo.core_link(src.site, dst.site))
    if dst.nat is not None:
        legs.append((dst.local_segment, Direction.BACKWARD))
    return legs


def _traverse(net, legs, rng):
    """One-way delay over *legs*, or None when some leg loses the packet."""
    total = 0
    for link, direction in legs:
        if link.loss_prob > 0 and rng.random() < link.loss_prob:
            return None
        total += sample_delay(link, direction, rng)
    return total


def measure_rtt(net: Network, a, b, via=None, kind=RttKind.TO_REMOTE_AFTER_HOLEPUNCH,
                sample_count=10, rng=None) -> RttStats:
    """Echo round trips from host *a* to host *b*, optionally through relay *via*."""
    if not 1 <= sample_count <= 10:
        raise ValueError("sample_count must lie in [1, 10]")
    rng = rng or net.rng
    hops = [a, via, b] if via is not None else [a, b]
    out = [leg for x, y in zip(hops, hops[1:]) for leg in _legs(net, x, y)]
    back = [leg for x, y in zip(hops[::-1], hops[-2::-1]) for leg in _legs(net, x, y)]
    samples = []
    for _ in range(sample_count):
        there = _traverse(net, out, rng)
        home = _traverse(net, back, rng) if there is not None else None
        if home is not None:
            samples.append(there + home)
    if not samples:
        raise AllSamplesLost(f"all {sample_count} echoes from {a} to {b} were lost")
    return RttStats(kind, samples)


class RelayChannel:
    """Reliable in-order signaling path between two peers via a relay."""

    def __init__(self, net: Network, relay_id, initiator: PeerSpec, listener: PeerSpec, budget=SIGNAL_BUDGET):
        self.net = net
        self.relay_id = relay_id
        self.initiator, self.listener = initiator, listener
        self.budget = budget
        self.bytes = {"initiator_to_listener": 0, "listener_to_initiator": 0}
        self._routes = {
            "initiator_to_listener": _legs(net, initiator.host_id, relay_id) + _legs(net, relay_id, listener.host_id),
            "listener_to_initiator": _legs(net, listener.host_id, relay_id) + _legs(net, relay_id, initiator.host_id),
        }
        self._last = {k: 0 for k in self._routes}

    def send(self, direction, msg: SignalMessage, at):
        """Account *msg* sent at *at*; returns its delivery time."""
        self.bytes[direction] += msg.size
        if self.bytes[direction] > self.budget:
            raise SignalBudgetExceeded(f"{direction}: {self.bytes[direction]} bytes")
        delay = _reliable_delay(self.net, self._routes[direction])
        arrive = max(at + delay, self._last[direction])
        self._last[direction] = arrive
        return arrive


def _reliable_delay(net, legs):
    # lost copies are retransmitted by the stream layer after one RTO
    waited = 0
    while True:
        d = _traverse(net, legs, net.rng)
        if d is not None:
            return waited + d
        waited += SECOND


def _nat_rtt(net, peer: PeerSpec):
    host = net.topology.hosts[peer.host_id]
    if host.local_segment is None:
        return 0
    seg = host.local_segment
    return seg.forward.mean + seg.backward.mean


def try_connection_reversal(net: Network, initiator: PeerSpec, listener: PeerSpec,
                            transports=None, timeout=REVERSAL_TIMEOUT) -> ConnectionRecord | None:
    """Initiator dials the listener's direct addresses; None means not dialable."""
    transports = transports or sorted(listener.supported_transports, key=lambda t: t.value)
    wires = {t.wire for t in transports}
    candidates = [a.endpoint for a in listener.direct_addresses() if a.endpoint.transport in wires]
    if not candidates:
        return None
    passive = [PassiveListener(net, listener.host_id, listener.endpoint(w)) for w in sorted(wires)]
    try:
        for ep in candidates:
            dial = DialAttempt(initiator.host_id, initiator.endpoint(ep.transport), ep, net.now)
            direct_dial(net, dial, net.now + timeout)
            if dial.result is DialOutcome.ESTABLISHED:
                return ConnectionRecord((initiator.peer_id, listener.peer_id), ep.transport, net.now,
                                        initiator.peer_id, local=dial.local, remote=ep)
    finally:
        for p in passive:
            p.close()
    return None


@dataclass
class PunchTrace:
    interrupted: bool = False
    config_error: bool = False
    relayed_connection: bool = True
    stream_opened: bool = False
    direct_connection: ConnectionRecord | None = None
    attempts: list = field(default_factory=list)


def classify_outcome(trace: PunchTrace) -> ResultOutcome:
    if trace.interrupted:
        return ResultOutcome.CANCELLED
    if trace.config_error:
        return ResultOutcome.UNKNOWN
    if not trace.relayed_connection:
        return ResultOutcome.NO_CONNECTION
    if any(a.outcome is AttemptOutcome.SUCCESS for a in trace.attempts):
        return ResultOutcome.SUCCESS
    if not trace.stream_opened:
        if trace.direct_connection is not None:
            return ResultOutcome.CONNECTION_REVERSED
        return ResultOutcome.NO_STREAM
    return ResultOutcome.FAILED


@dataclass
class _Schedule:
    sync_sent: int
    initiator_dial: int
    listener_dial: int
    initiator_prime: int | None
    listener_prime: int | None
    deadline: int


def _edm(peer: PeerSpec):
    return peer.nat is not None and peer.nat.mapping.endpoint_dependent


def _run_attempt(net, index, initiator: PeerSpec, listener: PeerSpec, transports, opts: PunchOptions,
                 sch: _Schedule, rng):
    swap = opts.alternate_roles and index % 2 == 0
    sessions = []
    for t in transports:
        w = t.wire
        i_dial = DialAttempt(initiator.host_id, initiator.endpoint(w), listener.observed[t], sch.initiator_dial,
                             opts.retransmit_schedule, sch.initiator_prime)
        l_dial = DialAttempt(listener.host_id, listener.endpoint(w), initiator.observed[t], sch.listener_dial,
                             opts.retransmit_schedule, sch.listener_prime)
        if t is PunchTransport.TCP:
            s = TcpSimultaneousOpen(net, i_dial, l_dial, sch.deadline, opts.rst_on_unexpected_syn)
        elif opts.birthday is not None and (_edm(initiator) or _edm(listener)):
            opener, prober = (l_dial, i_dial) if _edm(listener) else (i_dial, l_dial)
            s = BirthdayPunch(net, opener, prober, opts.birthday.m_open, opts.birthday.k_probe,
                              sch.deadline, rng)
        else:
            client, server = (i_dial, l_dial) if swap else (l_dial, i_dial)
            s = QuicHolePunch(net, client, server, sch.deadline, preferred_client=listener.host_id)
        sessions.append((t, s, i_dial, l_dial))
        s.start()

    def up(s):
        return s.done and all(d.result is DialOutcome.ESTABLISHED for d in s.dials)

    # re-evaluated only when some dial settles, not on every event
    finished = []

    def settled(_dial):
        if any(up(s) for _, s, _, _ in sessions) or all(s.done for _, s, _, _ in sessions):
            finished.append(True)

    for _, s, i_dial, l_dial in sessions:
        i_dial.on_settle = l_dial.on_settle = settled
    net.engine.run(until=sch.deadline, stop=finished.__len__)
    won = None
    for t, s, i_dial, l_dial in sessions:
        s.finish()
        i_dial.on_settle = l_dial.on_settle = None
    # QUIC wins ties
    for t, s, i_dial, l_dial in sorted(sessions, key=lambda x: x[0] is not PunchTransport.QUIC):
        if s.connection is not None:
            won = (t, s, i_dial, l_dial)
            break
    t, s, i_dial, l_dial = won or sessions[0]
    eps = None
    if i_dial.first_egress is not None and l_dial.first_egress is not None:
        eps = i_dial.first_egress - l_dial.first_egress
    attempt = HolePunchAttempt(
        index, AttemptOutcome.SUCCESS if won else AttemptOutcome.FAILED,
        roles="initiator=client" if swap else "listener=client",
        timing_error_observed=eps, transport=t.value if won else None,
        started_at=sch.sync_sent, ended_at=net.now)
    conn = s.connection if won else None
    if conn is not None:
        conn.path = PathKind.DIRECT
    return attempt, conn


def run_hole_punch(net: Network, initiator: PeerSpec, listener: PeerSpec, relay_id,
                   options: PunchOptions | None = None, rng=None) -> HolePunchResult:
    """Run one full punch; the listener reached the initiator over *relay_id*."""
    opts = options or PunchOptions()
    rng = rng or net.rng
    result = HolePunchResult(listener.peer_id, initiator.peer_id, relay_id,
                             transport_filter=opts.transport_filter.value)
    host = net.topology.hosts[listener.host_id]
    if host.nat is not None:
        result.port_mappings = [str(pm.external) for pm in host.nat.port_mappings(net.now)]
    trace = PunchTrace()

    def done():
        result.attempts = trace.attempts
        result.outcome = classify_outcome(trace)
        return result

    try:
        chan = RelayChannel(net, relay_id, initiator, listener)
        result.rtts.append(measure_rtt(net, listener.host_id, relay_id, kind=RttKind.TO_RELAY,
                                       sample_count=opts.rtt_samples, rng=rng))
        result.rtts.append(measure_rtt(net, listener.host_id, initiator.host_id, via=relay_id,
                                       kind=RttKind.TO_REMOTE_THROUGH_RELAY,
                                       sample_count=opts.rtt_samples, rng=rng))
    except (UnroutableDestination, AllSamplesLost):
        trace.relayed_connection = False
        return done()

    transports = [t for t in (PunchTransport.QUIC, PunchTransport.TCP)
                  if opts.transport_filter.admits(t) and t in initiator.supported_transports
                  and t in listener.supported_transports]
    if opts.enable_reversal:
        conn = try_connection_reversal(net, initiator, listener, transports or None)
        if conn is not None:
            trace.direct_connection = conn
            result.transport_used = PunchTransport.of(conn.transport).value
            result.relayed_closed = True
            return done()
    if not transports:
        trace.config_error = True
        return done()
    if not listener.supports_dcutr or not initiator.supports_dcutr:
        return done()
    missing = [t for t in transports for p in (initiator, listener) if t not in p.observed]
    if missing:
        trace.config_error = True
        return done()
    trace.stream_opened = True

    t0 = net.now
    wires = {t.wire for t in transports}
    connect_i = SignalMessage("CONNECT", tuple(a for a in _connect_addresses(initiator) if a.endpoint.transport in wires))
    connect_l = SignalMessage("CONNECT", tuple(a for a in _connect_addresses(listener) if a.endpoint.transport in wires))
    t_c1 = chan.send("initiator_to_listener", connect_i, t0)
    t_c2 = chan.send("listener_to_initiator", connect_l, t_c1)
    rtt = t_c2 - t0
    result.relayed_rtt = rtt
    timing = RefinedTiming(rtt, _nat_rtt(net, listener), _nat_rtt(net, initiator))
    wait = compute_wait_time(timing, opts.refined_rtt)
    result.wait_time = wait

    sync_at = t_c2
    conn = None
    for index in range(1, opts.max_attempts + 1):
        recv = chan.send("initiator_to_listener", SignalMessage("SYNC"), sync_at)
        if opts.ttl_priming:
            i_prime = t_c2 if index == 1 else sync_at
            l_prime = t_c1 if index == 1 else None
        else:
            i_prime = l_prime = None
        sch = _Schedule(sync_at, sync_at + wait, recv, i_prime, l_prime, sync_at + opts.attempt_timeout)
        attempt, conn = _run_attempt(net, index, initiator, listener, transports, opts, sch, rng)
        trace.attempts.append(attempt)
        if conn is not None:
            break
        sync_at = max(net.now, recv)
    result.signal_bytes = dict(chan.bytes)
    if conn is not None:
        trace.direct_connection = conn
        result.transport_used = PunchTransport.of(conn.transport).value
        result.rtts.append(measure_rtt(net, listener.host_id, initiator.host_id,
                                       kind=RttKind.TO_REMOTE_AFTER_HOLEPUNCH,
                                       sample_count=opts.rtt_samples, rng=rng))
        result.relayed_closed = True
    return done()


def _connect_addresses(peer: PeerSpec):
    """Direct candidates carried in CONNECT: observed plus advertised direct ones."""
    seen = []
    for t in sorted(peer.observed, key=lambda t: t.value):
        a = PeerAddress(peer.observed[t])
        if a not in seen:
            seen.append(a)
    for a in peer.direct_addresses():
        if a not in seen:
            seen.append(a)
    return seen
