"""Connection establishment over the event engine.

Only the slice of each protocol that matters for punching is modelled:
SYN/SYNACK/ACK/RST for TCP simultaneous open, and hello/handshake plus
dummy priming datagrams for QUIC over UDP.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .nat import DropReason, Endpoint, Transport
from .netsim import MS, SECOND, Network, Packet, PacketKind

_DATAGRAM = PacketKind.UDP_DATAGRAM

DEFAULT_RETRANSMITS = (0, 1 * SECOND, 3 * SECOND)
PRIMING_COUNT = 5
PRIMING_INTERVAL = 100 * MS
PRIMING_PAYLOAD = 64
LOW_TTL = 3
PROBE_INTERVAL = 2 * MS


class DialOutcome(str, enum.Enum):
    ESTABLISHED = "Established"
    TIMED_OUT = "TimedOut"
    RESET_RECEIVED = "ResetReceived"
    DENYLISTED = "Denylisted"


class Role(str, enum.Enum):
    CLIENT = "Client"
    SERVER = "Server"


class PathKind(str, enum.Enum):
    RELAYED = "Relayed"
    DIRECT = "Direct"


@dataclass
class DialAttempt:
    dialer: str
    local: Endpoint
    target: Endpoint
    start_time: int
    syn_retransmit_schedule: tuple = DEFAULT_RETRANSMITS
    prime_at: int | None = None
    result: DialOutcome | None = None
    role: Role | None = None
    established_at: int | None = None
    first_egress: int | None = None
    peer: Endpoint | None = None
    last_drop: DropReason | None = None
    on_settle: object = field(default=None, repr=False, compare=False)

    @property
    def transport(self):
        return self.local.transport

    def settle(self, result, now, role=None, peer=None):
        if self.result is not None:
            raise RuntimeError(f"dial from {self.dialer} already settled as {self.result.value}")
        self.result = DialOutcome(result)
        if self.result is DialOutcome.ESTABLISHED:
            if role is None:
                raise ValueError("an established dial must record its role")
            self.role = role
            self.established_at = now
            self.peer = peer or self.target
        if self.on_settle is not None:
            self.on_settle(self)

    def _failure(self):
        if self.last_drop is DropReason.DENYLISTED:
            return DialOutcome.DENYLISTED
        return DialOutcome.TIMED_OUT


@dataclass
class ConnectionRecord:
    peers: tuple
    transport: Transport
    established_at: int
    client_side: str
    local: Endpoint | None = None
    remote: Endpoint | None = None
    path: PathKind = PathKind.DIRECT
    redundant: bool = False


class _Socket:
    """Shared timer/binding bookkeeping for a dialing socket."""

    def __init__(self, net: Network, dial: DialAttempt):
        self.net = net
        self.dial = dial
        self.timers = []
        net.bind(dial.dialer, dial.local, self.on_packet)

    def on_packet(self, pkt):
        raise NotImplementedError

    def at(self, t, fn, *args):
        t = max(t, self.net.now)
        self.timers.append(self.net.engine.schedule(t, fn, *args))

    def _send(self, kind, dst=None, ttl=64, payload_size=0, count_egress=True):
        pkt = Packet(self.dial.local, dst or self.dial.target, kind, ttl=ttl, payload_size=payload_size)
        self.net.send(pkt, self.dial.dialer, on_drop=self._dropped,
                      on_egress=self._egressed if count_egress else None)

    def _dropped(self, pkt, reason):
        self.dial.last_drop = reason

    def _egressed(self, pkt, t):
        if self.dial.first_egress is None:
            self.dial.first_egress = t

    def close(self):
        for t in self.timers:
            self.net.engine.cancel(t)
        self.timers.clear()
        self.net.unbind(self.dial.dialer, self.dial.local, self.on_packet)

    def expire(self):
        if self.dial.result is None:
            self.dial.settle(self.dial._failure(), self.net.now)


class _TcpState(enum.Enum):
    CLOSED = 0
    SYN_SENT = 1
    SYN_RCVD = 2
    ESTABLISHED = 3


class TcpSocket(_Socket):
    """Active-open TCP socket that also handles a crossed SYN."""

    def __init__(self, net, dial, deadline, rst_on_unexpected_syn=False, on_established=None):
        super().__init__(net, dial)
        self.state = _TcpState.CLOSED
        self.deadline = deadline
        self.rst_on_unexpected_syn = rst_on_unexpected_syn
        self.on_established = on_established

    def arm(self):
        d = self.dial
        if d.prime_at is not None and d.prime_at < d.start_time:
            self.at(d.prime_at, self._prime)
        for offset in d.syn_retransmit_schedule:
            if d.start_time + offset < self.deadline:
                self.at(d.start_time + offset, self._transmit)
        self.at(self.deadline, self.expire)

    def _prime(self):
        if self.dial.result is None and self.state is _TcpState.CLOSED:
            self.state = _TcpState.SYN_SENT
            self._send(PacketKind.SYN, ttl=LOW_TTL, count_egress=False)

    def _transmit(self):
        if self.dial.result is not None:
            return
        if self.state is _TcpState.CLOSED:
            self.state = _TcpState.SYN_SENT
        if self.state is _TcpState.SYN_SENT:
            self._send(PacketKind.SYN)
        elif self.state is _TcpState.SYN_RCVD:
            self._send(PacketKind.SYNACK)

    def _establish(self, role):
        self.state = _TcpState.ESTABLISHED
        self.dial.settle(DialOutcome.ESTABLISHED, self.net.now, role=role)
        if self.on_established is not None:
            self.on_established(self)

    def on_packet(self, pkt):
        d = self.dial
        kind = pkt.kind
        if pkt.src != d.target or (d.result is not None and self.state is not _TcpState.ESTABLISHED):
            # no half-open state for this 4-tuple
            if kind is PacketKind.SYN:
                self.net.reply(pkt, PacketKind.RST, d.dialer)
            return
        if kind is PacketKind.SYN:
            if self.state is _TcpState.SYN_SENT:
                if self.rst_on_unexpected_syn:
                    self.net.reply(pkt, PacketKind.RST, d.dialer)
                    return
                self.state = _TcpState.SYN_RCVD
                self._send(PacketKind.SYNACK)
            elif self.state is _TcpState.CLOSED:
                self.net.reply(pkt, PacketKind.RST, d.dialer)
            else:
                self._send(PacketKind.SYNACK)
        elif kind is PacketKind.SYNACK:
            if self.state in (_TcpState.SYN_SENT, _TcpState.SYN_RCVD):
                self._send(PacketKind.ACK)
                self._establish(Role.CLIENT)
            elif self.state is _TcpState.ESTABLISHED:
                self._send(PacketKind.ACK)
        elif kind is PacketKind.ACK:
            if self.state is _TcpState.SYN_RCVD:
                self._establish(Role.CLIENT)
        elif kind is PacketKind.RST:
            if self.state in (_TcpState.SYN_SENT, _TcpState.SYN_RCVD):
                self.state = _TcpState.CLOSED
                d.settle(DialOutcome.RESET_RECEIVED, self.net.now)
                for t in self.timers:
                    self.net.engine.cancel(t)


def _first_departed(a: DialAttempt, b: DialAttempt):
    ta = a.first_egress if a.first_egress is not None else a.start_time
    tb = b.first_egress if b.first_egress is not None else b.start_time
    return a if ta <= tb else b


def _normalize(a: DialAttempt, b: DialAttempt):
    """Half-established pairs are abandoned: both sides count as failed."""
    ea = a.result is DialOutcome.ESTABLISHED
    eb = b.result is DialOutcome.ESTABLISHED
    if ea != eb:
        up = a if ea else b
        up.result, up.role, up.established_at, up.peer = DialOutcome.TIMED_OUT, None, None, None


class TcpSimultaneousOpen:
    def __init__(self, net: Network, a_dial: DialAttempt, b_dial: DialAttempt, deadline,
                 rst_on_unexpected_syn=False):
        self.net = net
        self.a, self.b = a_dial, b_dial
        self.deadline = deadline
        self.sockets = [TcpSocket(net, a_dial, deadline, rst_on_unexpected_syn),
                        TcpSocket(net, b_dial, deadline, rst_on_unexpected_syn)]
        self.connection: ConnectionRecord | None = None

    def start(self):
        for s in self.sockets:
            s.arm()
        return self

    @property
    def done(self):
        return self.a.result is not None and self.b.result is not None

    @property
    def dials(self):
        return (self.a, self.b)

    def finish(self):
        for s in self.sockets:
            s.expire()
            s.close()
        _normalize(self.a, self.b)
        if self.a.result is DialOutcome.ESTABLISHED:
            client = _first_departed(self.a, self.b)
            server = self.b if client is self.a else self.a
            client.role, server.role = Role.CLIENT, Role.SERVER
            self.connection = ConnectionRecord(
                (self.a.dialer, self.b.dialer), Transport.TCP,
                max(self.a.established_at, self.b.established_at), client.dialer,
                local=self.a.local, remote=self.a.peer)
        return self.a.result, self.b.result


def tcp_simultaneous_open(net: Network, a_dial: DialAttempt, b_dial: DialAttempt, deadline,
                          rst_on_unexpected_syn=False):
    """Run both sides of a TCP simultaneous open until settled or *deadline*."""
    session = TcpSimultaneousOpen(net, a_dial, b_dial, deadline, rst_on_unexpected_syn).start()
    net.engine.run(until=deadline, stop=lambda: session.done)
    return session.finish()


class QuicSocket(_Socket):
    """UDP socket that can act as a QUIC client (hellos), server, or primer."""

    def __init__(self, net, dial, deadline, client=False, server=True, priming_count=PRIMING_COUNT,
                 priming_interval=PRIMING_INTERVAL, priming_ttl=64, on_connection=None):
        super().__init__(net, dial)
        self.deadline = deadline
        self.client = client
        self.server = server
        self.priming_count = priming_count
        self.priming_interval = priming_interval
        self.priming_ttl = priming_ttl
        self.on_connection = on_connection
        self.server_peers: set = set()
        self.client_done = False

    def arm(self):
        d = self.dial
        if d.prime_at is not None:
            t = d.prime_at
            while t < d.start_time and t < self.deadline:
                self.at(t, self._low_prime)
                t += self.priming_interval
        if self.client:
            for offset in d.syn_retransmit_schedule:
                if d.start_time + offset < self.deadline:
                    self.at(d.start_time + offset, self._hello)
        else:
            for i in range(self.priming_count):
                t = d.start_time + i * self.priming_interval
                if t < self.deadline:
                    self.at(t, self._prime)
        self.at(self.deadline, self.expire)

    def _prime(self):
        if self.dial.result is None:
            self._send(PacketKind.UDP_DATAGRAM, ttl=self.priming_ttl, payload_size=PRIMING_PAYLOAD)

    def _low_prime(self):
        # opens the local mapping without reaching the remote NAT
        if self.dial.result is None:
            self._send(PacketKind.UDP_DATAGRAM, ttl=LOW_TTL, payload_size=PRIMING_PAYLOAD,
                       count_egress=False)

    def _hello(self):
        if not self.client_done:
            self._send(PacketKind.QUIC_HELLO, payload_size=1200)

    def _settle(self, role, peer):
        if self.dial.result is None:
            self.dial.settle(DialOutcome.ESTABLISHED, self.net.now, role=role, peer=peer)

    def on_packet(self, pkt):
        kind = pkt.kind
        if kind is PacketKind.QUIC_HELLO and self.server:
            self.net.reply(pkt, PacketKind.QUIC_HANDSHAKE, self.dial.dialer, payload_size=1200)
        elif kind is PacketKind.QUIC_HANDSHAKE and self.client and pkt.src == self.dial.target:
            self.net.reply(pkt, PacketKind.ACK, self.dial.dialer)
            if not self.client_done:
                self.client_done = True
                self._settle(Role.CLIENT, pkt.src)
                if self.on_connection:
                    self.on_connection(self, Role.CLIENT, pkt.src)
        elif kind is PacketKind.ACK and self.server and pkt.src not in self.server_peers:
            self.server_peers.add(pkt.src)
            self._settle(Role.SERVER, pkt.src)
            if self.on_connection:
                self.on_connection(self, Role.SERVER, pkt.src)
        # anything else (dummy datagrams) is ignored


class QuicHolePunch:
    """QUIC punch: *client* sends hellos, *server* primes its NAT with
    dummy datagrams and answers hellos.  With ``both_hello`` each side does
    both, and up to two connections may come up."""

    def __init__(self, net: Network, client: DialAttempt, server: DialAttempt, deadline,
                 both_hello=False, priming_count=PRIMING_COUNT, priming_interval=PRIMING_INTERVAL,
                 priming_ttl=64, preferred_client=None):
        self.net = net
        self.client, self.server = client, server
        self.deadline = deadline
        self.preferred_client = preferred_client or client.dialer
        self.connections: list[ConnectionRecord] = []
        self._pending = {}
        self.sockets = [
            QuicSocket(net, client, deadline, client=True, server=both_hello,
                       on_connection=self._on_connection),
            QuicSocket(net, server, deadline, client=both_hello, server=True,
                       priming_count=priming_count, priming_interval=priming_interval,
                       priming_ttl=priming_ttl, on_connection=self._on_connection),
        ]

    def start(self):
        for s in self.sockets:
            s.arm()
        return self

    @property
    def dials(self):
        return (self.client, self.server)

    @property
    def done(self):
        c, s = self.client.result, self.server.result
        if c is None or s is None:
            return False
        if not (c is s is DialOutcome.ESTABLISHED):
            return True
        # both sides may have settled as clients before an ACK paired the halves
        return bool(self.connections) and all(len(h) == 2 for h in self._pending.values())

    def _on_connection(self, sock, role, peer):
        # a connection is up once its client saw the handshake and its server the ACK
        client_host = sock.dial.dialer if role is Role.CLIENT else self._other(sock).dial.dialer
        key = client_host
        halves = self._pending.setdefault(key, set())
        halves.add(role)
        if halves == {Role.CLIENT, Role.SERVER}:
            self.connections.append(ConnectionRecord(
                (self.client.dialer, self.server.dialer), Transport.UDP, self.net.now, client_host,
                local=sock.dial.local, remote=peer))

    def _other(self, sock):
        return self.sockets[1] if sock is self.sockets[0] else self.sockets[0]

    def finish(self):
        for s in self.sockets:
            s.expire()
            s.close()
            s.on_connection = None
        _normalize(self.client, self.server)
        if not self.connections:
            _normalize_failed(self.client, self.server)
        else:
            keep = next((c for c in self.connections if c.client_side == self.preferred_client),
                        self.connections[0])
            for c in self.connections:
                c.redundant = c is not keep
            # roles follow the connection that is kept
            for d in (self.client, self.server):
                if d.result is DialOutcome.ESTABLISHED:
                    d.role = Role.CLIENT if d.dialer == keep.client_side else Role.SERVER
        return self.client.result, self.server.result

    @property
    def connection(self):
        return next((c for c in self.connections if not c.redundant), None)


def _normalize_failed(a, b):
    for d in (a, b):
        if d.result is DialOutcome.ESTABLISHED:
            d.result, d.role, d.established_at, d.peer = DialOutcome.TIMED_OUT, None, None, None


def quic_hole_punch(net: Network, initiator_prime: DialAttempt, listener_dial: DialAttempt, deadline,
                    both_hello=False, **kw):
    """Listener sends QUIC hellos; initiator primes with dummy datagrams."""
    session = QuicHolePunch(net, listener_dial, initiator_prime, deadline, both_hello=both_hello, **kw).start()
    net.engine.run(until=deadline, stop=lambda: session.done)
    session.finish()
    return session


class PassiveListener:
    """Listening sockets on a host endpoint: accepts TCP SYNs and QUIC hellos."""

    def __init__(self, net: Network, host_id, local: Endpoint):
        self.net = net
        self.host_id = host_id
        self.local = local
        self.accepted: list[Endpoint] = []
        net.bind(host_id, local, self.on_packet)

    def on_packet(self, pkt):
        if pkt.kind is PacketKind.SYN:
            self.net.reply(pkt, PacketKind.SYNACK, self.host_id)
        elif pkt.kind is PacketKind.QUIC_HELLO:
            self.net.reply(pkt, PacketKind.QUIC_HANDSHAKE, self.host_id, payload_size=1200)
        elif pkt.kind is PacketKind.ACK and pkt.src not in self.accepted:
            self.accepted.append(pkt.src)
        elif pkt.kind is PacketKind.PING:
            self.net.reply(pkt, PacketKind.PONG, self.host_id)

    def close(self):
        self.net.unbind(self.host_id, self.local, self.on_packet)


def direct_dial(net: Network, dial: DialAttempt, deadline):
    """Plain outbound dial to a listening peer; returns the settled attempt."""
    if dial.transport is Transport.TCP:
        sock = TcpSocket(net, dial, deadline)
    else:
        sock = QuicSocket(net, dial, deadline, client=True, server=False)
    sock.arm()
    net.engine.run(until=deadline, stop=lambda: dial.result is not None)
    sock.expire()
    sock.close()
    return dial


class BirthdayPunch:
    """Port-collision punch against an endpoint-dependent NAT.

    The opener sends one datagram from each of *m_open* fresh internal ports
    towards the prober's advertised endpoint; the prober sends datagrams to
    *k_probe* distinct ports of the opener's public address, sampled without
    replacement, one every *probe_interval*.
    """

    def __init__(self, net: Network, opener: DialAttempt, prober: DialAttempt, m_open, k_probe,
                 deadline, rng, port_space=65536, probe_interval=PROBE_INTERVAL, open_ttl=64,
                 first_open_port=10000):
        if m_open > 65535:
            raise ValueError("cannot open more than 65535 internal ports")
        self.net = net
        self.opener, self.prober = opener, prober
        self.deadline = deadline
        self.m_open, self.k_probe = m_open, k_probe
        self.port_space = port_space
        self.probe_interval = probe_interval
        self.open_ttl = open_ttl
        self.rng = rng
        self.connection: ConnectionRecord | None = None
        self._timers = []
        self._probe_timer = None
        self._probed: set[int] = set()
        self._opened: list[Endpoint] = []
        base = opener.local
        port = first_open_port
        opened = self._opened
        while len(opened) < m_open:
            port = port % 65536 or 1
            if port != base.port:
                opened.append(tuple.__new__(Endpoint, (base.address, port, base.transport)))
            port += 1
        self._opener_handler = self._on_opener_packet
        self._prober_handler = self._on_prober_packet

    @property
    def dials(self):
        return (self.opener, self.prober)

    @property
    def done(self):
        return self.opener.result is not None and self.prober.result is not None

    def start(self):
        eng = self.net.engine
        handlers, host, h = self.net.handlers, self.opener.dialer, self._opener_handler
        for ep in self._opened:
            handlers[(host, ep)] = h
        self.net.bind(self.prober.dialer, self.prober.local, self._prober_handler)
        self._timers.append(eng.schedule(max(self.opener.start_time, eng.now), self._open))
        self._timers.append(eng.schedule(max(self.prober.start_time, eng.now), self._probe, 0))
        self._timers.append(eng.schedule(max(self.deadline, eng.now), self._expire))
        return self

    def _egress_hook(self, dial):
        def hook(pkt, t):
            if dial.first_egress is None:
                dial.first_egress = t
        return hook

    def _open(self):
        if self.opener.result is not None:
            return
        target, ttl = self.opener.target, self.open_ttl
        burst = [Packet(ep, target, PacketKind.UDP_DATAGRAM, ttl) for ep in self._opened]
        self.net.send_burst(burst, self.opener.dialer, on_egress=self._egress_hook(self.opener))

    def _probe(self, i):
        p = self.prober
        if p.result is not None or i >= self.k_probe:
            return
        # distinct ports drawn lazily: most trials stop long before k probes
        rand, space, probed = self.rng.random, self.port_space, self._probed
        port = int(rand() * space)
        while port in probed:
            port = int(rand() * space)
        probed.add(port)
        net = self.net
        dst = tuple.__new__(Endpoint, (p.target[0], port, p.local[2]))
        net.send(Packet(p.local, dst, _DATAGRAM), p.dialer, None, self._egress_hook(p) if i == 0 else None)
        if i + 1 < self.k_probe:
            t = net.engine.now + self.probe_interval
            if t < self.deadline:
                self._probe_timer = net.engine.schedule(t, self._probe, i + 1)

    def _on_opener_packet(self, pkt):
        if pkt.src.address != self.opener.target.address:
            return
        if self.opener.result is None:
            self.opener.settle(DialOutcome.ESTABLISHED, self.net.now, role=Role.SERVER, peer=pkt.src)
            self.net.reply(pkt, PacketKind.UDP_DATAGRAM, self.opener.dialer)
            self._maybe_connected(pkt.dst, pkt.src)

    def _on_prober_packet(self, pkt):
        if pkt.src.address != self.prober.target.address:
            return
        if self.prober.result is None:
            self.prober.settle(DialOutcome.ESTABLISHED, self.net.now, role=Role.CLIENT, peer=pkt.src)
            self.net.reply(pkt, PacketKind.UDP_DATAGRAM, self.prober.dialer)
            self._maybe_connected(None, pkt.src)

    def _maybe_connected(self, opener_local, remote):
        if self.done and self.opener.result is DialOutcome.ESTABLISHED \
                and self.prober.result is DialOutcome.ESTABLISHED:
            self.connection = ConnectionRecord(
                (self.opener.dialer, self.prober.dialer), Transport.UDP, self.net.now,
                self.prober.dialer, local=self.prober.local, remote=self.prober.peer)

    def _expire(self):
        for d in (self.opener, self.prober):
            if d.result is None:
                d.settle(d._failure(), self.net.now)

    def finish(self):
        self._expire()
        for t in self._timers:
            self.net.engine.cancel(t)
        self.net.engine.cancel(self._probe_timer)
        handlers, host = self.net.handlers, self.opener.dialer
        for ep in self._opened:
            if handlers.get((host, ep)) is self._opener_handler:
                del handlers[(host, ep)]
        self.net.unbind(self.prober.dialer, self.prober.local, self._prober_handler)
        self._opener_handler = self._prober_handler = None
        _normalize(self.opener, self.prober)
        if self.opener.result is not DialOutcome.ESTABLISHED:
            self.connection = None
        return self.opener.result, self.prober.result
