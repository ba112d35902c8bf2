"""Deterministic discrete-event network engine.

Time is integer microseconds.  Packets cross, in order: the sender's local
segment, the sender's NAT (outbound translation), the core link, the
receiver's NAT (inbound filtering) and the receiver's local segment.  Every
sent packet ends up in the trace exactly once as delivered or dropped.
"""
from __future__ import annotations

import enum
import hashlib
import heapq
import json
import math
import random
from dataclasses import dataclass, field

from .nat import (
    CapacityExceeded,
    Deliver,
    DropReason,
    Endpoint,
    NatDevice,
    PortExhausted,
    Transport,
)

MS = 1_000
SECOND = 1_000_000

# Core arrivals at a NAT sort ahead of other events at the same instant, so a
# packet that departs at exactly the arrival time counts as late.
PRIO_ARRIVAL = -1


def ms(value) -> int:
    return int(round(value * MS))


def derive_seed(master, *labels) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "big")


def derive_rng(master, *labels) -> random.Random:
    """Independent stream keyed by (master seed, labels...)."""
    return random.Random(derive_seed(master, *labels))


class Direction(str, enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


class Distribution(str, enum.Enum):
    CONSTANT = "constant"
    NORMAL = "normal"
    LOGNORMAL = "lognormal"


@dataclass(frozen=True)
class DelayModel:
    mean: int
    jitter_std: int = 0
    distribution: Distribution = Distribution.NORMAL

    def __post_init__(self):
        if self.mean < 0 or self.jitter_std < 0:
            raise ValueError("delay mean and jitter must be non-negative")


@dataclass(frozen=True)
class LinkModel:
    forward: DelayModel
    backward: DelayModel
    loss_prob: float = 0.0
    hops_forward: int = 10
    hops_backward: int = 10

    def __post_init__(self):
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must lie in [0, 1]")
        if self.hops_forward < 1 or self.hops_backward < 1:
            raise ValueError("hop counts must be >= 1")

    @classmethod
    def symmetric(cls, mean, jitter_std=0, distribution=Distribution.NORMAL,
                  loss_prob=0.0, hops=10):
        d = DelayModel(mean, jitter_std, distribution)
        return cls(d, d, loss_prob, hops, hops)

    def delay(self, direction):
        return self.forward if direction is Direction.FORWARD else self.backward

    def hops(self, direction):
        return self.hops_forward if direction is Direction.FORWARD else self.hops_backward


def sample_delay(link: LinkModel, direction: Direction, rng: random.Random) -> int:
    return _sample(link.forward if direction is Direction.FORWARD else link.backward, rng)


def _sample(d: DelayModel, rng) -> int:
    if d.jitter_std == 0 or d.distribution is Distribution.CONSTANT:
        return d.mean
    if d.distribution is Distribution.NORMAL:
        while True:
            x = rng.normalvariate(d.mean, d.jitter_std)
            if x >= 0:
                return int(round(x))
    if d.mean == 0:
        return 0
    sigma2 = math.log1p((d.jitter_std / d.mean) ** 2)
    mu = math.log(d.mean) - sigma2 / 2
    return int(round(rng.lognormvariate(mu, math.sqrt(sigma2))))


class PacketKind(str, enum.Enum):
    SYN = "SYN"
    SYNACK = "SYNACK"
    ACK = "ACK"
    RST = "RST"
    UDP_DATAGRAM = "UDP_DATAGRAM"
    QUIC_HELLO = "QUIC_HELLO"
    QUIC_HANDSHAKE = "QUIC_HANDSHAKE"
    SIGNAL = "SIGNAL"
    PING = "PING"
    PONG = "PONG"


@dataclass(slots=True)
class Packet:
    src: Endpoint
    dst: Endpoint
    kind: PacketKind
    ttl: int = 64
    payload_size: int = 0
    trace_id: int = 0
    payload: object = None

    @property
    def transport(self):
        return self.src.transport


class UnroutableDestination(Exception):
    pass


class Engine:
    """Event queue ordered by (time, priority, insertion order)."""

    def __init__(self):
        self.now = 0
        self._queue = []
        self._seq = 0
        self.processed = 0

    def __len__(self):
        return sum(1 for e in self._queue if e[3] is not None)

    def schedule(self, at, callback, *args, priority=0):
        if at < self.now:
            raise ValueError(f"cannot schedule in the past ({at} < {self.now})")
        entry = [at, priority, self._seq, callback, args]
        self._seq += 1
        heapq.heappush(self._queue, entry)
        return entry

    def call_later(self, delay, callback, *args, priority=0):
        return self.schedule(self.now + delay, callback, *args, priority=priority)

    @staticmethod
    def cancel(entry):
        if entry is not None:
            entry[3] = None

    def run_until(self, t) -> int:
        if t < self.now:
            raise ValueError("run_until target lies in the past")
        n = self._drain(t, None)
        self.now = t
        return n

    def run(self, until=None, stop=None) -> int:
        """Process events until the queue empties, *stop()* is true, or the
        next event lies beyond *until*.  The clock is left at the last event
        processed (or at *until* when that bound was hit)."""
        n = self._drain(until, stop)
        if until is not None and (not self._queue or self._queue[0][0] > until):
            if stop is None or not stop():
                self.now = max(self.now, until)
        return n

    def _drain(self, until, stop):
        q = self._queue
        n = 0
        pop = heapq.heappop
        while q:
            if stop is not None and stop():
                break
            if until is not None and q[0][0] > until:
                break
            at, _, _, cb, args = pop(q)
            if cb is None:
                continue
            self.now = at
            cb(*args)
            n += 1
        self.processed += n
        return n


@dataclass
class Host:
    host_id: str
    address: str
    nat: NatDevice | None = None
    local_segment: LinkModel | None = None  # forward = host -> NAT

    def __post_init__(self):
        if (self.nat is None) != (self.local_segment is None):
            raise ValueError(f"{self.host_id}: a NAT needs a local segment and vice versa")

    @property
    def site(self):
        return self.host_id

    @property
    def public_address(self):
        return self.nat.external_address if self.nat is not None else self.address

    @property
    def is_public(self):
        return self.nat is None


def local_segment(mean=ms(1), jitter_std=0, distribution=Distribution.NORMAL, hops=2, loss_prob=0.0):
    return LinkModel.symmetric(mean, jitter_std, distribution, loss_prob, hops)


class Topology:
    def __init__(self):
        self.hosts: dict[str, Host] = {}
        self.links: dict[tuple, LinkModel] = {}
        self._by_public: dict[str, Host] = {}
        self._routes: dict[tuple, tuple] = {}

    def add_host(self, host: Host):
        if host.host_id in self.hosts:
            raise ValueError(f"duplicate host {host.host_id}")
        if host.public_address in self._by_public:
            raise ValueError(f"public address {host.public_address} already attached")
        self.hosts[host.host_id] = host
        self._by_public[host.public_address] = host
        self._routes.clear()
        return host

    def connect(self, a, b, link: LinkModel):
        """Core link between the sites of hosts *a* and *b*; forward is a -> b."""
        self.links[(a, b)] = link
        self._routes.clear()

    def route(self, a, b):
        """Cached (delay model, hop count) for the core leg from *a* to *b*."""
        r = self._routes.get((a, b))
        if r is None:
            link, direction = self.core_link(a, b)
            r = self._routes[(a, b)] = (link.delay(direction), link.hops(direction), link)
        return r

    def core_link(self, a, b):
        link = self.links.get((a, b))
        if link is not None:
            return link, Direction.FORWARD
        link = self.links.get((b, a))
        if link is not None:
            return link, Direction.BACKWARD
        raise UnroutableDestination(f"no core link between {a} and {b}")

    def resolve(self, address) -> Host:
        host = self._by_public.get(address)
        if host is None:
            raise UnroutableDestination(f"no host owns public address {address}")
        return host


class Network:
    """Routes packets over a :class:`Topology` on an :class:`Engine`."""

    def __init__(self, topology: Topology, engine: Engine | None = None,
                 rng: random.Random | None = None, record_trace=True):
        self.topology = topology
        self.engine = engine or Engine()
        self.rng = rng or random.Random(0)
        self.record_trace = record_trace
        self.trace: list[tuple] = []
        self.handlers: dict[tuple, object] = {}
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self._next_id = 1
        self._drop_hooks: dict[int, object] = {}
        self._egress_hooks: dict[int, object] = {}
        self._observers = []

    @property
    def now(self):
        return self.engine.now

    def bind(self, host_id, endpoint: Endpoint, handler):
        self.handlers[(host_id, endpoint)] = handler

    def unbind(self, host_id, endpoint: Endpoint, handler=None):
        key = (host_id, endpoint)
        if handler is None or self.handlers.get(key) is handler:
            self.handlers.pop(key, None)

    def close(self):
        """Drop pending events and callbacks so the object graph is freed by refcounting."""
        self.engine._queue.clear()
        self.handlers.clear()
        self._drop_hooks.clear()
        self._egress_hooks.clear()
        self._observers.clear()

    def observe(self, callback):
        """Register *callback(event, host_id, packet)* for nat-ingress events."""
        self._observers.append(callback)

    def _log(self, *record):
        if self.record_trace:
            self.trace.append((self.engine.now,) + record)

    def trace_lines(self):
        return [json.dumps(r, default=_json_default, separators=(",", ":")) for r in self.trace]

    def trace_digest(self):
        h = hashlib.sha256()
        for line in self.trace_lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    def send(self, packet: Packet, from_host, on_drop=None, on_egress=None) -> int:
        """Inject *packet* at *from_host* now; returns its trace id.

        *on_drop(packet, reason)* fires if the packet is dropped anywhere and
        *on_egress(packet, t)* when it leaves the sender's NAT.
        """
        topo = self.topology
        host = topo.hosts[from_host]
        dst_host = topo._by_public.get(packet.dst.address) or topo.resolve(packet.dst.address)
        if dst_host is host:
            raise UnroutableDestination("hairpinning is not modelled")
        pid = self._next_id
        self._next_id += 1
        packet.trace_id = pid
        self.sent += 1
        if on_drop is not None:
            self._drop_hooks[pid] = on_drop
        if on_egress is not None:
            self._egress_hooks[pid] = on_egress
        if self.record_trace:
            self._log("send", pid, from_host, packet.kind.value, str(packet.src), str(packet.dst), packet.ttl)
        if host.nat is None:
            self._egress(packet, host, dst_host)
        else:
            dm = host.local_segment.forward
            delay = dm.mean if dm.jitter_std == 0 else _sample(dm, self.rng)
            eng = self.engine
            eng._seq += 1
            heapq.heappush(eng._queue, [eng.now + delay, 0, eng._seq, self._at_local_nat,
                                        (packet, host, dst_host)])
        return pid

    def send_burst(self, packets, from_host, on_egress=None):
        """Send *packets* back to back from *from_host* at the current instant.

        Packets that share a delay travel in one event, which preserves the
        ordering that per-packet events would have produced.  *on_egress*
        fires once per such group, for its first packet to leave the NAT.
        """
        topo = self.topology
        host = topo.hosts[from_host]
        if not packets:
            return
        if host.nat is None:
            for p in packets:
                self.send(p, from_host, on_egress=on_egress)
            return
        groups = {}
        order = []
        dm = host.local_segment.forward
        resolved = {}
        for packet in packets:
            addr = packet.dst[0]
            dst_host = resolved.get(addr)
            if dst_host is None:
                dst_host = resolved[addr] = topo.resolve(addr)
            if dst_host is host:
                raise UnroutableDestination("hairpinning is not modelled")
            pid = self._next_id
            self._next_id += 1
            packet.trace_id = pid
            self.sent += 1
            if self.record_trace:
                self._log("send", pid, from_host, packet.kind.value, str(packet.src), str(packet.dst), packet.ttl)
            delay = dm.mean if dm.jitter_std == 0 else _sample(dm, self.rng)
            g = groups.get(delay)
            if g is None:
                g = groups[delay] = []
                order.append(delay)
            g.append((packet, dst_host))
        for delay in order:
            self.engine.call_later(delay, self._burst_at_local_nat, groups[delay], host, on_egress)

    def _burst_at_local_nat(self, group, host, on_egress=None):
        arrivals = {}
        order = []
        route, through = self.topology.route, self._through_local_nat
        last = None
        for packet, dst_host in group:
            if not through(packet, host):
                continue
            if on_egress is not None:
                on_egress(packet, self.engine.now)
                on_egress = None
            if dst_host is not last:
                last = dst_host
                dm, hops, link = route(host.host_id, dst_host.host_id)
                slow = link.loss_prob > 0 or dst_host.nat is None
            delay = dm.mean if dm.jitter_std == 0 else _sample(dm, self.rng)
            if slow or packet.ttl - hops <= 0:
                # uncommon paths keep their own events
                self._core_with_delay(packet, host, dst_host, delay, dm, hops, link)
                continue
            packet.ttl -= hops
            batch = arrivals.get(delay)
            if batch is None:
                batch = arrivals[delay] = []
                order.append(delay)
            batch.append((packet, dst_host))
        for delay in order:
            self.engine.call_later(delay, self._burst_at_remote_nat, arrivals[delay], priority=PRIO_ARRIVAL)

    def _burst_at_remote_nat(self, batch):
        for packet, host in batch:
            self._at_remote_nat(packet, host)

    def send_from_nat(self, packet: Packet, nat_host_id):
        """Emit a packet originated by the NAT of *nat_host_id* (e.g. an RST)."""
        host = self.topology.hosts[nat_host_id]
        dst_host = self.topology.resolve(packet.dst.address)
        pid = self._next_id
        self._next_id += 1
        packet.trace_id = pid
        self.sent += 1
        if self.record_trace:
            self._log("send", pid, f"nat:{nat_host_id}", packet.kind.value, str(packet.src), str(packet.dst),
                      packet.ttl)
        self._core(packet, host, dst_host)

    def _drop(self, packet, reason: DropReason, where):
        self.dropped += 1
        pid = packet.trace_id
        if self.record_trace:
            self._log("drop", pid, where, reason.value)
        if self._egress_hooks:
            self._egress_hooks.pop(pid, None)
        if self._drop_hooks:
            hook = self._drop_hooks.pop(pid, None)
            if hook is not None:
                hook(packet, reason)

    def _lost(self, link):
        return link.loss_prob > 0 and self.rng.random() < link.loss_prob

    def _at_local_nat(self, packet, host, dst_host):
        if not self._through_local_nat(packet, host):
            return
        dm, hops, link = self.topology.route(host.host_id, dst_host.host_id)
        delay = dm.mean if dm.jitter_std == 0 else _sample(dm, self.rng)
        remaining = packet.ttl - hops
        if remaining <= 0 or link.loss_prob > 0 or dst_host.nat is None:
            return self._core_with_delay(packet, host, dst_host, delay, dm, hops, link)
        packet.ttl = remaining
        eng = self.engine
        eng._seq += 1
        heapq.heappush(eng._queue, [eng.now + delay, PRIO_ARRIVAL, eng._seq, self._at_remote_nat,
                                    (packet, dst_host)])

    def _through_local_nat(self, packet, host) -> bool:
        """Local segment loss/TTL, then outbound translation and the egress hook."""
        seg = host.local_segment
        if seg.loss_prob > 0 and self.rng.random() < seg.loss_prob:
            self._drop(packet, DropReason.LINK_LOSS, host.host_id)
            return False
        packet.ttl -= seg.hops_forward
        if packet.ttl <= 0:
            self._drop(packet, DropReason.TTL_EXPIRED, host.host_id)
            return False
        try:
            packet.src = host.nat.translate_outbound(packet.src, packet.dst, self.engine.now)
        except CapacityExceeded:
            self._drop(packet, DropReason.CAPACITY_EXCEEDED, f"nat:{host.host_id}")
            return False
        except PortExhausted:
            self._drop(packet, DropReason.PORT_EXHAUSTED, f"nat:{host.host_id}")
            return False
        if self._egress_hooks:
            hook = self._egress_hooks.pop(packet.trace_id, None)
            if hook is not None:
                hook(packet, self.engine.now)
        return True

    def _egress(self, packet, host, dst_host):
        if self._egress_hooks:
            hook = self._egress_hooks.pop(packet.trace_id, None)
            if hook is not None:
                hook(packet, self.engine.now)
        self._core(packet, host, dst_host)

    def _core(self, packet, host, dst_host):
        dm, hops, link = self.topology.route(host.host_id, dst_host.host_id)
        delay = dm.mean if dm.jitter_std == 0 else _sample(dm, self.rng)
        self._core_with_delay(packet, host, dst_host, delay, dm, hops, link)

    def _core_with_delay(self, packet, host, dst_host, delay, dm, hops, link):
        remaining = packet.ttl - hops
        final = dst_host.nat is None
        eng = self.engine
        if remaining < 0 or (remaining == 0 and not final):
            # dies at hop `packet.ttl` inside the core
            frac_delay = delay * packet.ttl // hops
            eng.call_later(frac_delay, self._expire_in_core, packet, host.host_id)
            return
        if link.loss_prob > 0 and self.rng.random() < link.loss_prob:
            eng.call_later(delay, self._drop, packet, DropReason.LINK_LOSS, "core")
            return
        packet.ttl = remaining
        eng._seq += 1
        if final:
            heapq.heappush(eng._queue, [eng.now + delay, 0, eng._seq, self._deliver, (packet, dst_host)])
        else:
            heapq.heappush(eng._queue, [eng.now + delay, PRIO_ARRIVAL, eng._seq, self._at_remote_nat,
                                        (packet, dst_host)])

    def _expire_in_core(self, packet, where):
        self._drop(packet, DropReason.TTL_EXPIRED, f"core:{where}")

    def _at_remote_nat(self, packet, host):
        nat = host.nat
        verdict = nat.filter_inbound(packet.src, packet.dst, self.engine.now,
                                     syn=packet.kind is PacketKind.SYN)
        if self._observers:
            for obs in self._observers:
                obs("nat_ingress", host.host_id, packet)
        if verdict.__class__ is not Deliver:
            self._drop(packet, verdict.reason, f"nat:{host.host_id}")
            if (packet.kind is PacketKind.SYN and nat.tcp_unsolicited_rst
                    and verdict.reason is not DropReason.DENYLISTED):
                rst = Packet(packet.dst, packet.src, PacketKind.RST)
                self.send_from_nat(rst, host.host_id)
            return
        packet.dst = verdict.internal
        seg = host.local_segment
        if self._lost(seg):
            return self._drop(packet, DropReason.LINK_LOSS, host.host_id)
        remaining = packet.ttl - seg.hops_backward
        if remaining < 0:
            return self._drop(packet, DropReason.TTL_EXPIRED, host.host_id)
        packet.ttl = remaining
        self.engine.call_later(_sample(seg.backward, self.rng), self._deliver, packet, host)

    def _deliver(self, packet, host):
        self.delivered += 1
        if self.record_trace:
            self._log("deliver", packet.trace_id, host.host_id, packet.ttl)
        if self._drop_hooks:
            self._drop_hooks.pop(packet.trace_id, None)
        if self._egress_hooks:
            self._egress_hooks.pop(packet.trace_id, None)
        handler = self.handlers.get((host.host_id, packet.dst))
        if handler is not None:
            handler(packet)
        elif packet.kind is PacketKind.SYN:
            # closed port: the host's stack answers with RST
            self.send(Packet(packet.dst, packet.src, PacketKind.RST), host.host_id)

    def reply(self, packet: Packet, kind: PacketKind, host_id, **kw):
        """Send *kind* back along the reverse of a delivered *packet*."""
        return self.send(Packet(packet.dst, packet.src, kind, **kw), host_id)


def _json_default(o):
    if isinstance(o, enum.Enum):
        return o.value
    return str(o)


__all__ = [
    "MS", "SECOND", "ms", "derive_rng", "derive_seed", "Direction", "Distribution",
    "DelayModel", "LinkModel", "sample_delay", "PacketKind", "Packet", "Engine",
    "Host", "Topology", "Network", "UnroutableDestination", "local_segment",
    "Transport", "Endpoint",
]
