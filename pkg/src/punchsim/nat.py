"""Stateful NAPT model covering the RFC 4787 mapping/filtering taxonomy.

A :class:`NatDevice` owns a session table of :class:`Mapping` entries, an
external port allocator, optional static (UPnP-style) port mappings and a
denylist of external source addresses.  All times are integer microseconds
of simulated time.
"""
from __future__ import annotations

import enum
import random
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

SECOND = 1_000_000


class Transport(str, enum.Enum):
    TCP = "TCP"
    UDP = "UDP"


class _EndpointBase(NamedTuple):
    address: str
    port: int
    transport: Transport = Transport.UDP


class Endpoint(_EndpointBase):
    # a tuple keeps hashing and equality in C on the packet hot path
    __slots__ = ()

    def __new__(cls, address, port, transport=Transport.UDP):
        if not 0 <= port <= 65535:
            raise ValueError(f"port out of range: {port}")
        return super().__new__(cls, address, port, Transport(transport))

    def __repr__(self):
        return f"Endpoint({self.address!r}, {self.port}, {self.transport.value})"

    def __str__(self):
        return f"{self.address}:{self.port}/{self.transport.value.lower()}"


class MappingBehavior(str, enum.Enum):
    EIM = "EIM"
    ADM = "ADM"
    APDM = "APDM"

    @property
    def endpoint_dependent(self):
        return self is not MappingBehavior.EIM


class FilteringBehavior(str, enum.Enum):
    EIF = "EIF"
    ADF = "ADF"
    APDF = "APDF"


class DropReason(str, enum.Enum):
    NO_MAPPING = "NoMapping"
    FILTER_MISMATCH = "FilterMismatch"
    DENYLISTED = "Denylisted"
    TTL_EXPIRED = "TtlExpired"
    LINK_LOSS = "LinkLoss"
    CAPACITY_EXCEEDED = "CapacityExceeded"
    PORT_EXHAUSTED = "PortExhausted"


class NatError(Exception):
    pass


class CapacityExceeded(NatError):
    pass


class PortExhausted(NatError):
    pass


@dataclass(frozen=True)
class RandomUniform:
    """Uniform sampling without replacement over the free ports."""


@dataclass(frozen=True)
class Sequential:
    start: int = 1024


@dataclass(frozen=True)
class DenylistPolicy:
    enabled: bool = False
    unsolicited_udp_triggers: bool = True
    syn_flood_threshold: int = 16
    syn_flood_window: int = 10 * SECOND
    expiry: int = 300 * SECOND


DEFAULT_LIFETIMES = {
    "UDP": 120 * SECOND,
    "TCP": 24 * 3600 * SECOND,
    "TCP_SYN": 60 * SECOND,
}


@dataclass(slots=True)
class Mapping:
    internal: Endpoint
    external: Endpoint
    destination_key: object
    created_at: int
    last_activity: int
    contacted_addresses: set = field(default_factory=set)
    contacted_endpoints: set = field(default_factory=set)
    established: bool = False


@dataclass(slots=True)
class PortMapping:
    """Static inbound forwarding rule, as installed by UPnP/PCP."""

    internal: Endpoint
    external: Endpoint
    expires_at: int | None = None

    def live(self, now):
        return self.expires_at is None or now < self.expires_at


class Deliver(NamedTuple):
    internal: Endpoint


class Drop(NamedTuple):
    reason: DropReason


_DROPS = {r: Drop(r) for r in DropReason}
_UDP = Transport.UDP
_EIM, _ADM = MappingBehavior.EIM, MappingBehavior.ADM


class NatDevice:
    def __init__(
        self,
        external_address,
        mapping=MappingBehavior.EIM,
        filtering=FilteringBehavior.EIF,
        port_alloc=RandomUniform(),
        port_space=65536,
        session_capacity=65536,
        lifetimes=None,
        denylist_policy=None,
        rng=None,
        exclude_low_ports=False,
        tcp_unsolicited_rst=True,
    ):
        self.external_address = external_address
        self.mapping = MappingBehavior(mapping)
        self.filtering = FilteringBehavior(filtering)
        self.port_alloc = port_alloc
        self._random_alloc = isinstance(port_alloc, RandomUniform)
        self._apdf = self.filtering is FilteringBehavior.APDF
        self.port_space = port_space
        self.session_capacity = session_capacity
        self.lifetimes = dict(DEFAULT_LIFETIMES, **(lifetimes or {}))
        self._udp_life = self.lifetimes["UDP"]
        self.denylist_policy = denylist_policy or DenylistPolicy()
        self.rng = rng if rng is not None else random.Random(0)
        self.low_port = 1024 if exclude_low_ports else 0
        # whether a dropped inbound SYN is answered with RST instead of silence
        self.tcp_unsolicited_rst = tcp_unsolicited_rst
        if self.low_port >= port_space:
            raise ValueError("port space leaves no allocatable ports")

        self._by_key: dict[tuple, Mapping] = {}
        self._by_external: dict[tuple, Mapping] = {}
        self._static: dict[tuple, PortMapping] = {}
        self._static_by_internal: dict[Endpoint, PortMapping] = {}
        self._used: dict[Transport, set] = {Transport.TCP: set(), Transport.UDP: set()}
        self._cursor = port_alloc.start if isinstance(port_alloc, Sequential) else 0
        self.denylist: dict[str, int] = {}
        self._syn_log: dict[str, deque] = {}

    def __repr__(self):
        return (f"NatDevice({self.external_address!r}, {self.mapping.value}/"
                f"{self.filtering.value}, sessions={len(self._by_key)})")

    @property
    def archetype(self):
        return f"{self.mapping.value}/{self.filtering.value}"

    @property
    def sessions(self):
        return list(self._by_key.values())

    def _lifetime(self, m: Mapping):
        if m.internal.transport is Transport.UDP:
            return self.lifetimes["UDP"]
        return self.lifetimes["TCP"] if m.established else self.lifetimes["TCP_SYN"]

    def _live(self, m, now):
        return now - m.last_activity <= self._lifetime(m)

    def _dest_key(self, dst: Endpoint):
        if self.mapping is MappingBehavior.EIM:
            return None
        if self.mapping is MappingBehavior.ADM:
            return dst.address
        return (dst.address, dst.port)

    def _remove(self, m: Mapping):
        del self._by_key[(m.internal, m.destination_key)]
        del self._by_external[(m.external.transport, m.external.port)]
        self._used[m.external.transport].discard(m.external.port)

    def _allocate(self, transport):
        used = self._used[transport]
        span = self.port_space - self.low_port
        if len(used) >= span:
            raise PortExhausted(f"{self.external_address}: all {span} {transport.value} ports in use")
        if isinstance(self.port_alloc, Sequential):
            p = self._cursor
            for _ in range(self.port_space):
                if p < self.low_port or p >= self.port_space:
                    p = self.low_port
                if p not in used:
                    self._cursor = p + 1
                    return p
                p += 1
            raise PortExhausted(self.external_address)
        if len(used) * 2 < span:
            rand, low = self.rng.random, self.low_port
            while True:
                p = low + int(rand() * span)
                if p not in used:
                    return p
        free = [p for p in range(self.low_port, self.port_space) if p not in used]
        return self.rng.choice(free)

    def translate_outbound(self, src: Endpoint, dst: Endpoint, now: int) -> Endpoint:
        transport = src[2]
        if transport is not dst[2]:
            raise ValueError("source and destination transports differ")
        if self._static_by_internal:
            static = self._static_by_internal.get(src)
            if static is not None and static.live(now):
                return static.external
        mb = self.mapping
        key = (src, None if mb is _EIM else dst[0] if mb is _ADM else dst[:2])
        by_key = self._by_key
        m = by_key.get(key)
        if m is not None and now - m.last_activity > (
                self._udp_life if transport is _UDP else self._lifetime(m)):
            self._remove(m)
            m = None
        if m is None:
            if len(by_key) >= self.session_capacity:
                self.expire(now)
                if len(by_key) >= self.session_capacity:
                    raise CapacityExceeded(
                        f"{self.external_address}: session table full ({self.session_capacity})")
            used = self._used[transport]
            span = self.port_space - self.low_port
            if self._random_alloc and len(used) * 2 < span:
                rand, low = self.rng.random, self.low_port
                port = low + int(rand() * span)
                while port in used:
                    port = low + int(rand() * span)
            else:
                port = self._allocate(transport)
            ext = tuple.__new__(Endpoint, (self.external_address, port, transport))
            m = Mapping(src, ext, key[1], now, now, set(), set())
            by_key[key] = m
            self._by_external[(transport, port)] = m
            used.add(port)
        m.last_activity = now
        m.contacted_addresses.add(dst[0])
        if self._apdf:
            m.contacted_endpoints.add(dst[:2])
        return m.external

    def filter_inbound(self, src: Endpoint, dst_external: Endpoint, now: int, syn=False):
        """Decide whether an inbound packet reaches an internal endpoint.

        Returns :class:`Deliver` or :class:`Drop`; never raises for policy
        decisions.  Unsolicited UDP (when the policy says so) and SYN floods
        add the source address to the denylist as a side effect.
        """
        if dst_external.address != self.external_address:
            raise ValueError(f"{dst_external} is not owned by {self.external_address}")
        policy = self.denylist_policy
        expiry = self.denylist.get(src.address) if self.denylist else None
        if expiry is not None:
            if now < expiry:
                return _DROPS[DropReason.DENYLISTED]
            del self.denylist[src.address]
        if syn and policy.enabled and self._note_syn(src.address, now):
            return _DROPS[DropReason.DENYLISTED]

        transport = dst_external.transport
        static = self._static.get((transport, dst_external.port)) if self._static else None
        if static is not None:
            if static.live(now):
                return Deliver(static.internal)
            self._drop_static(static)

        m = self._by_external.get((transport, dst_external.port))
        if m is not None and now - m.last_activity > (
                self._udp_life if transport is _UDP else self._lifetime(m)):
            self._remove(m)
            m = None
        if m is None:
            reason = DropReason.NO_MAPPING
        elif self.filtering is FilteringBehavior.EIF:
            return Deliver(m.internal)
        elif self.filtering is FilteringBehavior.ADF:
            if src.address in m.contacted_addresses:
                return Deliver(m.internal)
            reason = DropReason.FILTER_MISMATCH
        elif (src.address, src.port) in m.contacted_endpoints:
            return Deliver(m.internal)
        else:
            reason = DropReason.FILTER_MISMATCH

        if policy.enabled and policy.unsolicited_udp_triggers and transport is Transport.UDP:
            self.denylist[src.address] = now + policy.expiry
        return _DROPS[reason]

    def _note_syn(self, address, now):
        policy = self.denylist_policy
        log = self._syn_log.setdefault(address, deque())
        log.append(now)
        while log and log[0] <= now - policy.syn_flood_window:
            log.popleft()
        if len(log) > policy.syn_flood_threshold:
            self.denylist[address] = now + policy.expiry
            log.clear()
            return True
        return False

    def is_denylisted(self, address, now):
        expiry = self.denylist.get(address)
        return expiry is not None and now < expiry

    def mark_established(self, external: Endpoint):
        m = self._by_external.get((external.transport, external.port))
        if m is not None:
            m.established = True

    def lookup(self, external: Endpoint, now=None):
        """Live dynamic mapping owning *external*, if any."""
        m = self._by_external.get((external.transport, external.port))
        if m is not None and now is not None and not self._live(m, now):
            return None
        return m

    def add_port_mapping(self, internal: Endpoint, external_port=None, expires_at=None):
        transport = internal.transport
        if external_port is None:
            external_port = internal.port
        if external_port in self._used[transport]:
            raise PortExhausted(f"external port {external_port} already in use")
        ext = Endpoint(self.external_address, external_port, transport)
        pm = PortMapping(internal, ext, expires_at)
        self._static[(transport, external_port)] = pm
        self._static_by_internal[internal] = pm
        self._used[transport].add(external_port)
        return pm

    def port_mappings(self, now=None):
        return [pm for pm in self._static.values() if now is None or pm.live(now)]

    def _drop_static(self, pm: PortMapping):
        del self._static[(pm.external.transport, pm.external.port)]
        self._static_by_internal.pop(pm.internal, None)
        self._used[pm.external.transport].discard(pm.external.port)

    def expire(self, now: int) -> int:
        stale = [m for m in self._by_key.values() if not self._live(m, now)]
        for m in stale:
            self._remove(m)
        for pm in [pm for pm in self._static.values() if not pm.live(now)]:
            self._drop_static(pm)
        for addr in [a for a, t in self.denylist.items() if t <= now]:
            del self.denylist[addr]
        return len(stale)
