"""Closed-form calculators used as ground truth for the simulator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

PORT_SPACE = 65536


class InvalidParams(ValueError):
    pass


@dataclass(frozen=True)
class BirthdayParams:
    m_open: int
    k_probe: int
    port_space: int = PORT_SPACE
    both_edm: bool = False

    def __post_init__(self):
        n = self.port_space
        if n < 1:
            raise InvalidParams("port space must be positive")
        if not 0 <= self.m_open <= n or not 0 <= self.k_probe <= n:
            raise InvalidParams(f"m_open and k_probe must lie in [0, {n}]")


def _log_comb(n, r):
    return math.lgamma(n + 1) - math.lgamma(r + 1) - math.lgamma(n - r + 1)


def _hypergeometric_miss(m, k, n):
    """P(no probe hits an open port), k probes drawn without replacement."""
    if k > n - m:
        return 0.0
    if m == 0 or k == 0:
        return 1.0
    # product form is exact and cheap for the sizes used here; lgamma otherwise
    if k <= 4096:
        log_p = 0.0
        for i in range(k):
            log_p += math.log1p(-m / (n - i))
        return math.exp(log_p)
    return math.exp(_log_comb(n - m, k) - _log_comb(n, k))


def birthday_success_prob(params: BirthdayParams, method="hypergeometric") -> float:
    """Probability that at least one probe lands on an opened port.

    ``method`` picks the single-EDM model: ``"hypergeometric"`` (exact, probes
    without replacement) or ``"independent"`` (each probe hits with
    probability m/N).  With ``both_edm`` the ``"product"`` form m*k/N^2 is the
    default; ``"pairs"`` treats each of the m*k packet pairs as an
    independent 1/N^2 chance.
    """
    m, k, n = params.m_open, params.k_probe, params.port_space
    if params.both_edm:
        if method in ("hypergeometric", "product"):
            return min(1.0, m * k / n ** 2)
        if method == "pairs":
            return -math.expm1(m * k * math.log1p(-1 / n ** 2))
        raise InvalidParams(f"unknown both-EDM method {method!r}")
    if m == 0 or k == 0:
        return 0.0
    if method == "hypergeometric":
        return 1.0 - _hypergeometric_miss(m, k, n)
    if method == "independent":
        if m == n:
            return 1.0
        return -math.expm1(k * math.log1p(-m / n))
    raise InvalidParams(f"unknown method {method!r}")


@dataclass(frozen=True)
class PopulationMix:
    p_edm: float
    eim_eim: float = field(init=False)
    mixed: float = field(init=False)
    edm_edm: float = field(init=False)

    def __post_init__(self):
        p = self.p_edm
        if not 0.0 <= p <= 1.0:
            raise InvalidParams("p_edm must lie in [0, 1]")
        object.__setattr__(self, "eim_eim", (1 - p) ** 2)
        object.__setattr__(self, "mixed", 2 * p * (1 - p))
        object.__setattr__(self, "edm_edm", p * p)


def population_mix(p_edm) -> PopulationMix:
    return PopulationMix(p_edm)


def expected_improvement(mix: PopulationMix, per_class_gain) -> float:
    """Aggregate success gain when only mixed EIM/EDM pairs are rescued."""
    if not 0.0 <= per_class_gain <= 1.0:
        raise InvalidParams("gain must lie in [0, 1]")
    return mix.mixed * per_class_gain


@dataclass(frozen=True)
class SyncGeometry:
    timing_error: int
    one_way_nat_to_nat: int

    def __post_init__(self):
        if self.one_way_nat_to_nat < 0:
            raise InvalidParams("one-way delay must be non-negative")


def sync_safe(g: SyncGeometry) -> bool:
    """Both first packets leave their NATs before the other side's arrives.

    Equality counts as unsafe.
    """
    return abs(g.timing_error) < g.one_way_nat_to_nat
