"""Deterministic simulator for relay-coordinated NAT hole punching."""
from .nat import Endpoint, FilteringBehavior, MappingBehavior, NatDevice, Transport
from .netsim import Engine, Host, LinkModel, Network, Topology
from .dcutr import PunchOptions, ResultOutcome, AttemptOutcome, run_hole_punch
from .oracle import BirthdayParams, birthday_success_prob, population_mix, expected_improvement, sync_safe

__version__ = "0.1.0"
