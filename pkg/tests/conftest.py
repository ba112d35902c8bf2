import random
import sys

import pytest

from punchsim.dcutr import attach_peer
from punchsim.nat import NatDevice
from punchsim.netsim import Host, LinkModel, Network, Topology, local_segment, ms


def build_pair(i_nat=("EIM", "APDF"), l_nat=("EIM", "APDF"), core=ms(10), i_local=ms(1), l_local=ms(1),
               relay_legs=(ms(20), ms(20)), mapped=False, mapping_expires_at=None, seed=1,
               relay_reachable=True, **nat_kw):
    """Initiator "I" and listener "L" behind NATs, plus a public relay "R"."""
    topo = Topology()
    topo.add_host(Host("I", "10.0.0.2", NatDevice("198.51.100.1", *i_nat, rng=random.Random(seed + 1), **nat_kw),
                       local_segment(i_local)))
    topo.add_host(Host("L", "192.168.1.2", NatDevice("203.0.113.1", *l_nat, rng=random.Random(seed + 2), **nat_kw),
                       local_segment(l_local)))
    topo.add_host(Host("R", "192.0.2.1"))
    topo.connect("I", "L", LinkModel.symmetric(core))
    if relay_reachable:
        topo.connect("I", "R", LinkModel.symmetric(relay_legs[0]))
        topo.connect("L", "R", LinkModel.symmetric(relay_legs[1]))
    net = Network(topo, rng=random.Random(seed))
    relay = "R" if relay_reachable else None
    initiator = attach_peer(net, "I", "remote", relay)
    listener = attach_peer(net, "L", "client", relay, port_mapping=mapped, mapping_expires_at=mapping_expires_at)
    return net, initiator, listener


@pytest.fixture
def pair():
    return build_pair


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
