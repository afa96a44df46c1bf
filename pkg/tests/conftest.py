import pytest

from ipstor.channel import CryptoCostModel, LinkParams, MemNetwork, SecurityMode
from ipstor.initiator import Initiator, InitiatorConfig
from ipstor.target import LunConfig, TargetConfig, TargetServer

TARGET = "iqn.2025-01.lab:disk0"


class Stack:
    """An in-memory target and initiator on one simulated link."""

    def __init__(self, mode=SecurityMode.PLAIN, link=None, costs=None, chap=None,
                 initiator_chap="same", luns=None, seed=0, max_data_segment=65536,
                 max_recv=65536, tamper=None):
        self.net = MemNetwork(mode, link or LinkParams(), costs, seed=seed, tamper=tamper)
        self.config = TargetConfig(TARGET, ("192.168.2.1", 3260),
                                   luns or [LunConfig(0, 2048)], chap, max_data_segment)
        self.server = TargetServer(self.config).start(self.net)
        if initiator_chap == "same":
            initiator_chap = chap
        self.initiator = Initiator(
            InitiatorConfig(portal=self.server.address, chap=initiator_chap,
                            max_recv_data_segment=max_recv), self.net)

    @property
    def trace(self):
        return self.net.trace

    def login(self):
        return self.initiator.login(TARGET)


@pytest.fixture
def stack():
    return Stack


@pytest.fixture
def zero_link():
    return LinkParams(0.001, None, 1500), CryptoCostModel()
