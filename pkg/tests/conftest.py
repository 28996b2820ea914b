import random
from dataclasses import dataclass, field

import pytest

from uavidbc.consensus import Idbc
from uavidbc.crypto import ECC, NULL, ClusterKey, sha256
from uavidbc.ledger import ZERO_HASH, Chain, make_block
from uavidbc.protocol import (
    ClusterHeadList,
    ClusterState,
    ProtocolEnv,
    UavNode,
    genesis_transactions,
    new_cluster,
)
from uavidbc.sim.energy import EnergyMeter


class Clock:
    def __init__(self):
        self.t = 0

    def __call__(self):
        self.t += 1
        return self.t


@dataclass
class World:
    suite: object
    bs: object
    clusters: list[ClusterState]
    idbc: Idbc
    env: ProtocolEnv
    meter: EnergyMeter
    registry: ClusterHeadList
    genesis: Chain
    positions: dict = field(default_factory=dict)

    def member(self, cluster: int, index: int) -> UavNode:
        c = self.clusters[cluster]
        return c.node(c.lml.keys()[index])


def build_world(sizes=(6, 3, 3), suite=ECC, seed=0) -> World:
    bs = suite.generate_keypair(f"{seed}/bs")
    clusters, keyring = [], {}
    for c, size in enumerate(sizes):
        nodes = [UavNode(suite.generate_keypair(f"{seed}/{c}/{i}"), sha256(f"fp/{seed}/{c}/{i}".encode()), c, i)
                 for i in range(size)]
        for n in nodes:
            keyring[n.pk] = n.keypair
        clusters.append(new_cluster(c, nodes, nodes[0].pk, ClusterKey(bytes([c + 1]) * 16, 0)))
    genesis = Chain(suite)
    genesis.append(make_block(0, ZERO_HASH, bs.public_key, 0, genesis_transactions(suite, bs, clusters)))
    clock = Clock()
    idbc = Idbc(genesis.copy(), keyring, random.Random(f"{seed}/raft"), clock=clock)
    meter = EnergyMeter()
    env = ProtocolEnv(suite, random.Random(f"{seed}/env"), clock=lambda: clock.t, meter=meter)
    registry = ClusterHeadList()
    for c in clusters:
        registry.set(c.index, c.head)
    return World(suite, bs, clusters, idbc, env, meter, registry, genesis)


@pytest.fixture
def world():
    return build_world()


@pytest.fixture
def fast_world():
    return build_world(suite=NULL)
