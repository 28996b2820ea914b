"""RAFT-style leader election and block commit among head UAVs, plus the
analytical PoW / PoS election-delay baselines.

Everything runs on simulated time. Message latency between heads is a
constant plus uniform jitter; election timeouts are uniform in a window.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .crypto import KeyPair, PublicKey
from .ledger import Block, BlockRejected, Chain, Transaction, UavStatus, make_block
from .sim.events import EventQueue

FOLLOWER = "follower"
CANDIDATE = "candidate"
LEADER = "leader"


class ConsensusError(Exception):
    pass


class NoQuorum(ConsensusError):
    pass


class LeaderDeposed(ConsensusError):
    def __init__(self, block: Block):
        super().__init__("leader failed before the block reached a majority")
        self.block = block


class CommitFailed(ConsensusError):
    pass


@dataclass(frozen=True)
class LatencyModel:
    base_ms: float = 10.0
    jitter_ms: float = 2.0

    def sample(self, rng: random.Random) -> float:
        if self.jitter_ms <= 0:
            return self.base_ms
        return self.base_ms + rng.uniform(-self.jitter_ms, self.jitter_ms)


@dataclass(frozen=True)
class ConsensusParams:
    election_timeout_ms: tuple[float, float] = (150.0, 300.0)
    heartbeat_ms: float = 50.0
    latency: LatencyModel = LatencyModel()
    rotation_period: int = 10
    pow_difficulty: float = float(2 ** 20)
    pow_hash_rate: float = 20.0  # hashes per simulated ms per node
    pos_slot_ms: float = 1000.0


@dataclass
class RaftNode:
    node_id: PublicKey
    chain: Chain | None = None
    role: str = FOLLOWER
    term: int = 0
    voted_for: PublicKey | None = None
    alive: bool = True
    election_timeout: float = 0.0
    heartbeat_interval: float = 50.0
    pending: Block | None = None

    @property
    def log(self) -> list[bytes]:
        return [b.hash for b in self.chain.blocks] if self.chain is not None else []

    def log_length(self) -> int:
        n = len(self.chain) if self.chain is not None else 0
        return n + (1 if self.pending is not None else 0)


def quorum(cluster_size: int) -> int:
    return cluster_size // 2 + 1


def raft_elect(nodes: Sequence[RaftNode], rng: random.Random, params: ConsensusParams = ConsensusParams(),
               cluster_size: int | None = None) -> tuple[RaftNode, float]:
    """Run one election from a quiet start; return (leader, delay_ms).

    Every live node arms a timeout; the first to fire campaigns, peers grant
    at most one vote per term to a candidate whose log is at least as long
    as theirs, and the first candidate with a majority of ``cluster_size``
    wins. Split votes simply re-arm timers.
    """
    size = len(nodes) if cluster_size is None else cluster_size
    need = quorum(size)
    live = [n for n in nodes if n.alive]
    if len(live) < need:
        raise NoQuorum(f"{len(live)} live of {size}, need {need}")

    lo, hi = params.election_timeout_ms
    q = EventQueue()
    timer_gen = {id(n): 0 for n in live}
    votes: dict[int, set[int]] = {}
    for n in live:
        n.role = FOLLOWER
        n.election_timeout = rng.uniform(lo, hi)
        q.push(n.election_timeout, ("timeout", n, 0))

    def rearm(n: RaftNode, now: float) -> None:
        timer_gen[id(n)] += 1
        n.election_timeout = rng.uniform(lo, hi)
        q.push(now + n.election_timeout, ("timeout", n, timer_gen[id(n)]))

    for _ in range(200_000):
        if not q:
            break
        now, ev = q.pop()
        kind = ev[0]
        if kind == "timeout":
            _, n, gen = ev
            if gen != timer_gen[id(n)]:
                continue
            n.term += 1
            n.role = CANDIDATE
            n.voted_for = n.node_id
            votes[id(n)] = {id(n)}
            if len(votes[id(n)]) >= need:
                return _crown(n, live), now
            for peer in live:
                if peer is not n:
                    q.push(now + params.latency.sample(rng), ("request", peer, n, n.term, n.log_length()))
            rearm(n, now)
        elif kind == "request":
            _, peer, cand, term, cand_log = ev
            if term > peer.term:
                peer.term, peer.role, peer.voted_for = term, FOLLOWER, None
            grant = (term == peer.term and peer.voted_for in (None, cand.node_id)
                     and cand_log >= peer.log_length())
            if grant:
                peer.voted_for = cand.node_id
                rearm(peer, now)
            q.push(now + params.latency.sample(rng), ("reply", cand, peer, term, grant))
        else:
            _, cand, voter, term, grant = ev
            if grant and cand.role == CANDIDATE and cand.term == term:
                votes[id(cand)].add(id(voter))
                if len(votes[id(cand)]) >= need:
                    return _crown(cand, live), now
    raise ConsensusError("election did not converge")


def _crown(leader: RaftNode, live: Sequence[RaftNode]) -> RaftNode:
    for n in live:
        if n.term < leader.term:
            n.term = leader.term
        n.role = FOLLOWER
    leader.role = LEADER
    return leader


def commit_block(leader: RaftNode, nodes: Sequence[RaftNode], block: Block, rng: random.Random,
                 params: ConsensusParams = ConsensusParams(), cluster_size: int | None = None,
                 crash_after: int | None = None, leader_validates: bool = True) -> tuple[int, float]:
    """Replicate ``block`` and commit it once a majority acknowledged.

    Returns (height, commit delay in ms). ``crash_after`` kills the leader
    after that many followers received the entry, which raises
    :class:`LeaderDeposed`. Followers validate independently and refuse
    invalid blocks.
    """
    if not leader.alive or leader.role != LEADER:
        raise ConsensusError("not the current leader")
    size = len(nodes) if cluster_size is None else cluster_size
    need = quorum(size)
    if leader_validates:
        leader.chain.check_block(block)
    leader.pending = block
    acked = [leader]
    ack_times = [0.0]
    sent = 0
    for peer in nodes:
        if peer is leader or not peer.alive:
            continue
        if crash_after is not None and sent >= crash_after:
            leader.alive = False
            leader.role = FOLLOWER
            raise LeaderDeposed(block)
        sent += 1
        out = params.latency.sample(rng)
        try:
            peer.chain.check_block(block)
        except BlockRejected:
            continue
        if peer.term < leader.term:
            peer.term = leader.term
        peer.pending = block
        acked.append(peer)
        ack_times.append(out + params.latency.sample(rng))
    if len(acked) < need:
        for n in acked:
            n.pending = None
        raise CommitFailed(f"{len(acked)} acks, need {need}")
    delay = sorted(ack_times)[need - 1]
    for n in acked:
        n.chain.append(block)
        n.pending = None
    return block.height, delay


def pow_elect(nodes: Sequence, difficulty: float, rng: random.Random,
              hash_rate: float = ConsensusParams.pow_hash_rate) -> tuple[int, float]:
    """Mining race: each node's solve time is exponential with mean
    ``difficulty / hash_rate``; the fastest wins. Returns (winner, delay_ms)."""
    if not nodes:
        raise ValueError("no miners")
    if difficulty <= 0:
        raise ValueError("difficulty must be positive")
    rate = hash_rate / difficulty
    times = [rng.expovariate(rate) for _ in nodes]
    winner = min(range(len(times)), key=times.__getitem__)
    return winner, times[winner]


def pos_elect(nodes: Sequence, stakes: Sequence[float], rng: random.Random,
              slot_ms: float = ConsensusParams.pos_slot_ms,
              latency: LatencyModel = LatencyModel()) -> tuple[int, float]:
    """Stake-weighted draw; delay is one slot plus a stake-announcement round."""
    if not nodes or len(stakes) != len(nodes):
        raise ValueError("need one positive stake per node")
    if any(s <= 0 for s in stakes):
        raise ValueError("stakes must be positive")
    pick = rng.random() * sum(stakes)
    acc = 0.0
    winner = len(stakes) - 1
    for i, s in enumerate(stakes):
        acc += s
        if pick < acc:
            winner = i
            break
    return winner, slot_ms + 2 * latency.base_ms


@dataclass
class ElectionStats:
    protocol: str
    cluster_count: int
    samples: list[float] = field(default_factory=list)

    @property
    def delay_ms(self) -> float:
        return sum(self.samples) / len(self.samples) if self.samples else 0.0

    def csv_rows(self) -> list[tuple]:
        return [(self.protocol, self.cluster_count, i, f"{d:.6f}") for i, d in enumerate(self.samples)]


ELECTION_CSV_HEADER = ("protocol", "cluster_count", "sample_idx", "delay_ms")


def election_sweep(protocol: str, cluster_count: int, samples: int, seed: int,
                   params: ConsensusParams = ConsensusParams()) -> ElectionStats:
    rng = random.Random(f"election/{protocol}/{cluster_count}/{seed}")
    stats = ElectionStats(protocol, cluster_count)
    for _ in range(samples):
        if protocol == "raft":
            nodes = [RaftNode(bytes([i % 256]) * 33) for i in range(cluster_count)]
            _, d = raft_elect(nodes, rng, params)
        elif protocol == "pow":
            _, d = pow_elect(range(cluster_count), params.pow_difficulty, rng, params.pow_hash_rate)
        elif protocol == "pos":
            stakes = [1.0 + rng.random() for _ in range(cluster_count)]
            _, d = pos_elect(range(cluster_count), stakes, rng, params.pos_slot_ms, params.latency)
        else:
            raise ValueError(f"unknown protocol {protocol!r}")
        stats.samples.append(d)
    return stats


# -- the ledger handle used by the protocol ---------------------------------

class Idbc:
    """The identity blockchain as seen by head UAVs: one RAFT node per entry
    of the cluster head list, each with its own chain replica.

    ``submit`` elects a leader when needed (and every ``rotation_period``
    commits), builds a block at the leader, and replicates it. When a head
    update commits, the new head receives a copy of the chain and joins the
    consensus set; the replaced head's node is retired.
    """

    def __init__(self, genesis: Chain, keyring: dict[PublicKey, KeyPair], rng: random.Random,
                 params: ConsensusParams = ConsensusParams(), clock: Callable[[], float] = lambda: 0,
                 on_chain_copy: Callable[[PublicKey, int], None] | None = None):
        self.params = params
        self.rng = rng
        self.keyring = keyring
        self.clock = clock
        self.on_chain_copy = on_chain_copy
        self.nodes: dict[PublicKey, RaftNode] = {}
        self.retired: list[RaftNode] = []
        self.leader: RaftNode | None = None
        self.commits_in_term = 0
        self.elections: list[tuple[float, float]] = []
        self.commit_delays: list[float] = []
        self.crash_plan: dict[int, int] = {}
        for head in genesis.state.heads().values():
            self.nodes[head] = RaftNode(head, genesis.copy(), heartbeat_interval=params.heartbeat_ms)
        self.nodes = dict(sorted(self.nodes.items()))

    @property
    def cluster_size(self) -> int:
        return len(self.nodes)

    @property
    def chain(self) -> Chain:
        ref = self.leader if self.leader is not None and self.leader.alive else None
        if ref is None:
            live = [n for n in self.nodes.values() if n.alive]
            ref = max(live, key=lambda n: len(n.chain)) if live else max(
                self.nodes.values(), key=lambda n: len(n.chain))
        return ref.chain

    def all_nodes(self) -> list[RaftNode]:
        return list(self.nodes.values()) + self.retired

    def mark_down(self, head: PublicKey) -> None:
        node = self.nodes.get(head)
        if node is not None:
            node.alive = False
            if node is self.leader:
                self.leader = None

    def live_count(self) -> int:
        return sum(1 for n in self.nodes.values() if n.alive)

    def has_quorum(self) -> bool:
        return self.live_count() >= quorum(self.cluster_size)

    def elect(self) -> RaftNode:
        leader, delay = raft_elect(list(self.nodes.values()), self.rng, self.params, self.cluster_size)
        self.leader = leader
        self.commits_in_term = 0
        self.elections.append((self.clock(), delay))
        return leader

    def ensure_leader(self) -> RaftNode:
        if self.leader is None or not self.leader.alive or self.commits_in_term >= self.params.rotation_period:
            return self.elect()
        return self.leader

    def leader_keypair(self) -> KeyPair:
        return self.keyring[self.ensure_leader().node_id]

    def input_address_for(self, generator: PublicKey):
        return self.chain.input_address_for(generator)

    def submit(self, txs: Sequence[Transaction]) -> Block:
        """Commit ``txs`` as one block; exactly once even if the leader fails."""
        wanted = {t.hash for t in txs}
        for _ in range(len(self.nodes) + 2):
            leader = self.ensure_leader()
            if all(leader.chain.contains_tx(h) for h in wanted):
                return next(b for b in reversed(leader.chain.blocks) if wanted <= b.tx_hashes())
            pending = leader.pending
            if pending is not None and pending.tx_hashes() == wanted and pending.height == len(leader.chain):
                block = pending
            else:
                block = make_block(len(leader.chain), leader.chain.tip_hash, leader.node_id,
                                   max(int(self.clock()), leader.chain.blocks[-1].timestamp), txs)
            crash_after = self.crash_plan.pop(block.height, None)
            try:
                _, delay = commit_block(leader, list(self.nodes.values()), block, self.rng, self.params,
                                        self.cluster_size, crash_after=crash_after)
            except LeaderDeposed:
                self.leader = None
                continue
            self.commits_in_term += 1
            self.commit_delays.append(delay)
            self._sync_membership()
            return block
        raise CommitFailed("gave up after repeated leader failures")

    def _sync_membership(self) -> None:
        heads = self.leader.chain.state.heads()
        current = set(heads.values())
        for pk in list(self.nodes):
            if pk not in current:
                node = self.nodes.pop(pk)
                node.alive = False
                self.retired.append(node)
        for cluster, pk in heads.items():
            if pk not in self.nodes:
                replica = self.leader.chain.copy()
                self.nodes[pk] = RaftNode(pk, replica, term=self.leader.term,
                                          heartbeat_interval=self.params.heartbeat_ms)
                if self.on_chain_copy is not None:
                    self.on_chain_copy(pk, sum(len(b.to_bytes()) for b in replica.blocks))
        # stable order keeps rng consumption deterministic
        self.nodes = dict(sorted(self.nodes.items()))

    def head_status(self, cluster: int, pk: PublicKey) -> UavStatus:
        return self.chain.state.clusters[cluster].statuses[pk]
