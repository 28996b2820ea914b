"""Cluster-level identity management.

A :class:`ClusterState` is the head's view of one cluster plus the member
actors it talks to. Procedures mutate it in place (each call is one atomic
event in the simulation) and return it. Ledger writes go through an
:class:`~uavidbc.consensus.Idbc` handle; LML changes that no disconnection
transaction covers are carried on-chain by the next ``candidate_update``.
"""
from __future__ import annotations

import logging
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .consensus import Idbc, NoQuorum
from .crypto import (
    ECC,
    ClusterKey,
    CryptoSuite,
    KeyPair,
    NoEligibleUav,
    PublicKey,
    StaleEpoch,
    UnwrapFailure,
    decrypt_result,
    encrypt_result,
    h1,
    h2,
    select_by_hash,
    sha256,
)
from .ledger import (
    CandidateUpdatePayload,
    KeyUpdatePayload,
    TaskEntry,
    TaskRecordPayload,
    Transaction,
    TxType,
    UavStatus,
    build_transaction,
    encode_init_extra,
    is_legal_transition,
    lml_digest,
)
from .sim.energy import Hash, Rx, Sign, Tx, Verify

log = logging.getLogger(__name__)

ACTIVE = (UavStatus.NATIVE, UavStatus.RECONNECTED)
PROBE_BYTES = 16
RECEIPT_BYTES = 64
CHALLENGE_BYTES = 32


class ProtocolError(Exception):
    pass


class IllegalTransition(ProtocolError):
    pass


class NoCandidate(ProtocolError):
    pass


class NoBackupTarget(ProtocolError):
    pass


class UseHeadProcedure(ProtocolError):
    pass


class DuplicateEvent(ProtocolError):
    pass


class HeadUnavailable(ProtocolError):
    pass


class ReconnectionRejected(ProtocolError):
    REASONS = ("UnknownKey", "BadSignature", "FingerprintNotGray", "StatusNotDisconnected", "TestTaskFailed")

    def __init__(self, reason: str, detail: str = ""):
        assert reason in self.REASONS, reason
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


# -- membership lists --------------------------------------------------------

class Lml:
    """Latest member list: registered keys (fixed for the mission) and their status."""

    def __init__(self, cluster_index: int, keys: Iterable[PublicKey]):
        self.cluster_index = cluster_index
        self.entries: dict[PublicKey, UavStatus] = {pk: UavStatus.NATIVE for pk in keys}
        self.version = 0
        self.history: list[tuple[PublicKey, UavStatus, UavStatus]] = []

    def keys(self) -> list[PublicKey]:
        return list(self.entries)

    def status(self, pk: PublicKey) -> UavStatus:
        return self.entries[pk]

    def __contains__(self, pk) -> bool:
        return pk in self.entries

    def set_status(self, pk: PublicKey, new: UavStatus) -> tuple[PublicKey, UavStatus, UavStatus]:
        old = self.entries[pk]
        if not is_legal_transition(old, new):
            raise IllegalTransition(f"{old} -> {new}")
        self.entries[pk] = new
        self.version += 1
        self.history.append((pk, old, new))
        return pk, old, new

    def digest(self) -> bytes:
        return lml_digest(self.cluster_index, self.entries.items())

    def snapshot(self) -> tuple[int, tuple[tuple[PublicKey, UavStatus], ...]]:
        return self.version, tuple(self.entries.items())

    def wire_size(self, key_len: int) -> int:
        return 8 + len(self.entries) * (key_len + 1)


@dataclass
class WhiteGrayList:
    white: set[bytes] = field(default_factory=set)
    gray: set[bytes] = field(default_factory=set)

    def move_to_gray(self, fp: bytes) -> None:
        self.white.discard(fp)
        self.gray.add(fp)

    def is_gray(self, fp: bytes) -> bool:
        return fp in self.gray


@dataclass
class ClusterHeadList:
    entries: dict[int, PublicKey] = field(default_factory=dict)
    history: list[tuple[int, PublicKey]] = field(default_factory=list)

    def set(self, cluster: int, pk: PublicKey) -> None:
        self.entries[cluster] = pk
        self.history.append((cluster, pk))


# -- tasks -------------------------------------------------------------------

@dataclass(frozen=True)
class Task:
    task_id: int
    payload: bytes


@dataclass(frozen=True)
class TaskResultRecord:
    task_id: int
    producer: PublicKey
    ciphertext: bytes
    key_epoch: int
    period: int


def compute_task(task: Task) -> bytes:
    return sha256(b"task-result" + struct.pack(">Q", task.task_id) + task.payload)


def test_task_answer(nonce: bytes, rounds: int = 64) -> bytes:
    """Shared verification puzzle: the first of ``rounds`` chained hashes of
    the nonce whose leading byte is smallest."""
    best = None
    x = nonce
    for _ in range(rounds):
        x = sha256(x)
        if best is None or x[0] < best[0]:
            best = x
    return best


# -- member actors -----------------------------------------------------------

@dataclass
class UavNode:
    keypair: KeyPair
    fingerprint: bytes
    cluster_index: int
    index: int
    alive: bool = True
    hijacked: bool = False
    drop_acks: bool = False
    cluster_key: ClusterKey | None = None
    pending_key: ClusterKey | None = None
    lml_view: tuple | None = None

    @property
    def pk(self) -> PublicKey:
        return self.keypair.public_key

    @property
    def label(self) -> str:
        return f"C{self.cluster_index}-UAV{self.index}"

    def produce(self, task: Task, period: int) -> TaskResultRecord:
        result = compute_task(task)
        if self.hijacked:
            result = bytes(b ^ 0xFF for b in result)
        ct = encrypt_result(self.cluster_key, task.task_id, self.pk, result)
        return TaskResultRecord(task.task_id, self.pk, ct, self.cluster_key.epoch, period)

    def solve_test(self, nonce: bytes) -> bytes:
        answer = test_task_answer(nonce)
        return sha256(answer) if self.hijacked else answer


@dataclass
class ProtocolEnv:
    """Side channels a procedure needs: crypto suite, randomness, clock,
    energy meter and geometry."""

    suite: CryptoSuite = ECC
    rng: random.Random = field(default_factory=lambda: random.Random(0))
    clock: Callable[[], int] = lambda: 0
    meter: object | None = None
    distance: Callable[[PublicKey, PublicKey], float] = lambda a, b: 100.0
    idbc_distance: float = 2500.0
    key_len: int = 33
    events: list = field(default_factory=list)

    def charge(self, pk: PublicKey, action) -> None:
        if self.meter is not None:
            self.meter.charge(pk, action)

    def note(self, kind: str, cluster: int, detail: str = "") -> None:
        self.events.append((self.clock(), cluster, kind, detail))

    def now(self) -> int:
        return int(self.clock())

    def key_pad(self, n_keys: int) -> int:
        return max(self.key_len - 33, 0) * n_keys


@dataclass
class AuthSample:
    public_key: PublicKey
    entries_touched: int
    outcome: str


@dataclass
class ClusterState:
    index: int
    lml: Lml
    wgl: WhiteGrayList
    head: PublicKey | None
    cluster_key: ClusterKey
    uavs: dict[PublicKey, UavNode]
    task_queue: deque = field(default_factory=deque)
    member_results: dict[PublicKey, list[TaskResultRecord]] = field(default_factory=dict)
    head_backup: dict[PublicKey, list[TaskResultRecord]] = field(default_factory=dict)
    accepted: list[TaskResultRecord] = field(default_factory=list)
    unrecorded: list[tuple[PublicKey, UavStatus, UavStatus]] = field(default_factory=list)
    quarantined: set[PublicKey] = field(default_factory=set)
    challenges: set[bytes] = field(default_factory=set)
    auth_samples: list[AuthSample] = field(default_factory=list)
    pending_records: list[TaskEntry] = field(default_factory=list)
    needs_key_update: bool = False
    headless: bool = False
    rr_pointer: int = 0
    epoch_history: list[int] = field(default_factory=list)

    def node(self, pk: PublicKey) -> UavNode:
        return self.uavs[pk]

    def fingerprint(self, pk: PublicKey) -> bytes:
        return self.uavs[pk].fingerprint

    def connected_members(self) -> list[PublicKey]:
        """Members the head believes connected (Native/Reconnected, not head)."""
        return [pk for pk in self.lml.keys() if pk != self.head and self.lml.status(pk) in ACTIVE]

    def monitored(self) -> list[PublicKey]:
        return [pk for pk in self.lml.keys()
                if pk != self.head and self.lml.status(pk) != UavStatus.DISCONNECTED]

    def present(self) -> list[PublicKey]:
        """Every UAV the head counts as part of the cluster, head included."""
        out = [pk for pk in self.lml.keys() if self.lml.status(pk) != UavStatus.DISCONNECTED]
        return out

    def stored_results(self) -> list[TaskResultRecord]:
        out = []
        for pk in self.present():
            out.extend(self.member_results.get(pk, ()))
        return out

    def backup_results(self) -> list[TaskResultRecord]:
        out = []
        for pk in self.present():
            out.extend(self.head_backup.get(pk, ()))
        return out


# -- registration -------------------------------------------------------------

def new_cluster(index: int, nodes: list[UavNode], head: PublicKey, cluster_key: ClusterKey) -> ClusterState:
    lml = Lml(index, [n.pk for n in nodes])
    wgl = WhiteGrayList(white={n.fingerprint for n in nodes})
    for n in nodes:
        n.cluster_key = cluster_key
        n.lml_view = lml.snapshot()
    return ClusterState(index, lml, wgl, head, cluster_key, {n.pk: n for n in nodes},
                        member_results={n.pk: [] for n in nodes}, head_backup={n.pk: [] for n in nodes},
                        epoch_history=[cluster_key.epoch])


def genesis_transactions(suite: CryptoSuite, bs: KeyPair, clusters: Iterable[ClusterState],
                         timestamp: int = 0) -> list[Transaction]:
    txs = []
    for c in clusters:
        for pk in c.lml.keys():
            txs.append(build_transaction(
                suite, bs.secret_key, tx_type=TxType.INITIALIZATION, cluster_index=c.index,
                generator=pk, public_key=pk, fingerprint=c.fingerprint(pk), timestamp=timestamp,
                input_address=None, extra=encode_init_extra(pk == c.head)))
    return txs


# -- selection -----------------------------------------------------------------

def select_candidate_head(lml: Lml, head: PublicKey | None = None) -> PublicKey:
    eligible = [pk for pk in lml.keys() if lml.status(pk) == UavStatus.NATIVE and pk != head]
    try:
        return select_by_hash(lml.keys(), eligible, h1)
    except NoEligibleUav:
        raise NoCandidate("no Native member can become head") from None


def select_backup_member(lml: Lml, exclude: Iterable[PublicKey]) -> PublicKey:
    skip = set(exclude)
    eligible = [pk for pk in lml.keys() if lml.status(pk) in ACTIVE and pk not in skip]
    try:
        return select_by_hash(lml.keys(), eligible, h2)
    except NoEligibleUav:
        raise NoBackupTarget("no connected member can hold the copy") from None


def _candidate_or_none(cluster: ClusterState) -> PublicKey | None:
    try:
        return select_candidate_head(cluster.lml, cluster.head)
    except NoCandidate:
        return None


# -- failure detection ---------------------------------------------------------

def detect_disconnection(cluster: ClusterState, hello_log: dict[PublicKey, float], now: float,
                         timeout: float, probe: Callable[[PublicKey], bool] = lambda pk: False) -> list[PublicKey]:
    """Members silent for longer than ``timeout`` that also miss the active probe."""
    lost = []
    for pk in cluster.monitored():
        if now - hello_log.get(pk, 0.0) > timeout and not probe(pk):
            lost.append(pk)
    return lost


# -- ledger plumbing -----------------------------------------------------------

def _head_tx(cluster: ClusterState, idbc: Idbc, env: ProtocolEnv, tx_type: TxType, extra: bytes,
             n_keys: int = 1) -> Transaction:
    head = cluster.node(cluster.head)
    tx = build_transaction(env.suite, head.keypair.secret_key, tx_type=tx_type, cluster_index=cluster.index,
                           generator=head.pk, public_key=head.pk, timestamp=env.now(),
                           input_address=idbc.input_address_for(head.pk), extra=extra)
    env.charge(head.pk, Hash(len(tx.raw)))
    env.charge(head.pk, Sign())
    env.charge(head.pk, Tx(len(tx.raw) + env.key_pad(n_keys), env.idbc_distance))
    return tx


def _flush_disconnections(cluster: ClusterState, idbc: Idbc, env: ProtocolEnv) -> None:
    remaining = []
    for pk, old, new in cluster.unrecorded:
        if new != UavStatus.DISCONNECTED:
            remaining.append((pk, old, new))
            continue
        if idbc.chain.state.clusters[cluster.index].statuses[pk] == UavStatus.DISCONNECTED:
            continue
        if cluster.head is not None:
            signer = cluster.node(cluster.head).keypair
        else:
            signer = idbc.leader_keypair()
        tx = build_transaction(env.suite, signer.secret_key, tx_type=TxType.MEMBER_UAV_DISCONNECTED,
                               cluster_index=cluster.index, generator=pk, public_key=pk,
                               fingerprint=cluster.fingerprint(pk), timestamp=env.now(),
                               input_address=idbc.input_address_for(pk))
        if cluster.head is not None:
            env.charge(cluster.head, Sign())
            env.charge(cluster.head, Tx(len(tx.raw) + env.key_pad(2), env.idbc_distance))
        idbc.submit([tx])
    cluster.unrecorded = remaining


def _chain_status_order(cluster: ClusterState, idbc: Idbc) -> list[tuple[PublicKey, UavStatus, UavStatus]]:
    """Collapse unrecorded transitions to the steps still missing on chain."""
    chain_view = dict(idbc.chain.state.clusters[cluster.index].statuses)
    out = []
    for pk, old, new in cluster.unrecorded:
        if chain_view.get(pk) == old:
            out.append((pk, old, new))
            chain_view[pk] = new
    return out


def record_status(cluster: ClusterState, idbc: Idbc, env: ProtocolEnv) -> None:
    """Put local LML changes on chain and refresh the recorded candidate."""
    _flush_disconnections(cluster, idbc, env)
    transitions = _chain_status_order(cluster, idbc)
    payload = CandidateUpdatePayload(_candidate_or_none(cluster), cluster.lml.digest(), tuple(transitions))
    idbc.submit([_head_tx(cluster, idbc, env, TxType.CANDIDATE_UPDATE, payload.encode(),
                          n_keys=2 + len(transitions))])
    cluster.unrecorded = []


def _set_status(cluster: ClusterState, pk: PublicKey, new: UavStatus, recorded: bool = False) -> None:
    change = cluster.lml.set_status(pk, new)
    if not recorded:
        cluster.unrecorded.append(change)


def _receipt_message(cluster_index: int, epoch: int, member: PublicKey, blob: bytes) -> bytes:
    return sha256(b"key-receipt" + struct.pack(">IQ", cluster_index, epoch) + member + sha256(blob))


def _broadcast_lml(cluster: ClusterState, env: ProtocolEnv) -> None:
    size = cluster.lml.wire_size(env.key_len)
    members = cluster.connected_members()
    far = max((env.distance(cluster.head, pk) for pk in members), default=0.0)
    env.charge(cluster.head, Tx(size, far))
    snap = cluster.lml.snapshot()
    for pk in members:
        node = cluster.node(pk)
        if node.alive:
            env.charge(pk, Rx(size))
            node.lml_view = snap


# -- key update ----------------------------------------------------------------

def run_key_update(cluster: ClusterState, idbc: Idbc, env: ProtocolEnv) -> ClusterState:
    """Event-driven rekey: wrap a fresh key to every connected member, collect
    signed receipts, record key_update + candidate_update, broadcast the LML.

    A member that never acknowledges is handled as newly disconnected and the
    round restarts without it. NoQuorum leaves ``needs_key_update`` set.
    """
    if cluster.head is None:
        raise HeadUnavailable("key update needs a live head")
    head = cluster.node(cluster.head)
    while True:
        new_key = ClusterKey(env.rng.getrandbits(128).to_bytes(16, "big"), cluster.cluster_key.epoch + 1)
        receipts: list[bytes] = []
        missing: list[PublicKey] = []
        for pk in cluster.connected_members():
            node = cluster.node(pk)
            blob = env.suite.wrap_cluster_key(new_key, pk, ephemeral_seed=env.rng.getrandbits(256))
            d = env.distance(head.pk, pk)
            env.charge(head.pk, Sign())
            env.charge(head.pk, Tx(len(blob) + env.key_pad(1), d))
            if not node.alive or node.drop_acks:
                missing.append(pk)
                continue
            env.charge(pk, Rx(len(blob) + env.key_pad(1)))
            env.charge(pk, Sign())
            node.pending_key = env.suite.unwrap_cluster_key(blob, node.keypair.secret_key)
            msg = _receipt_message(cluster.index, new_key.epoch, pk, blob)
            receipt = env.suite.sign(node.keypair.secret_key, msg)
            env.charge(pk, Sign())
            env.charge(pk, Tx(len(receipt), d))
            env.charge(head.pk, Rx(len(receipt)))
            env.charge(head.pk, Verify())
            if not env.suite.verify(pk, msg, receipt):
                missing.append(pk)
                continue
            receipts.append(sha256(receipt))
        if not missing:
            break
        for pk in missing:
            env.note("ack_timeout", cluster.index, cluster.node(pk).label)
            _mark_member_disconnected(cluster, pk, env)
            _copy_backup(cluster, pk, env)

    cluster.needs_key_update = True
    _flush_disconnections(cluster, idbc, env)
    record_status(cluster, idbc, env)
    payload = KeyUpdatePayload(new_key.epoch, cluster.lml.digest(), tuple(receipts))
    idbc.submit([_head_tx(cluster, idbc, env, TxType.KEY_UPDATE, payload.encode(), n_keys=1)])
    cluster.needs_key_update = False

    cluster.cluster_key = new_key
    cluster.epoch_history.append(new_key.epoch)
    for pk in cluster.connected_members():
        node = cluster.node(pk)
        if node.pending_key is not None and node.pending_key.epoch == new_key.epoch:
            node.cluster_key = node.pending_key
        node.pending_key = None
    head.cluster_key = new_key
    _broadcast_lml(cluster, env)
    env.note("key_update", cluster.index, f"epoch={new_key.epoch}")
    return cluster


# -- member disconnection ------------------------------------------------------

def _mark_member_disconnected(cluster: ClusterState, pk: PublicKey, env: ProtocolEnv) -> None:
    _set_status(cluster, pk, UavStatus.DISCONNECTED)
    cluster.wgl.move_to_gray(cluster.fingerprint(pk))
    cluster.quarantined.discard(pk)
    node = cluster.node(pk)
    node.cluster_key = None
    node.pending_key = None


def _copy_backup(cluster: ClusterState, lost: PublicKey, env: ProtocolEnv) -> PublicKey | None:
    """Hand the head's copy of ``lost``'s results to the hash-selected member."""
    records = cluster.head_backup.pop(lost, [])
    cluster.member_results[lost] = []
    cluster.head_backup[lost] = []
    if not records:
        return None
    try:
        target = select_backup_member(cluster.lml, {cluster.head, lost})
    except NoBackupTarget:
        target = cluster.head
        env.note("no_backup_target", cluster.index, cluster.node(lost).label)
    nbytes = sum(len(r.ciphertext) + 24 for r in records)
    if target != cluster.head:
        env.charge(cluster.head, Tx(nbytes, env.distance(cluster.head, target)))
        env.charge(target, Rx(nbytes))
    cluster.member_results.setdefault(target, []).extend(records)
    cluster.head_backup.setdefault(target, []).extend(records)
    env.note("backup_copy", cluster.index, f"{cluster.node(lost).label}->{cluster.node(target).label} n={len(records)}")
    return target


def member_disconnection_procedure(cluster: ClusterState, uav: PublicKey, idbc: Idbc,
                                   env: ProtocolEnv) -> ClusterState:
    if uav == cluster.head:
        raise UseHeadProcedure("the head's disconnection is handled by the IDBC leader")
    if cluster.head is None:
        raise HeadUnavailable("member disconnection needs a live head")
    if cluster.lml.status(uav) == UavStatus.DISCONNECTED:
        raise DuplicateEvent("UAV already Disconnected")
    env.charge(cluster.head, Tx(PROBE_BYTES, env.distance(cluster.head, uav)))
    _mark_member_disconnected(cluster, uav, env)
    env.note("member_disconnected", cluster.index, cluster.node(uav).label)
    try:
        run_key_update(cluster, idbc, env)
    finally:
        _copy_backup(cluster, uav, env)
    return cluster


# -- head disconnection --------------------------------------------------------

def head_disconnection_procedure(registry: ClusterHeadList, cluster: ClusterState, idbc: Idbc,
                                 env: ProtocolEnv) -> ClusterState:
    """Replace a silent head with the on-chain candidate (seven steps)."""
    old = cluster.head
    if old is None:
        raise HeadUnavailable("cluster has no head to replace")
    idbc.mark_down(old)
    if not idbc.has_quorum():
        raise NoQuorum("majority of heads unavailable")

    # 1. leader records the disconnection
    leader = idbc.leader_keypair()
    tx = build_transaction(env.suite, leader.secret_key, tx_type=TxType.HEAD_UAV_DISCONNECTED,
                           cluster_index=cluster.index, generator=old, public_key=old,
                           fingerprint=cluster.fingerprint(old), timestamp=env.now(),
                           input_address=idbc.input_address_for(old))
    idbc.submit([tx])
    _set_status(cluster, old, UavStatus.DISCONNECTED, recorded=True)
    cluster.head = None
    cluster.headless = True
    old_node = cluster.node(old)
    old_node.cluster_key = None
    lost_backup = cluster.head_backup.pop(old, [])
    cluster.member_results[old] = []
    cluster.head_backup = {pk: [] for pk in cluster.lml.keys()}
    env.note("head_disconnected", cluster.index, old_node.label)

    while True:
        # 2. leader finds the candidate on chain
        cand = idbc.chain.state.clusters[cluster.index].head_candidate()
        if cand is None:
            env.note("protocol_violation", cluster.index, "no Native candidate; cluster headless")
            raise NoCandidate("no Native member can take over")
        node = cluster.node(cand)
        if node.alive:
            break
        # candidate unreachable: record it and recompute
        _set_status(cluster, cand, UavStatus.DISCONNECTED)
        cluster.wgl.move_to_gray(node.fingerprint)
        _flush_disconnections(cluster, idbc, env)

    # 3-4. candidate requests the head role, committed through RAFT
    tx = build_transaction(env.suite, node.keypair.secret_key, tx_type=TxType.HEAD_UAV_UPDATE,
                           cluster_index=cluster.index, generator=cand, public_key=cand,
                           fingerprint=node.fingerprint, timestamp=env.now(),
                           input_address=idbc.input_address_for(cand))
    env.charge(cand, Sign())
    env.charge(cand, Tx(len(tx.raw) + env.key_pad(2), env.idbc_distance))
    idbc.submit([tx])
    # 5. chain copied to the new head inside Idbc.submit
    cluster.head = cand
    cluster.headless = False
    registry.set(cluster.index, cand)
    former_primary = cluster.member_results.get(cand, [])
    env.note("head_update", cluster.index, node.label)

    # 6. rekey and gray-list the old head
    cluster.wgl.move_to_gray(old_node.fingerprint)
    node.cluster_key = cluster.cluster_key
    try:
        run_key_update(cluster, idbc, env)
    finally:
        # 7. rebuild the backup from members, then copy own results away
        backup = {pk: [] for pk in cluster.lml.keys()}
        for pk in cluster.present():
            member = cluster.node(pk)
            recs = cluster.member_results.get(pk, [])
            if pk != cand and not member.alive:
                continue
            if recs and pk != cand:
                nbytes = sum(len(r.ciphertext) + 24 for r in recs)
                env.charge(pk, Tx(nbytes, env.distance(pk, cand)))
                env.charge(cand, Rx(nbytes))
            backup[pk] = list(recs)
        cluster.head_backup = backup
        if former_primary:
            try:
                target = select_backup_member(cluster.lml, {cand, old})
            except NoBackupTarget:
                env.note("no_backup_target", cluster.index, node.label)
            else:
                moved = cluster.member_results.pop(cand)
                cluster.member_results[cand] = []
                cluster.head_backup[cand] = []
                cluster.member_results.setdefault(target, []).extend(moved)
                cluster.head_backup.setdefault(target, []).extend(moved)
                env.charge(cand, Tx(sum(len(r.ciphertext) + 24 for r in moved), env.distance(cand, target)))
                env.note("backup_copy", cluster.index, f"{node.label}->{cluster.node(target).label} n={len(moved)}")
    del lost_backup
    return cluster


# -- reconnection ----------------------------------------------------------------

def issue_challenge(cluster: ClusterState, env: ProtocolEnv) -> bytes:
    nonce = env.rng.getrandbits(8 * CHALLENGE_BYTES).to_bytes(CHALLENGE_BYTES, "big")
    cluster.challenges.add(nonce)
    return nonce


def challenge_message(cluster_index: int, challenge: bytes) -> bytes:
    return sha256(b"reconnect" + struct.pack(">I", cluster_index) + challenge)


@dataclass
class ReconnectionClaim:
    public_key: PublicKey
    fingerprint: bytes
    challenge: bytes
    signature: bytes
    solve: Callable[[bytes], bytes]


def make_claim(node: UavNode, challenge: bytes, suite: CryptoSuite = ECC) -> ReconnectionClaim:
    sig = suite.sign(node.keypair.secret_key, challenge_message(node.cluster_index, challenge))
    return ReconnectionClaim(node.pk, node.fingerprint, challenge, sig, node.solve_test)


def authenticate_claim(cluster: ClusterState, claim: ReconnectionClaim, env: ProtocolEnv) -> int:
    """Identity checks for a returning UAV: LML membership, signature over a
    fresh challenge, gray-listed fingerprint and Disconnected status. Only
    the head's LML and white-gray list are consulted, never the chain.

    Returns the number of list entries touched; raises
    :class:`ReconnectionRejected` with the first failing check.
    """
    pk = claim.public_key
    fresh = claim.challenge in cluster.challenges
    cluster.challenges.discard(claim.challenge)
    touched = 1
    env.charge(cluster.head, Rx(CHALLENGE_BYTES + len(claim.signature) + env.key_len + len(claim.fingerprint)))

    def reject(reason, detail=""):
        cluster.auth_samples.append(AuthSample(pk, touched, reason))
        env.note("reconnect_rejected", cluster.index, reason)
        raise ReconnectionRejected(reason, detail)

    if pk not in cluster.lml:
        reject("UnknownKey")
    env.charge(cluster.head, Verify())
    if not fresh or not env.suite.verify(pk, challenge_message(cluster.index, claim.challenge), claim.signature):
        reject("BadSignature")
    touched += 1
    if not cluster.wgl.is_gray(claim.fingerprint) or claim.fingerprint != cluster.fingerprint(pk):
        reject("FingerprintNotGray")
    if cluster.lml.status(pk) != UavStatus.DISCONNECTED:
        reject("StatusNotDisconnected")
    return touched


def reconnection_procedure(cluster: ClusterState, claim: ReconnectionClaim, idbc: Idbc,
                           env: ProtocolEnv) -> ClusterState:
    """Authenticate a returning UAV (see :func:`authenticate_claim`), then
    verify it with a jointly computed test task.

    Raises :class:`ReconnectionRejected`. A failed test leaves the UAV
    Marked and out of task assignment.
    """
    if cluster.head is None:
        raise HeadUnavailable("reconnection needs a live head")
    pk = claim.public_key
    touched = authenticate_claim(cluster, claim, env)

    def reject(reason, detail=""):
        cluster.auth_samples.append(AuthSample(pk, touched, reason))
        env.note("reconnect_rejected", cluster.index, reason)
        raise ReconnectionRejected(reason, detail)

    _set_status(cluster, pk, UavStatus.MARKED)
    node = cluster.node(pk)
    node.alive = True
    cluster.member_results[pk] = []
    cluster.head_backup[pk] = []
    nonce = env.rng.getrandbits(256).to_bytes(32, "big")
    expected = test_task_answer(nonce)
    env.charge(cluster.head, Hash(64 * 32))
    env.charge(cluster.head, Tx(32, env.distance(cluster.head, pk)))
    answer = claim.solve(nonce)
    env.charge(pk, Hash(64 * 32))
    env.charge(pk, Tx(len(answer), env.distance(cluster.head, pk)))
    if answer != expected:
        cluster.quarantined.add(pk)
        try:
            record_status(cluster, idbc, env)
        except NoQuorum:
            env.note("no_quorum", cluster.index, "Marked status recorded later")
        reject("TestTaskFailed")

    _set_status(cluster, pk, UavStatus.RECONNECTED)
    cluster.auth_samples.append(AuthSample(pk, touched, "accepted"))
    env.note("reconnected", cluster.index, node.label)
    run_key_update(cluster, idbc, env)
    return cluster


# -- tasks -----------------------------------------------------------------------

def task_workers(cluster: ClusterState) -> list[PublicKey]:
    return [pk for pk in cluster.connected_members() if pk not in cluster.quarantined]


def assign_and_collect(cluster: ClusterState, period: int, env: ProtocolEnv, idbc: Idbc | None = None,
                       task_rate: int = 1) -> ClusterState:
    """One period of round-robin dispatch and encrypted result collection.

    ``task_rate`` tasks go to every eligible member. Gray-listed producers
    are re-verified by recomputation; rejected or missing results are
    requeued at the front. Accepted results land in the producer's store
    and in the head's backup, and a task_record goes on chain.
    """
    if cluster.head is None:
        return cluster
    workers = task_workers(cluster)
    if not workers:
        return cluster
    count = task_rate * len(workers)
    start = cluster.rr_pointer % len(workers)
    cluster.rr_pointer += count
    requeue: list[Task] = []
    head = cluster.head
    for i in range(count):
        if not cluster.task_queue:
            break
        pk = workers[(start + i) % len(workers)]
        task = cluster.task_queue.popleft()
        node = cluster.node(pk)
        d = env.distance(head, pk)
        env.charge(head, Tx(len(task.payload) + 8, d))
        if not node.alive or node.cluster_key is None:
            requeue.append(task)
            continue
        rec = node.produce(task, period)
        env.charge(pk, Rx(len(task.payload) + 8))
        env.charge(pk, Tx(len(rec.ciphertext) + 24, d))
        env.charge(head, Rx(len(rec.ciphertext) + 24))
        try:
            plain = decrypt_result(cluster.cluster_key, rec.key_epoch, rec.task_id, rec.producer, rec.ciphertext)
        except (StaleEpoch, UnwrapFailure):
            env.note("result_rejected", cluster.index, f"{node.label} task={task.task_id} bad key")
            requeue.append(task)
            continue
        if cluster.wgl.is_gray(node.fingerprint):
            env.charge(head, Hash(len(task.payload)))
            if plain != compute_task(task):
                env.note("result_rejected", cluster.index, f"{node.label} task={task.task_id} wrong result")
                requeue.append(task)
                continue
        cluster.member_results.setdefault(pk, []).append(rec)
        cluster.head_backup.setdefault(pk, []).append(rec)
        cluster.accepted.append(rec)
        cluster.pending_records.append(TaskEntry(rec.task_id, pk, sha256(rec.ciphertext)))
    cluster.task_queue.extendleft(reversed(requeue))
    if idbc is not None and cluster.pending_records:
        payload = TaskRecordPayload(period, tuple(cluster.pending_records))
        try:
            idbc.submit([_head_tx(cluster, idbc, env, TxType.TASK_RECORD, payload.encode())])
        except NoQuorum:
            return cluster
        cluster.pending_records = []
    return cluster
