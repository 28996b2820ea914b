"""Cluster procedures: selection, key updates, disconnection, reconnection
and task collection, checked against independent recomputations."""
import hashlib
import random
from collections import Counter

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from uavidbc.crypto import NULL, ClusterKey, StaleEpoch, decrypt_result, encrypt_result
from uavidbc.ledger import LEGAL_TRANSITIONS, CandidateUpdatePayload, KeyUpdatePayload, TxType, UavStatus
from uavidbc.protocol import (
    DuplicateEvent,
    IllegalTransition,
    Lml,
    NoBackupTarget,
    NoCandidate,
    ReconnectionRejected,
    Task,
    UavNode,
    UseHeadProcedure,
    assign_and_collect,
    detect_disconnection,
    head_disconnection_procedure,
    issue_challenge,
    make_claim,
    member_disconnection_procedure,
    reconnection_procedure,
    run_key_update,
    select_backup_member,
    select_candidate_head,
    task_workers,
)

from conftest import build_world

N, D, M, R = UavStatus.NATIVE, UavStatus.DISCONNECTED, UavStatus.MARKED, UavStatus.RECONNECTED


def pick_oracle(all_keys, eligible, tag):
    """xor the keys byte by byte, hash with the domain tag, reduce mod |eligible|."""
    acc = bytearray(len(all_keys[0]))
    for k in all_keys:
        for i, b in enumerate(k):
            acc[i] ^= b
    digest = hashlib.sha256(bytes([tag]) + bytes(acc)).digest()
    return sorted(eligible)[int(digest.hex(), 16) % len(eligible)]


def random_keys(rng, n):
    return [bytes([2]) + rng.randbytes(32) for _ in range(n)]


def feed_tasks(cluster, world, period, rate=1):
    start = sum(1 for _ in cluster.accepted) + len(cluster.task_queue) + 1000 * period
    for i in range(rate * len(task_workers(cluster))):
        cluster.task_queue.append(Task(start + i, f"task-{period}-{i}".encode()))
    assign_and_collect(cluster, period, world.env, world.idbc, rate)


def integrity_holds(cluster):
    return Counter(cluster.accepted) == Counter(cluster.stored_results()) == Counter(cluster.backup_results())


def tx_types(world):
    return [t.tx_type for b in world.idbc.chain.blocks for t in b.transactions]


@pytest.fixture
def w():
    return build_world(sizes=(6, 3, 3), suite=NULL)


class TestLists:
    def test_version_and_legality(self):
        lml = Lml(0, [b"a", b"b"])
        lml.set_status(b"a", D)
        lml.set_status(b"a", M)
        assert lml.version == 2
        with pytest.raises(IllegalTransition):
            lml.set_status(b"b", R)
        assert lml.version == 2 and lml.status(b"b") == N

    def test_gray_is_permanent_and_disjoint(self, w):
        c = w.clusters[0]
        fp = c.fingerprint(c.lml.keys()[1])
        c.wgl.move_to_gray(fp)
        c.wgl.move_to_gray(fp)
        assert fp in c.wgl.gray and fp not in c.wgl.white
        assert len(c.wgl.white | c.wgl.gray) == len(c.lml.keys())


class TestDetection:
    def test_all_fresh(self, w):
        c = w.clusters[0]
        hello = {pk: 9_000 for pk in c.lml.keys()}
        assert detect_disconnection(c, hello, 10_000, 3_000) == []

    def test_silent_and_unanswered(self, w):
        c = w.clusters[0]
        silent = c.lml.keys()[2]
        hello = {pk: 9_000 for pk in c.lml.keys()}
        hello[silent] = 10_000 - 6_000
        assert detect_disconnection(c, hello, 10_000, 3_000, probe=lambda pk: False) == [silent]

    def test_silent_but_answers_probe(self, w):
        c = w.clusters[0]
        silent = c.lml.keys()[2]
        hello = {pk: 9_000 for pk in c.lml.keys()}
        hello[silent] = 4_000
        assert detect_disconnection(c, hello, 10_000, 3_000, probe=lambda pk: pk == silent) == []


class TestSelection:
    def test_single_native(self):
        lml = Lml(0, [b"h" * 33, b"m" * 33, b"x" * 33])
        lml.set_status(b"x" * 33, D)
        assert select_candidate_head(lml, b"h" * 33) == b"m" * 33

    def test_no_native(self):
        lml = Lml(0, [b"h" * 33, b"m" * 33])
        lml.set_status(b"m" * 33, D)
        with pytest.raises(NoCandidate):
            select_candidate_head(lml, b"h" * 33)

    def test_same_at_every_node(self):
        keys = random_keys(random.Random(1), 8)
        picks = set()
        for _ in range(5):
            copy = Lml(0, list(keys))
            copy.set_status(keys[3], D)
            picks.add(select_candidate_head(copy, keys[0]))
        assert len(picks) == 1

    def test_six_natives_match_oracle(self):
        keys = random_keys(random.Random(2), 7)
        lml = Lml(0, keys)
        assert select_candidate_head(lml, keys[0]) == pick_oracle(keys, keys[1:], 1)

    def test_backup_single_eligible(self):
        keys = random_keys(random.Random(3), 3)
        lml = Lml(0, keys)
        assert select_backup_member(lml, {keys[0], keys[1]}) == keys[2]

    def test_backup_none_eligible(self):
        keys = random_keys(random.Random(3), 2)
        with pytest.raises(NoBackupTarget):
            select_backup_member(Lml(0, keys), set(keys))

    def test_backup_uses_its_own_hash(self):
        rng = random.Random(4)
        for _ in range(200):
            keys = random_keys(rng, 6)
            lml = Lml(0, keys)
            lml.set_status(keys[5], D)
            lml.set_status(keys[5], M)
            lml.set_status(keys[5], R)
            eligible = keys[1:]
            backup = select_backup_member(lml, {keys[0]})
            assert backup == pick_oracle(keys, eligible, 2)
            if pick_oracle(keys, eligible, 1) != backup:
                return
        pytest.fail("h1 and h2 never disagreed")

    def test_backup_includes_reconnected(self):
        keys = random_keys(random.Random(5), 3)
        lml = Lml(0, keys)
        for s in (D, M, R):
            lml.set_status(keys[2], s)
        assert select_backup_member(lml, {keys[0], keys[1]}) == keys[2]
        lml.set_status(keys[1], D)
        # a Reconnected UAV may hold backups but is never a head candidate
        with pytest.raises(NoCandidate):
            select_candidate_head(lml, keys[0])


class TestKeyUpdate:
    def test_happy_path(self, w):
        c = w.clusters[0]
        run_key_update(c, w.idbc, w.env)
        assert c.cluster_key.epoch == 1
        for pk in c.connected_members():
            assert c.node(pk).cluster_key == c.cluster_key
            assert c.node(pk).lml_view == c.lml.snapshot()
        assert tx_types(w)[-2:] == [TxType.CANDIDATE_UPDATE, TxType.KEY_UPDATE]
        ku = KeyUpdatePayload.decode(w.idbc.chain.blocks[-1].transactions[0].extra)
        assert ku.epoch == 1 and len(ku.receipt_hashes) == 5
        assert ku.lml_digest == c.lml.digest()

    def test_missing_ack_restarts_without_member(self, w):
        c = w.clusters[0]
        mute = c.node(c.lml.keys()[4])
        mute.drop_acks = True
        run_key_update(c, w.idbc, w.env)
        assert c.lml.status(mute.pk) == D
        assert w.idbc.head_status(0, mute.pk) == D
        assert mute.cluster_key is None
        ku = KeyUpdatePayload.decode(w.idbc.chain.blocks[-1].transactions[0].extra)
        assert len(ku.receipt_hashes) == 4
        assert c.fingerprint(mute.pk) in c.wgl.gray

    def test_old_epoch_rejected_after_update(self, w):
        c = w.clusters[0]
        member = c.node(c.lml.keys()[1])
        ct = encrypt_result(member.cluster_key, 1, member.pk, b"r")
        old_epoch = member.cluster_key.epoch
        run_key_update(c, w.idbc, w.env)
        with pytest.raises(StaleEpoch):
            decrypt_result(c.cluster_key, old_epoch, 1, member.pk, ct)

    def test_candidate_recorded(self, w):
        c = w.clusters[0]
        run_key_update(c, w.idbc, w.env)
        cu = CandidateUpdatePayload.decode(w.idbc.chain.blocks[-2].transactions[0].extra)
        assert cu.candidate == select_candidate_head(c.lml, c.head)
        assert w.idbc.chain.state.clusters[0].candidate == cu.candidate


class TestMemberDisconnection:
    def test_results_move_to_backup_target(self, w):
        c = w.clusters[0]
        for p in range(1, 5):
            feed_tasks(c, w, p)
        lost = c.lml.keys()[3]
        assert len(c.member_results[lost]) == 4
        c.node(lost).alive = False
        target = select_backup_member(_after_disconnect(c, lost), {c.head, lost})
        before = len(c.member_results[target])
        member_disconnection_procedure(c, lost, w.idbc, w.env)
        assert len(c.member_results[target]) == before + 4
        assert c.member_results[lost] == []
        assert integrity_holds(c)
        assert c.lml.status(lost) == D and c.fingerprint(lost) in c.wgl.gray
        assert TxType.MEMBER_UAV_DISCONNECTED in tx_types(w)

    def test_empty_holder_changes_nothing(self, w):
        c = w.clusters[0]
        lost = c.lml.keys()[3]
        counts = {pk: len(v) for pk, v in c.member_results.items()}
        member_disconnection_procedure(c, lost, w.idbc, w.env)
        assert {pk: len(v) for pk, v in c.member_results.items()} == counts

    def test_head_is_refused(self, w):
        c = w.clusters[0]
        with pytest.raises(UseHeadProcedure):
            member_disconnection_procedure(c, c.head, w.idbc, w.env)

    def test_duplicate(self, w):
        c = w.clusters[0]
        lost = c.lml.keys()[3]
        member_disconnection_procedure(c, lost, w.idbc, w.env)
        with pytest.raises(DuplicateEvent):
            member_disconnection_procedure(c, lost, w.idbc, w.env)


def _after_disconnect(cluster, pk):
    copy = Lml(cluster.index, cluster.lml.keys())
    copy.entries = dict(cluster.lml.entries)
    copy.entries[pk] = D
    return copy


class TestHeadDisconnection:
    def test_member_takes_over(self, w):
        c = w.clusters[0]
        for p in range(1, 4):
            feed_tasks(c, w, p)
        old = c.head
        total = len(c.accepted)
        expected = w.idbc.chain.state.clusters[0].head_candidate()
        former = len(c.member_results[expected])
        c.node(old).alive = False
        head_disconnection_procedure(w.registry, c, w.idbc, w.env)
        assert c.head == expected != old
        assert w.registry.entries[0] == expected
        assert w.idbc.chain.state.heads()[0] == expected
        assert expected in w.idbc.nodes and old not in w.idbc.nodes
        assert len(c.backup_results()) == total
        assert c.member_results[expected] == []
        assert former > 0
        assert integrity_holds(c)
        assert c.fingerprint(old) in c.wgl.gray

    def test_two_uav_cluster_keeps_results_at_new_head(self):
        w = build_world(sizes=(2, 3, 3), suite=NULL)
        c = w.clusters[0]
        feed_tasks(c, w, 1)
        member = c.lml.keys()[1]
        c.node(c.head).alive = False
        head_disconnection_procedure(w.registry, c, w.idbc, w.env)
        assert c.head == member
        assert len(c.member_results[member]) == 1
        assert integrity_holds(c)
        assert any(e[2] == "no_backup_target" for e in w.env.events)

    def test_old_head_returns_as_member(self, w):
        c = w.clusters[0]
        old = c.node(c.head)
        old.alive = False
        head_disconnection_procedure(w.registry, c, w.idbc, w.env)
        new_head = c.head
        reconnection_procedure(c, make_claim(old, issue_challenge(c, w.env), NULL), w.idbc, w.env)
        assert c.lml.status(old.pk) == R
        assert c.head == new_head
        assert old.pk not in {pk for _, pk in w.registry.history[len(w.clusters):]}
        feed_tasks(c, w, 5)
        assert len(c.member_results[old.pk]) == 1


class TestReconnection:
    def _disconnect(self, w, index=2):
        c = w.clusters[0]
        node = c.node(c.lml.keys()[index])
        node.alive = False
        member_disconnection_procedure(c, node.pk, w.idbc, w.env)
        return c, node

    def test_legitimate(self, w):
        c, node = self._disconnect(w)
        epoch = c.cluster_key.epoch
        reconnection_procedure(c, make_claim(node, issue_challenge(c, w.env), NULL), w.idbc, w.env)
        assert c.lml.status(node.pk) == R
        assert c.cluster_key.epoch == epoch + 1 and node.cluster_key == c.cluster_key
        assert w.idbc.head_status(0, node.pk) == R
        assert c.fingerprint(node.pk) in c.wgl.gray
        assert c.auth_samples[-1].entries_touched == 2

    def test_unknown_key(self, w):
        c = w.clusters[0]
        version = c.lml.version
        intruder = UavNode(NULL.generate_keypair("intruder"), b"\x00" * 32, 0, -1)
        with pytest.raises(ReconnectionRejected) as info:
            reconnection_procedure(c, make_claim(intruder, issue_challenge(c, w.env), NULL), w.idbc, w.env)
        assert info.value.reason == "UnknownKey"
        assert c.lml.version == version

    def test_bad_signature_on_stale_challenge(self, w):
        c, node = self._disconnect(w)
        claim = make_claim(node, b"\x01" * 32, NULL)
        with pytest.raises(ReconnectionRejected) as info:
            reconnection_procedure(c, claim, w.idbc, w.env)
        assert info.value.reason == "BadSignature"

    def test_fingerprint_not_gray(self, w):
        c = w.clusters[0]
        node = c.node(c.lml.keys()[2])
        with pytest.raises(ReconnectionRejected) as info:
            reconnection_procedure(c, make_claim(node, issue_challenge(c, w.env), NULL), w.idbc, w.env)
        assert info.value.reason == "FingerprintNotGray"

    def test_status_not_disconnected(self, w):
        c, node = self._disconnect(w)
        reconnection_procedure(c, make_claim(node, issue_challenge(c, w.env), NULL), w.idbc, w.env)
        with pytest.raises(ReconnectionRejected) as info:
            reconnection_procedure(c, make_claim(node, issue_challenge(c, w.env), NULL), w.idbc, w.env)
        assert info.value.reason == "StatusNotDisconnected"

    def test_hijacked_stays_marked_and_idle(self, w):
        c, node = self._disconnect(w)
        node.hijacked = True
        epoch = c.cluster_key.epoch
        with pytest.raises(ReconnectionRejected) as info:
            reconnection_procedure(c, make_claim(node, issue_challenge(c, w.env), NULL), w.idbc, w.env)
        assert info.value.reason == "TestTaskFailed"
        assert c.lml.status(node.pk) == M
        assert w.idbc.head_status(0, node.pk) == M
        assert c.cluster_key.epoch == epoch
        for p in range(1, 4):
            feed_tasks(c, w, p)
        assert c.member_results[node.pk] == []
        assert all(r.producer != node.pk for r in c.accepted)


class TestTasks:
    def test_three_members_three_tasks(self):
        w = build_world(sizes=(4, 3, 3), suite=NULL)
        c = w.clusters[0]
        feed_tasks(c, w, 1)
        assert [len(c.member_results[pk]) for pk in c.connected_members()] == [1, 1, 1]
        assert len(c.backup_results()) == 3
        assert tx_types(w)[-1] == TxType.TASK_RECORD

    def test_results_are_ciphertext_under_cluster_key(self, w):
        c = w.clusters[0]
        feed_tasks(c, w, 1)
        for rec in c.accepted:
            plain = decrypt_result(c.cluster_key, rec.key_epoch, rec.task_id, rec.producer, rec.ciphertext)
            assert plain not in rec.ciphertext

    def test_gray_corruption_caught_and_requeued(self, w):
        c = w.clusters[0]
        node = c.node(c.lml.keys()[2])
        node.alive = False
        member_disconnection_procedure(c, node.pk, w.idbc, w.env)
        reconnection_procedure(c, make_claim(node, issue_challenge(c, w.env), NULL), w.idbc, w.env)
        node.hijacked = True
        feed_tasks(c, w, 1)
        assert c.member_results[node.pk] == []
        assert len(c.task_queue) == 1
        assert any(e[2] == "result_rejected" for e in w.env.events)
        assert integrity_holds(c)

    def test_stale_key_result_requeued(self, w):
        c = w.clusters[0]
        lagging = c.node(c.lml.keys()[1])
        lagging.cluster_key = ClusterKey(b"z" * 16, 99)
        feed_tasks(c, w, 1)
        assert c.member_results[lagging.pk] == []
        assert len(c.task_queue) == 1


OPS = st.lists(st.tuples(st.sampled_from(["tasks", "disconnect", "reconnect", "hijack", "head_down"]),
                         st.integers(0, 7)), min_size=1, max_size=14)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(OPS)
def test_random_schedules_keep_invariants(ops):
    """Random in-model fault schedules: only legal transitions, exact double
    backup, strictly increasing epochs, and no Reconnected UAV ever heads."""
    w = build_world(sizes=(8, 3, 3), suite=NULL)
    c = w.clusters[0]
    head_downs = 0
    for period, (op, idx) in enumerate(ops, start=1):
        keys = c.lml.keys()
        pk = keys[idx % len(keys)]
        node = c.node(pk)
        if op == "tasks":
            feed_tasks(c, w, period)
        elif op == "hijack":
            node.hijacked = True
        elif op == "disconnect" and pk != c.head and c.lml.status(pk) != D:
            node.alive = False
            member_disconnection_procedure(c, pk, w.idbc, w.env)
        elif op == "reconnect" and c.lml.status(pk) == D:
            node.alive = True
            try:
                reconnection_procedure(c, make_claim(node, issue_challenge(c, w.env), NULL), w.idbc, w.env)
            except ReconnectionRejected as exc:
                assert exc.reason == "TestTaskFailed" and node.hijacked
        elif op == "head_down" and head_downs == 0:
            if w.idbc.chain.state.clusters[0].head_candidate() is None:
                continue
            head_downs += 1
            c.node(c.head).alive = False
            head_disconnection_procedure(w.registry, c, w.idbc, w.env)
        assert integrity_holds(c)
        assert c.lml.status(c.head) != R
        for pk2 in c.quarantined:
            assert c.lml.status(pk2) == M
            assert all(r.producer != pk2 for r in c.accepted if r.period == period)
    assert all((old, new) in LEGAL_TRANSITIONS for _, old, new in c.lml.history)
    assert c.epoch_history == sorted(set(c.epoch_history))
