"""Experiment presets. Each is a pure function of (name, seed) and writes
plot-ready CSV files into an output directory.

robustness_table2
    ``table2.csv``: period, one primary-store count per UAV of cluster 0,
    the head's backup count and the members' total, plus the full run
    report of the underlying scenario.
delay_election_fig6a
    ``fig6a_samples.csv`` (protocol, cluster_count, sample_idx, delay_ms)
    and ``fig6a.csv`` (protocol, cluster_count, mean_delay_ms).
delay_auth_fig6b
    ``fig6b.csv``: chain_blocks, method, work_units. Wall-clock timings go to
    ``fig6b_timing.json`` because they are not reproducible.
energy_cluster_fig7a / energy_keylen_fig7b
    ``fig7a.csv`` (cluster_size, head_joules, member_joules) and
    ``fig7b.csv`` (key_len, head_joules, member_joules): energy spent during
    one member-disconnection procedure.
"""
from __future__ import annotations

import csv
import io
import json
import math
import random
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .consensus import ConsensusParams, Idbc, election_sweep
from .crypto import ECC, NULL, ClusterKey, CryptoSuite, sha256
from .ledger import (
    ZERO_HASH,
    Chain,
    TaskEntry,
    TaskRecordPayload,
    TxType,
    UavStatus,
    build_transaction,
    make_block,
    traversal_authenticate,
)
from .protocol import (
    ClusterState,
    ProtocolEnv,
    UavNode,
    authenticate_claim,
    genesis_transactions,
    issue_challenge,
    make_claim,
    member_disconnection_procedure,
    new_cluster,
)
from .sim.energy import EnergyMeter
from .sim.engine import run
from .sim.scenario import Scenario

PRESETS = ("robustness_table2", "delay_election_fig6a", "delay_auth_fig6b",
           "energy_cluster_fig7a", "energy_keylen_fig7b")

ELECTION_COUNTS = tuple(range(4, 33, 4))
ELECTION_SAMPLES = 30
ELECTION_PROTOCOLS = ("raft", "pow", "pos")
AUTH_CHAIN_SIZES = (100, 1_000, 5_000, 10_000)
ENERGY_CLUSTER_SIZES = tuple(range(5, 51, 5))
ENERGY_KEY_LENGTHS = (33, 65, 97)
ENERGY_FIXED_SIZE = 11
RING_RADIUS_M = 500.0


class UnknownPreset(ValueError):
    pass


@dataclass
class PresetResult:
    name: str
    files: dict[str, bytes]
    extra: dict[str, str]

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for fname, data in sorted(self.files.items()):
            (out / fname).write_bytes(data)
            paths.append(out / fname)
        for fname, text in sorted(self.extra.items()):
            (out / fname).write_text(text)
        return paths


def _csv(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


def _fan_out(fn: Callable, items, workers: int) -> list:
    """Map in worker threads; results come back in input order."""
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- robustness ----------------------------------------------------------------

def table2_scenario(seed: int) -> Scenario:
    """Three clusters of 11 UAVs; cluster 0 loses its head in period 14
    (which reconnects as a member in period 20) and UAV6 in period 49."""
    return Scenario.from_dict({
        "seed": seed, "cluster_count": 3, "uavs_per_cluster": 11, "periods": 50, "task_rate": 1,
        "faults": [
            {"period": 14, "cluster": 0, "uav": "head", "event": "disconnect"},
            {"period": 20, "cluster": 0, "uav": 0, "event": "reconnect"},
            {"period": 49, "cluster": 0, "uav": 6, "event": "disconnect"},
        ],
    })


def table2_matrix(report, cluster: int = 0) -> tuple[tuple, list[tuple]]:
    header_rows = [r for r in report.tables["states"][1] if r[1] == cluster]
    labels = [r[2] for r in header_rows if r[0] == 1]
    header = ("period", *labels, "head_uav", "head_backup", "member_total")
    rows = []
    by_period: dict[int, list[tuple]] = {}
    for r in header_rows:
        by_period.setdefault(r[0], []).append(r)
    for period in sorted(by_period):
        entries = by_period[period]
        head = next((r for r in entries if r[6] == 1), None)
        members = [r[4] for r in entries if r[6] == 0]
        rows.append((period, *[r[4] for r in entries], head[2] if head else "",
                     head[5] if head else 0, sum(members)))
    return header, rows


def robustness_table2(seed: int, workers: int = 1) -> PresetResult:
    report = run(table2_scenario(seed))
    files = report.outputs()
    files["table2.csv"] = _csv(*table2_matrix(report))
    return PresetResult("robustness_table2", files,
                        {"timing.json": json.dumps({"wall_seconds": round(report.wall_seconds, 3)}) + "\n"})


# -- election delay --------------------------------------------------------------

def delay_election_fig6a(seed: int, workers: int = 1, params: ConsensusParams = ConsensusParams()) -> PresetResult:
    grid = [(p, n) for p in ELECTION_PROTOCOLS for n in ELECTION_COUNTS]
    stats = _fan_out(lambda pn: election_sweep(pn[0], pn[1], ELECTION_SAMPLES, seed, params), grid, workers)
    samples = [row for s in stats for row in s.csv_rows()]
    summary = [(s.protocol, s.cluster_count, f"{s.delay_ms:.6f}") for s in stats]
    return PresetResult("delay_election_fig6a", {
        "fig6a_samples.csv": _csv(("protocol", "cluster_count", "sample_idx", "delay_ms"), samples),
        "fig6a.csv": _csv(("protocol", "cluster_count", "mean_delay_ms"), summary),
    }, {})


# -- authentication delay --------------------------------------------------------

@dataclass
class AuthPoint:
    chain_blocks: int
    lml_work: int
    traversal_work: int
    lml_seconds: float
    traversal_seconds: float


def _registered_cluster(suite: CryptoSuite, seed, index: int, size: int) -> tuple[list[UavNode], ClusterState]:
    nodes = [UavNode(suite.generate_keypair(f"{seed}/{index}/{i}"), sha256(f"{seed}/fp/{index}/{i}".encode()),
                     index, i) for i in range(size)]
    ck = ClusterKey(sha256(f"{seed}/ck/{index}".encode())[:16], 0)
    return nodes, new_cluster(index, nodes, nodes[0].pk, ck)


def build_auth_chain(blocks: int, seed: int, suite: CryptoSuite = NULL, size: int = 11):
    """A validated chain of ``blocks`` blocks: genesis plus task records."""
    bs = suite.generate_keypair(f"{seed}/bs")
    nodes, cluster = _registered_cluster(suite, seed, 0, size)
    chain = Chain(suite)
    chain.append(make_block(0, ZERO_HASH, bs.public_key, 0, genesis_transactions(suite, bs, [cluster])))
    head = nodes[0]
    for h in range(1, blocks):
        entry = TaskEntry(h, nodes[1 + h % (size - 1)].pk, sha256(h.to_bytes(8, "big")))
        tx = build_transaction(suite, head.keypair.secret_key, tx_type=TxType.TASK_RECORD, cluster_index=0,
                               generator=head.pk, public_key=head.pk, timestamp=h,
                               input_address=chain.input_address_for(head.pk),
                               extra=TaskRecordPayload(h, (entry,)).encode())
        chain.append(make_block(h, chain.tip_hash, head.pk, h, [tx]))
    return chain, nodes, cluster


def auth_point(blocks: int, seed: int) -> AuthPoint:
    chain, nodes, cluster = build_auth_chain(blocks, seed)
    env = ProtocolEnv(NULL, random.Random(f"{seed}/auth"))
    target = nodes[1]
    cluster.lml.set_status(target.pk, UavStatus.DISCONNECTED)
    cluster.wgl.move_to_gray(target.fingerprint)
    claim = make_claim(target, issue_challenge(cluster, env), NULL)
    t = time.perf_counter()
    work = authenticate_claim(cluster, claim, env)
    t_lml = time.perf_counter() - t
    t = time.perf_counter()
    found, visited = traversal_authenticate(chain, target.pk, TxType.INITIALIZATION)
    t_trav = time.perf_counter() - t
    assert found
    return AuthPoint(len(chain), work, visited, t_lml, t_trav)


def delay_auth_fig6b(seed: int, workers: int = 1) -> PresetResult:
    points = _fan_out(lambda n: auth_point(n, seed), AUTH_CHAIN_SIZES, workers)
    rows = []
    for p in points:
        rows.append((p.chain_blocks, "lml_lookup", p.lml_work))
        rows.append((p.chain_blocks, "traversal", p.traversal_work))
    timing = {str(p.chain_blocks): {"lml_lookup_s": p.lml_seconds, "traversal_s": p.traversal_seconds}
              for p in points}
    return PresetResult("delay_auth_fig6b", {"fig6b.csv": _csv(("chain_blocks", "method", "work_units"), rows)},
                        {"fig6b_timing.json": json.dumps(timing, indent=2) + "\n"})


# -- energy ------------------------------------------------------------------------

@dataclass
class EnergyPoint:
    cluster_size: int
    key_len: int
    head_joules: float
    member_joules: float


def ring_world(cluster_size: int, key_len: int, seed: int, suite: CryptoSuite = ECC):
    """Cluster 0 of ``cluster_size`` UAVs (head at the centre, members evenly
    on a ring) plus two minimal clusters so the ledger has a quorum."""
    bs = suite.generate_keypair(f"{seed}/bs")
    clusters, keyring, positions = [], {}, {}
    for index, size in enumerate((cluster_size, 2, 2)):
        nodes, cluster = _registered_cluster(suite, seed, index, size)
        clusters.append(cluster)
        cx = index * 2500.0
        for i, n in enumerate(nodes):
            keyring[n.pk] = n.keypair
            if i == 0:
                positions[n.pk] = (cx, 0.0, 600.0)
            else:
                a = 2 * math.pi * (i - 1) / (size - 1)
                positions[n.pk] = (cx + RING_RADIUS_M * math.cos(a), RING_RADIUS_M * math.sin(a), 600.0)
    chain = Chain(suite)
    chain.append(make_block(0, ZERO_HASH, bs.public_key, 0, genesis_transactions(suite, bs, clusters)))
    idbc = Idbc(chain, keyring, random.Random(f"{seed}/consensus"), clock=lambda: 1)
    meter = EnergyMeter()
    env = ProtocolEnv(suite, random.Random(f"{seed}/energy/{cluster_size}/{key_len}"), clock=lambda: 1,
                      meter=meter, distance=lambda a, b: math.dist(positions[a], positions[b]), key_len=key_len)
    return clusters, idbc, env, meter


def energy_point(cluster_size: int, key_len: int, seed: int) -> EnergyPoint:
    clusters, idbc, env, meter = ring_world(cluster_size, key_len, seed)
    cluster = clusters[0]
    lost = cluster.lml.keys()[1]
    cluster.node(lost).alive = False
    member_disconnection_procedure(cluster, lost, idbc, env)
    members = cluster.connected_members()
    return EnergyPoint(cluster_size, key_len, meter.total(cluster.head),
                       statistics.median(meter.total(pk) for pk in members))


def _energy_csv(points, axis: str) -> bytes:
    rows = [(getattr(p, axis), f"{p.head_joules:.9e}", f"{p.member_joules:.9e}") for p in points]
    return _csv((axis, "head_joules", "member_joules"), rows)


def energy_cluster_fig7a(seed: int, workers: int = 1) -> PresetResult:
    points = _fan_out(lambda n: energy_point(n, 33, seed), ENERGY_CLUSTER_SIZES, workers)
    return PresetResult("energy_cluster_fig7a", {"fig7a.csv": _energy_csv(points, "cluster_size")}, {})


def energy_keylen_fig7b(seed: int, workers: int = 1) -> PresetResult:
    points = _fan_out(lambda k: energy_point(ENERGY_FIXED_SIZE, k, seed), ENERGY_KEY_LENGTHS, workers)
    return PresetResult("energy_keylen_fig7b", {"fig7b.csv": _energy_csv(points, "key_len")}, {})


def run_preset(name: str, seed: int, workers: int = 1) -> PresetResult:
    fn = {
        "robustness_table2": robustness_table2,
        "delay_election_fig6a": delay_election_fig6a,
        "delay_auth_fig6b": delay_auth_fig6b,
        "energy_cluster_fig7a": energy_cluster_fig7a,
        "energy_keylen_fig7b": energy_keylen_fig7b,
    }.get(name)
    if fn is None:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return fn(seed, workers=workers)
