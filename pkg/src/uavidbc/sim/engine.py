"""The period loop: mobility, hellos, failure detection, faults, tasks and
per-period state dumps, all driven by one :class:`EventQueue`."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import random
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from ..consensus import Idbc, NoQuorum
from ..crypto import ClusterKey, sha256, suite_by_name
from ..ledger import ZERO_HASH, Chain, TxType, make_block, traversal_authenticate
from ..protocol import (
    ClusterHeadList,
    ClusterState,
    DuplicateEvent,
    HeadUnavailable,
    NoCandidate,
    ProtocolEnv,
    ReconnectionRejected,
    Task,
    UavNode,
    assign_and_collect,
    detect_disconnection,
    genesis_transactions,
    head_disconnection_procedure,
    issue_challenge,
    make_claim,
    member_disconnection_procedure,
    new_cluster,
    reconnection_procedure,
    run_key_update,
    task_workers,
)
from .energy import EnergyMeter, Rx, Tx
from .events import EventQueue
from .mobility import Cylinder, MobilityState, step_mobility
from .network import in_range
from .scenario import FaultEvent, InvalidScenario, Scenario, check_head_budget, validate

log = logging.getLogger(__name__)

PERIOD_MS = 10_000
TICK_MS = 1_000
MOBILITY_DT_S = 0.1
HELLO_TIMEOUT_MS = 3_000
TASK_OFFSET_MS = 8_500
DUMP_OFFSET_MS = 9_999
CLUSTER_SPACING_M = 2_500.0
HELLO_BYTES = 16

STATE_HEADER = ("period", "cluster", "uav_id", "status", "primary_count", "backup_count", "head_flag")
INTEGRITY_HEADER = ("period", "cluster", "accepted", "stored", "backup", "throughput", "ok")
ENERGY_HEADER = ("period", "uav_id", "joules")
AUTH_HEADER = ("period", "cluster", "uav_id", "lml_entries_touched", "traversal_blocks", "outcome")
ELECTION_HEADER = ("time_ms", "delay_ms")
EVENT_HEADER = ("time_ms", "cluster", "kind", "detail")
MOBILITY_HEADER = ("period", "uav_id", "x", "y", "z", "speed")


@dataclass(frozen=True)
class IntegrityRow:
    period: int
    cluster: int
    accepted: int
    stored: int
    backup: int
    throughput: int
    ok: bool


@dataclass
class RunReport:
    scenario: Scenario
    tables: dict[str, tuple[tuple, list[tuple]]]
    integrity: list[IntegrityRow]
    chl_history: list[tuple[int, bytes]]
    transitions: list[tuple[int, bytes, object, object]]
    epochs: dict[int, list[int]]
    chains: list[Chain]
    chain_bytes: bytes
    labels: dict[bytes, str]
    wall_seconds: float = 0.0

    def csv_bytes(self, name: str) -> bytes:
        header, rows = self.tables[name]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue().encode()

    def outputs(self) -> dict[str, bytes]:
        """Every deterministic output file, by name."""
        files = {f"{name}.csv": self.csv_bytes(name) for name in sorted(self.tables)}
        files["chain.bin"] = self.chain_bytes
        manifest = {
            "seed": self.scenario.seed,
            "config_hash": self.scenario.config_hash(),
            "scenario": self.scenario.to_dict(),
            "files": {k: hashlib.sha256(v).hexdigest() for k, v in sorted(files.items())},
        }
        files["manifest.json"] = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
        return files

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, data in self.outputs().items():
            (out / name).write_bytes(data)
            written.append(out / name)
        # wall-clock numbers vary run to run, so they stay out of the CSVs
        (out / "timing.json").write_text(json.dumps({"wall_seconds": round(self.wall_seconds, 3)}) + "\n")
        return written


def _fmt(x: float) -> str:
    return f"{x:.6f}"


class Engine:
    def __init__(self, scenario: Scenario):
        validate(scenario)
        self.sc = sc = scenario
        self.suite = suite_by_name(sc.crypto)
        seed = sc.seed
        self.mob_rng = random.Random(f"{seed}/mobility")
        self.task_rng = random.Random(f"{seed}/tasks")
        self.q = EventQueue()
        self.meter = EnergyMeter(sc.energy)
        self.events: list[tuple] = []
        self.env = ProtocolEnv(self.suite, random.Random(f"{seed}/protocol"), clock=lambda: int(self.q.now),
                               meter=self.meter, distance=self.distance, idbc_distance=CLUSTER_SPACING_M,
                               events=self.events)
        self.bs = self.suite.generate_keypair(f"{seed}/bs")
        self.clusters: list[ClusterState] = []
        self.bounds: list[Cylinder] = []
        self.mobility: dict[bytes, MobilityState] = {}
        self.labels: dict[bytes, str] = {}
        self.hello: dict[bytes, float] = {}
        keyring = {}
        lo, hi = sc.altitude_range_m
        vlo, vhi = sc.speed_range_mps
        for c in range(sc.cluster_count):
            box = Cylinder((c * CLUSTER_SPACING_M, 0.0), sc.area_radius_m, lo, hi, vlo, vhi)
            self.bounds.append(box)
            nodes = []
            for i in range(sc.uavs_per_cluster):
                kp = self.suite.generate_keypair(f"{seed}/uav/{c}/{i}")
                node = UavNode(kp, sha256(f"{seed}/fingerprint/{c}/{i}".encode()), c, i)
                nodes.append(node)
                keyring[kp.public_key] = kp
                self.labels[kp.public_key] = node.label
                self.mobility[kp.public_key] = self._spawn(box, head=(i == 0))
                self.hello[kp.public_key] = 0.0
            ck = ClusterKey(self.env.rng.getrandbits(128).to_bytes(16, "big"), 0)
            self.clusters.append(new_cluster(c, nodes, nodes[0].pk, ck))
        genesis = Chain(self.suite)
        genesis.append(make_block(0, ZERO_HASH, self.bs.public_key, 0,
                                  genesis_transactions(self.suite, self.bs, self.clusters)))
        self.idbc = Idbc(genesis, keyring, random.Random(f"{seed}/consensus"), sc.consensus,
                         clock=lambda: self.q.now, on_chain_copy=self._chain_copied)
        self.registry = ClusterHeadList()
        for c in self.clusters:
            self.registry.set(c.index, c.head)
        self.head_losses = 0
        self.next_task = [0] * sc.cluster_count
        self.foreign_count = 0
        self.faults_by_period: dict[int, list[FaultEvent]] = {}
        for f in sc.faults:
            self.faults_by_period.setdefault(f.period, []).append(f)
        self.accepted_before = [0] * sc.cluster_count

        self.state_rows: list[tuple] = []
        self.integrity: list[IntegrityRow] = []
        self.energy_rows: list[tuple] = []
        self.auth_rows: list[tuple] = []
        self.mobility_rows: list[tuple] = []

    # -- world -----------------------------------------------------------------

    def _spawn(self, box: Cylinder, head: bool) -> MobilityState:
        rng = self.mob_rng
        cx, cy = box.center
        if head:
            pos = (cx, cy, (box.z_min + box.z_max) / 2)
        else:
            r = box.radius * math.sqrt(rng.random())
            th = rng.uniform(0, 2 * math.pi)
            pos = (cx + r * math.cos(th), cy + r * math.sin(th), rng.uniform(box.z_min, box.z_max))
        speed = rng.uniform(box.v_min, box.v_min + (box.v_max - box.v_min) / 3)
        th = rng.uniform(0, 2 * math.pi)
        mean = (speed * math.cos(th), speed * math.sin(th), 0.0)
        return MobilityState(pos, mean, mean_velocity=mean)

    def distance(self, a: bytes, b: bytes) -> float:
        return math.dist(self.mobility[a].position, self.mobility[b].position)

    def _reachable(self, a: bytes, b: bytes) -> bool:
        return in_range(self.mobility[a].position, self.mobility[b].position, self.sc.latency)

    def _chain_copied(self, pk: bytes, nbytes: int) -> None:
        self.meter.charge(pk, Rx(nbytes))

    def _node(self, pk: bytes) -> UavNode:
        return self.clusters[self._cluster_of(pk)].node(pk)

    def _cluster_of(self, pk: bytes) -> int:
        return int(self.labels[pk][1:].split("-")[0])

    # -- event handlers ------------------------------------------------------------

    def _resolve(self, f: FaultEvent) -> bytes | None:
        cluster = self.clusters[f.cluster]
        if f.uav == "head":
            return cluster.head
        return cluster.lml.keys()[f.uav]

    def on_faults(self, period: int) -> None:
        faults = self.faults_by_period.get(period, [])
        per_cluster: dict[int, list[bytes]] = {}
        for f in faults:
            if f.event == "disconnect":
                target = self._resolve(f)
                if target is not None:
                    per_cluster.setdefault(f.cluster, []).append(target)
        for c, targets in sorted(per_cluster.items()):
            head = self.clusters[c].head
            if head in targets:
                if len(targets) > 1:
                    raise InvalidScenario("threat-model violation",
                                          f"head and member of cluster {c} disconnect together in period {period}")
                self.head_losses += 1
                check_head_budget(self.head_losses, self.sc.cluster_count)

        for c in self.clusters:
            if c.needs_key_update and c.head is not None:
                try:
                    run_key_update(c, self.idbc, self.env)
                except NoQuorum:
                    self.env.note("no_quorum", c.index, "key update deferred")

        for f in faults:
            cluster = self.clusters[f.cluster]
            if f.event == "foreign_attack":
                self._foreign_attack(cluster, period)
                continue
            target = self._resolve(f)
            if target is None:
                self.env.note("fault_skipped", f.cluster, f"{f.event}: cluster has no head")
                continue
            node = cluster.node(target)
            if f.event == "disconnect":
                node.alive = False
                self.env.note("fault_disconnect", f.cluster, node.label)
            elif f.event == "hijack":
                node.hijacked = True
                self.env.note("fault_hijack", f.cluster, node.label)
            elif f.event == "reconnect":
                self._reconnect(cluster, node, period)

    def _auth_row(self, period: int, cluster: ClusterState, label: str, pk: bytes, outcome: str) -> None:
        touched = cluster.auth_samples[-1].entries_touched if cluster.auth_samples else 0
        _, visited = traversal_authenticate(self.idbc.chain, pk, TxType.INITIALIZATION)
        self.auth_rows.append((period, cluster.index, label, touched, visited, outcome))

    def _reconnect(self, cluster: ClusterState, node: UavNode, period: int) -> None:
        if cluster.head is None:
            self.env.note("fault_skipped", cluster.index, f"reconnect {node.label}: cluster has no head")
            return
        node.alive = True
        self.hello[node.pk] = self.q.now
        challenge = issue_challenge(cluster, self.env)
        claim = make_claim(node, challenge, self.suite)
        try:
            reconnection_procedure(cluster, claim, self.idbc, self.env)
            outcome = "accepted"
        except ReconnectionRejected as exc:
            outcome = exc.reason
        except NoQuorum:
            outcome = "NoQuorum"
            self.env.note("no_quorum", cluster.index, f"reconnect {node.label}")
        self._auth_row(period, cluster, node.label, node.pk, outcome)

    def _foreign_attack(self, cluster: ClusterState, period: int) -> None:
        if cluster.head is None:
            return
        self.foreign_count += 1
        kp = self.suite.generate_keypair(f"{self.sc.seed}/foreign/{self.foreign_count}")
        intruder = UavNode(kp, sha256(f"foreign/{self.foreign_count}".encode()), cluster.index, -1)
        claim = make_claim(intruder, issue_challenge(cluster, self.env), self.suite)
        try:
            reconnection_procedure(cluster, claim, self.idbc, self.env)
            outcome = "accepted"
        except ReconnectionRejected as exc:
            outcome = exc.reason
        self._auth_row(period, cluster, "foreign", kp.public_key, outcome)

    def on_tick(self, now: float) -> None:
        for _ in range(round(TICK_MS / 1000 / MOBILITY_DT_S)):
            for c, cluster in enumerate(self.clusters):
                box = self.bounds[c]
                for pk in cluster.lml.keys():
                    self.mobility[pk] = step_mobility(self.mobility[pk], MOBILITY_DT_S, self.mob_rng, box)
        for cluster in self.clusters:
            head = cluster.head
            if head is not None and cluster.node(head).alive:
                self.hello[head] = now
            for pk in cluster.monitored():
                node = cluster.node(pk)
                if node.alive and head is not None and self._reachable(pk, head):
                    self.meter.charge(pk, Tx(HELLO_BYTES, self.distance(pk, head)))
                    self.hello[pk] = now
        for cluster in self.clusters:
            self._detect(cluster, now)

    def _detect(self, cluster: ClusterState, now: float) -> None:
        head = cluster.head
        if head is None:
            return
        if not cluster.node(head).alive:
            if now - self.hello[head] > HELLO_TIMEOUT_MS:
                try:
                    head_disconnection_procedure(self.registry, cluster, self.idbc, self.env)
                except NoQuorum:
                    self.env.note("no_quorum", cluster.index, "head replacement waits")
                except NoCandidate:
                    pass
            return

        def probe(pk):
            return cluster.node(pk).alive and self._reachable(pk, head)

        for pk in detect_disconnection(cluster, self.hello, now, HELLO_TIMEOUT_MS, probe):
            try:
                member_disconnection_procedure(cluster, pk, self.idbc, self.env)
            except NoQuorum:
                cluster.needs_key_update = True
                self.env.note("no_quorum", cluster.index, "key update deferred")
            except (DuplicateEvent, HeadUnavailable):
                pass

    def on_tasks(self, period: int) -> None:
        for cluster in self.clusters:
            if cluster.head is None:
                continue
            for _ in range(self.sc.task_rate * len(task_workers(cluster))):
                tid = self.next_task[cluster.index]
                self.next_task[cluster.index] += 1
                cluster.task_queue.append(Task(tid, self.task_rng.getrandbits(128).to_bytes(16, "big")))
            assign_and_collect(cluster, period, self.env, self.idbc, self.sc.task_rate)

    def on_dump(self, period: int) -> None:
        for cluster in self.clusters:
            present = set(cluster.present())
            for pk in cluster.lml.keys():
                status = cluster.lml.status(pk)
                primary = len(cluster.member_results.get(pk, ())) if pk in present else 0
                is_head = pk == cluster.head
                backup = len(cluster.backup_results()) if is_head else 0
                self.state_rows.append((period, cluster.index, self.labels[pk], str(status), primary, backup,
                                        int(is_head)))
            accepted = Counter(cluster.accepted)
            stored = Counter(cluster.stored_results())
            backup = Counter(cluster.backup_results())
            throughput = len(cluster.accepted) - self.accepted_before[cluster.index]
            self.accepted_before[cluster.index] = len(cluster.accepted)
            self.integrity.append(IntegrityRow(period, cluster.index, sum(accepted.values()),
                                               sum(stored.values()), sum(backup.values()), throughput,
                                               accepted == stored == backup))
        for pk, label in self.labels.items():
            self.energy_rows.append((period, label, f"{self.meter.total(pk):.12e}"))
            m = self.mobility[pk]
            x, y, z = m.position
            self.mobility_rows.append((period, label, _fmt(x), _fmt(y), _fmt(z), _fmt(m.speed)))

    # -- loop ------------------------------------------------------------------------

    def run(self) -> RunReport:
        started = time.perf_counter()
        for period in range(1, self.sc.periods + 1):
            t0 = (period - 1) * PERIOD_MS
            self.q.push(t0, ("faults", period))
            for k in range(PERIOD_MS // TICK_MS):
                self.q.push(t0 + k * TICK_MS, ("tick", period))
            self.q.push(t0 + TASK_OFFSET_MS, ("tasks", period))
            self.q.push(t0 + DUMP_OFFSET_MS, ("dump", period))
            while self.q:
                now, (kind, p) = self.q.pop()
                if kind == "faults":
                    self.on_faults(p)
                elif kind == "tick":
                    self.on_tick(now)
                elif kind == "tasks":
                    self.on_tasks(p)
                elif kind == "dump":
                    self.on_dump(p)
        return self._report(time.perf_counter() - started)

    def _report(self, wall: float) -> RunReport:
        tables = {
            "states": (STATE_HEADER, self.state_rows),
            "integrity": (INTEGRITY_HEADER, [(r.period, r.cluster, r.accepted, r.stored, r.backup, r.throughput,
                                               int(r.ok)) for r in self.integrity]),
            "energy": (ENERGY_HEADER, self.energy_rows),
            "auth": (AUTH_HEADER, self.auth_rows),
            "elections": (ELECTION_HEADER, [(_fmt(t), _fmt(d)) for t, d in self.idbc.elections]),
            "events": (EVENT_HEADER, [(f"{t}", c, k, d) for t, c, k, d in self.events]),
            "mobility": (MOBILITY_HEADER, self.mobility_rows),
        }
        transitions = [(c.index, pk, old, new) for c in self.clusters for pk, old, new in c.lml.history]
        return RunReport(
            scenario=self.sc, tables=tables, integrity=self.integrity,
            chl_history=list(self.registry.history), transitions=transitions,
            epochs={c.index: list(c.epoch_history) for c in self.clusters},
            chains=[n.chain for n in self.idbc.all_nodes()], chain_bytes=self.idbc.chain.to_bytes(),
            labels=dict(self.labels), wall_seconds=wall)


def run(scenario: Scenario) -> RunReport:
    """Execute ``scenario``; raises InvalidScenario on threat-model violations."""
    return Engine(scenario).run()


def inject_attack(scenario: Scenario, kind: str, cluster: int, period: int, uav: int | str = 1) -> Scenario:
    """Schedule an attack. ``foreign`` sends an unregistered UAV to reconnect;
    ``hijack`` corrupts ``uav`` from ``period`` on."""
    if kind not in ("foreign", "hijack"):
        raise ValueError(f"unknown attack {kind!r}")
    if not 0 <= cluster < scenario.cluster_count:
        raise InvalidScenario("schema", f"cluster {cluster} does not exist")
    event = FaultEvent(period, cluster, uav if kind == "hijack" else "head",
                       "hijack" if kind == "hijack" else "foreign_attack")
    d = scenario.to_dict()
    d["faults"] = d["faults"] + [vars(event).copy()]
    return Scenario.from_dict(d)
