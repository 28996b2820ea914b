"""Scenario files: JSON documents describing one simulated mission.

Schema (every key except ``periods`` optional)::

    {
      "seed": 7,
      "cluster_count": 3,
      "uavs_per_cluster": 11,          # head + members
      "periods": 50,
      "task_rate": 1,                  # tasks per eligible member per period
      "area_radius_m": 1000,
      "altitude_range_m": [200, 1000],
      "speed_range_mps": [0, 30],
      "crypto": "ecc",                 # or "null" for fast hash-based stand-ins
      "faults": [
        {"period": 14, "cluster": 0, "uav": "head", "event": "disconnect"},
        {"period": 49, "cluster": 0, "uav": 6, "event": "disconnect"}
      ],
      "energy": {"e_tx": 5e-08},
      "latency": {"base_ms": 2.0},
      "consensus": {"rotation_period": 10}
    }

``uav`` is either ``"head"`` (whoever heads the cluster when the event fires)
or a registration index, 0 being the initial head.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from ..consensus import ConsensusParams, LatencyModel
from .energy import EnergyParams
from .network import LinkParams

EVENTS = ("disconnect", "reconnect", "foreign_attack", "hijack")


class InvalidScenario(ValueError):
    """Scenario rejected before (or while) running; ``reason`` is a short tag."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class ScenarioParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None, source: str = ""):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}" + (f"\n  {source}" if source else ""))
        self.line = line
        self.column = column


@dataclass(frozen=True)
class FaultEvent:
    period: int
    cluster: int
    uav: str | int
    event: str

    @property
    def targets_head(self) -> bool:
        return self.uav == "head"


@dataclass
class Scenario:
    periods: int
    seed: int = 0
    cluster_count: int = 3
    uavs_per_cluster: int = 11
    task_rate: int = 1
    area_radius_m: float = 1000.0
    altitude_range_m: tuple[float, float] = (200.0, 1000.0)
    speed_range_mps: tuple[float, float] = (0.0, 30.0)
    crypto: str = "ecc"
    faults: list[FaultEvent] = field(default_factory=list)
    energy: EnergyParams = field(default_factory=EnergyParams)
    latency: LinkParams = field(default_factory=LinkParams)
    consensus: ConsensusParams = field(default_factory=ConsensusParams)

    def with_seed(self, seed: int) -> "Scenario":
        d = self.to_dict()
        d["seed"] = seed
        return Scenario.from_dict(d)

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed, "cluster_count": self.cluster_count, "uavs_per_cluster": self.uavs_per_cluster,
            "periods": self.periods, "task_rate": self.task_rate, "area_radius_m": self.area_radius_m,
            "altitude_range_m": list(self.altitude_range_m), "speed_range_mps": list(self.speed_range_mps),
            "crypto": self.crypto, "faults": [asdict(f) for f in self.faults],
            "energy": asdict(self.energy), "latency": asdict(self.latency),
        }
        cons = asdict(self.consensus)
        cons["latency"] = asdict(self.consensus.latency)
        d["consensus"] = cons
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if not isinstance(d, dict):
            raise InvalidScenario("schema", "top level must be an object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidScenario("schema", f"unknown keys {sorted(unknown)}")
        if "periods" not in d:
            raise InvalidScenario("schema", "periods is required")
        kw = dict(d)
        try:
            kw["faults"] = [_fault(f) for f in d.get("faults", [])]
            kw["energy"] = _params(EnergyParams, d.get("energy", {}))
            kw["latency"] = _params(LinkParams, d.get("latency", {}))
            cons = dict(d.get("consensus", {}))
            if "latency" in cons:
                cons["latency"] = _params(LatencyModel, cons["latency"])
            if "election_timeout_ms" in cons:
                cons["election_timeout_ms"] = tuple(float(x) for x in cons["election_timeout_ms"])
            kw["consensus"] = _params(ConsensusParams, cons)
            for k in ("altitude_range_m", "speed_range_mps"):
                if k in kw:
                    lo, hi = kw[k]
                    kw[k] = (float(lo), float(hi))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidScenario):
                raise
            raise InvalidScenario("schema", str(exc)) from None
        sc = cls(**kw)
        validate(sc)
        return sc


def _params(kind, values: dict):
    if not isinstance(values, dict):
        raise InvalidScenario("schema", f"{kind.__name__} block must be an object")
    names = {f.name for f in fields(kind)}
    bad = set(values) - names
    if bad:
        raise InvalidScenario("schema", f"unknown {kind.__name__} keys {sorted(bad)}")
    return kind(**values)


def _fault(raw) -> FaultEvent:
    if not isinstance(raw, dict) or set(raw) != {"period", "cluster", "uav", "event"}:
        raise InvalidScenario("schema", f"fault entries need period, cluster, uav, event: {raw!r}")
    uav = raw["uav"]
    if not (uav == "head" or (isinstance(uav, int) and not isinstance(uav, bool))):
        raise InvalidScenario("schema", f"uav must be 'head' or an index: {uav!r}")
    if raw["event"] not in EVENTS:
        raise InvalidScenario("schema", f"unknown event {raw['event']!r}")
    return FaultEvent(int(raw["period"]), int(raw["cluster"]), uav, raw["event"])


def validate(sc: Scenario) -> Scenario:
    """Static checks, including the threat model. Index-designated faults
    that turn out to hit the current head are re-checked at run time."""
    if sc.periods < 1:
        raise InvalidScenario("schema", "periods must be >= 1")
    if sc.cluster_count < 1 or sc.uavs_per_cluster < 2:
        raise InvalidScenario("schema", "need at least one cluster of two UAVs")
    if sc.task_rate < 0:
        raise InvalidScenario("schema", "task_rate must be >= 0")
    if sc.crypto not in ("ecc", "null"):
        raise InvalidScenario("schema", f"unknown crypto suite {sc.crypto!r}")
    lo, hi = sc.altitude_range_m
    vlo, vhi = sc.speed_range_mps
    if not (0 <= lo < hi) or not (0 <= vlo <= vhi) or sc.area_radius_m <= 0:
        raise InvalidScenario("schema", "bad area, altitude or speed range")

    head_moved: set[int] = set()
    head_losses = 0
    by_slot: dict[tuple[int, int], list[FaultEvent]] = {}
    for f in sorted(sc.faults, key=lambda f: f.period):
        if not 1 <= f.period <= sc.periods:
            raise InvalidScenario("schema", f"fault period {f.period} outside 1..{sc.periods}")
        if not 0 <= f.cluster < sc.cluster_count:
            raise InvalidScenario("schema", f"fault cluster {f.cluster} does not exist")
        if f.uav != "head" and not 0 <= f.uav < sc.uavs_per_cluster:
            raise InvalidScenario("schema", f"fault uav index {f.uav} does not exist")
        by_slot.setdefault((f.period, f.cluster), []).append(f)

    for (period, cluster), events in sorted(by_slot.items()):
        drops = [f for f in events if f.event == "disconnect"]
        heads = [f for f in drops if f.targets_head or (f.uav == 0 and cluster not in head_moved)]
        if heads and len(drops) > 1:
            raise InvalidScenario("threat-model violation",
                                  f"head and member of cluster {cluster} disconnect together in period {period}")
        if heads:
            head_losses += 1
            head_moved.add(cluster)
    check_head_budget(head_losses, sc.cluster_count)
    return sc


def check_head_budget(head_losses: int, cluster_count: int) -> None:
    if head_losses > cluster_count // 2:
        raise InvalidScenario("threat-model violation",
                              f"{head_losses} head disconnections exceed half of {cluster_count} heads")


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_scenario(text)


def parse_scenario(text: str) -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        src = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise ScenarioParseError(exc.msg, exc.lineno, exc.colno, src) from None
    return Scenario.from_dict(data)
