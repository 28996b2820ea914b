"""Per-UAV energy accounting.

Coefficients are placeholders (the shapes of the curves matter, not the
joules): transmit costs ``e_tx * bytes * (d / d_ref) ** gamma``, receive
``e_rx * bytes``, hashing ``e_hash * bytes``, and each signature or
point multiplication a flat amount.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Union


@dataclass(frozen=True)
class EnergyParams:
    e_tx: float = 50e-9
    e_rx: float = 50e-9
    e_sign: float = 5e-3
    e_verify: float = 10e-3
    e_hash: float = 1e-9
    gamma: float = 2.0
    d_ref: float = 1.0


class Tx(NamedTuple):
    nbytes: int
    dist: float


class Rx(NamedTuple):
    nbytes: int


class Sign(NamedTuple):
    pass


class Verify(NamedTuple):
    pass


class Hash(NamedTuple):
    nbytes: int


Action = Union[Tx, Rx, Sign, Verify, Hash]


def cost(params: EnergyParams, action: Action) -> float:
    if isinstance(action, Tx):
        return params.e_tx * action.nbytes * (action.dist / params.d_ref) ** params.gamma
    if isinstance(action, Rx):
        return params.e_rx * action.nbytes
    if isinstance(action, Sign):
        return params.e_sign
    if isinstance(action, Verify):
        return params.e_verify
    if isinstance(action, Hash):
        return params.e_hash * action.nbytes
    raise TypeError(f"unknown energy action {action!r}")


@dataclass
class EnergyMeter:
    params: EnergyParams = field(default_factory=EnergyParams)
    joules: dict = field(default_factory=dict)
    events: Counter = field(default_factory=Counter)

    def charge(self, uav, action: Action) -> float:
        j = cost(self.params, action)
        if j < 0:
            raise ValueError("negative energy cost")
        self.joules[uav] = self.joules.get(uav, 0.0) + j
        self.events[(uav, type(action).__name__)] += 1
        return j

    def total(self, uav) -> float:
        return self.joules.get(uav, 0.0)

    def count(self, uav, kind: str) -> int:
        return self.events[(uav, kind)]

    def snapshot(self) -> dict:
        return dict(self.joules)


def charge(meter: EnergyMeter, uav, action: Action) -> EnergyMeter:
    meter.charge(uav, action)
    return meter
