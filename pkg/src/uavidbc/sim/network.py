from __future__ import annotations

import math
import random
from dataclasses import dataclass


@dataclass(frozen=True)
class LinkParams:
    base_ms: float = 2.0
    propagation_mps: float = 3.0e8
    jitter_ms: float = 0.5
    radio_range_m: float = 2500.0


def distance(a, b) -> float:
    return math.dist(a, b)


def link_delay(a, b, params: LinkParams = LinkParams(), rng: random.Random | None = None) -> float:
    """One-way delay in simulated ms; jitter only when an rng is supplied."""
    d = params.base_ms + distance(a, b) / params.propagation_mps * 1000.0
    if rng is not None and params.jitter_ms > 0:
        d += rng.uniform(-params.jitter_ms, params.jitter_ms)
    return max(d, 0.0)


def in_range(a, b, params: LinkParams = LinkParams()) -> bool:
    return distance(a, b) <= params.radio_range_m
