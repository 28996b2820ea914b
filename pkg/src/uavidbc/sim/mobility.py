"""3-D Gauss-Markov mobility inside a cylindrical cluster area."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace

Vec = tuple[float, float, float]


@dataclass(frozen=True)
class Cylinder:
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 1000.0
    z_min: float = 200.0
    z_max: float = 1000.0
    v_min: float = 0.0
    v_max: float = 30.0

    def contains(self, p: Vec, eps: float = 1e-6) -> bool:
        r = math.hypot(p[0] - self.center[0], p[1] - self.center[1])
        return r <= self.radius + eps and self.z_min - eps <= p[2] <= self.z_max + eps


@dataclass(frozen=True)
class MobilityState:
    position: Vec
    velocity: Vec
    alpha: float = 0.85
    mean_velocity: Vec = (0.0, 0.0, 0.0)
    sigma: float = 1.0

    @property
    def speed(self) -> float:
        return math.sqrt(sum(c * c for c in self.velocity))


def gauss_markov(v: float, mean: float, alpha: float, sigma: float, w: float) -> float:
    return alpha * v + (1.0 - alpha) * mean + sigma * math.sqrt(1.0 - alpha * alpha) * w


def _clamp_speed(v: Vec, lo: float, hi: float) -> Vec:
    s = math.sqrt(sum(c * c for c in v))
    if s > hi:
        k = hi / s
    elif 0.0 < s < lo:
        k = lo / s
    else:
        return v
    return (v[0] * k, v[1] * k, v[2] * k)


def _reflect(p: Vec, v: Vec, mean: Vec, box: Cylinder) -> tuple[Vec, Vec, Vec]:
    x, y, z = p
    vx, vy, vz = v
    mx, my, mz = mean
    cx, cy = box.center
    r = math.hypot(x - cx, y - cy)
    if r > box.radius:
        ux, uy = (x - cx) / r, (y - cy) / r
        r2 = min(max(2.0 * box.radius - r, 0.0), box.radius)
        x, y = cx + ux * r2, cy + uy * r2
        dot = vx * ux + vy * uy
        vx, vy = vx - 2 * dot * ux, vy - 2 * dot * uy
        mdot = mx * ux + my * uy
        if mdot > 0:
            mx, my = mx - 2 * mdot * ux, my - 2 * mdot * uy
    if z > box.z_max:
        z = max(2.0 * box.z_max - z, box.z_min)
        vz, mz = -abs(vz), -abs(mz)
    elif z < box.z_min:
        z = min(2.0 * box.z_min - z, box.z_max)
        vz, mz = abs(vz), abs(mz)
    return (x, y, z), (vx, vy, vz), (mx, my, mz)


def step_mobility(state: MobilityState, dt: float, rng: random.Random,
                  bounds: Cylinder | None = None) -> MobilityState:
    """Advance one Gauss-Markov step of ``dt`` seconds.

    Per axis the new velocity is ``a*v + (1-a)*mean + sigma*sqrt(1-a^2)*w``
    with ``w`` drawn from ``rng`` in x, y, z order. With ``bounds`` the speed
    is clamped and the position reflected back into the cylinder.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    a, s = state.alpha, state.sigma
    v = tuple(gauss_markov(vi, mi, a, s, rng.gauss(0.0, 1.0))
              for vi, mi in zip(state.velocity, state.mean_velocity))
    mean = state.mean_velocity
    if bounds is not None:
        v = _clamp_speed(v, bounds.v_min, bounds.v_max)
    p = tuple(pi + vi * dt for pi, vi in zip(state.position, v))
    if bounds is not None:
        p, v, mean = _reflect(p, v, mean, bounds)
    return replace(state, position=p, velocity=v, mean_velocity=mean)
