"""Deterministic discrete-event simulation of a multi-cluster UAV network."""
from .energy import EnergyMeter, EnergyParams, charge
from .events import EventQueue
from .mobility import Cylinder, MobilityState, step_mobility
from .network import LinkParams, in_range, link_delay


def run(scenario):
    from .engine import run as _run
    return _run(scenario)


__all__ = ["EnergyMeter", "EnergyParams", "charge", "EventQueue", "Cylinder", "MobilityState",
           "step_mobility", "LinkParams", "in_range", "link_delay", "run"]
