"""Two-state building temperature model used by the case-study command.

The first state is the indoor temperature (actuated through the heat
source, which delivers with a transmission delay), the second the outdoor
temperature, an Ornstein-Uhlenbeck fluctuation around a day-night baseline.
Only the indoor temperature is controllable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import DelayedSystem, TimeVaryingMatrix


@dataclass(frozen=True)
class BuildingModelParams:
    """Physical constants of the building model (time unit: minutes)."""

    r_e: float = 5e-4  # envelope heat-exchange rate
    r_u: float = 2e-4  # heater input gain
    theta: float = 3.5e-4  # outdoor-temperature mean-reversion rate
    t_eq: float = 20.0  # envelope offset temperature
    sigma_i: float = 0.05  # indoor usage noise
    sigma_e: float = 0.1  # outdoor fluctuation noise
    delay: float = 500.0
    horizon: float = 7200.0  # five days at minute granularity

    def __post_init__(self):
        for name in ("r_e", "r_u", "theta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def predicted_external(self, t: float) -> float:
        """Baseline outdoor temperature with a roughly daily cycle."""
        return 5.0 + 5.0 * math.cos(0.004 * t)

    def predicted_external_rate(self, t: float) -> float:
        return -0.02 * math.sin(0.004 * t)

    def dynamics_matrix(self) -> np.ndarray:
        return np.array([[-self.r_e, self.r_e], [0.0, -self.theta]])

    def input_matrix(self) -> np.ndarray:
        return np.array([[self.r_u], [0.0]])

    def noise_column(self) -> np.ndarray:
        return np.array([[self.sigma_i], [self.sigma_e]])

    def drift(self, t: float) -> np.ndarray:
        # keeps the outdoor OU mean exactly on the predicted baseline
        return np.array(
            [
                [-self.r_e * self.t_eq],
                [self.theta * self.predicted_external(t) + self.predicted_external_rate(t)],
            ]
        )

    def initial_state(self) -> np.ndarray:
        return np.array([self.t_eq, self.predicted_external(0.0)])


def make_building_system(h: float = 500.0, horizon: float = 7200.0) -> DelayedSystem:
    """Assemble the building model as a :class:`DelayedSystem`."""
    params = BuildingModelParams(delay=h, horizon=horizon)
    drift = TimeVaryingMatrix.from_function(params.drift, (2, 1), name="building")
    return DelayedSystem(
        A=TimeVaryingMatrix.constant(params.dynamics_matrix()),
        B=TimeVaryingMatrix.constant(params.input_matrix()),
        r=drift,
        sigma=TimeVaryingMatrix.constant(params.noise_column()),
        h=h,
        T=horizon,
        X0=params.initial_state(),
    )


def builtin_coefficient(name: str, slot: str) -> TimeVaryingMatrix:
    """Resolve a named closed-form coefficient for the config loader."""
    if name != "building":
        raise KeyError(name)
    params = BuildingModelParams()
    if slot == "A":
        return TimeVaryingMatrix.constant(params.dynamics_matrix())
    if slot == "B":
        return TimeVaryingMatrix.constant(params.input_matrix())
    if slot == "sigma":
        return TimeVaryingMatrix.constant(params.noise_column())
    if slot == "drift":
        return TimeVaryingMatrix.from_function(params.drift, (2, 1), name="building")
    raise KeyError(slot)
