"""Data model for the input-delayed linear SDE and its problem reductions.

Holds the time-varying coefficients, configuration ingestion, the reduction
to a zero-mean/zero-target problem, the delay-compensated input matrix of
the Artstein-transformed system, and the deterministic drift-compensating
feedforward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    ConfigError,
    ControllabilityError,
    HistoryError,
    ParameterError,
    ShapeError,
    TimeRangeError,
)
from .numerics import (
    MatrixPath,
    TimeGrid,
    fundamental_matrix,
    simpson_weights,
    transition_family,
)

PHI_STEPS = 256  # default RK4 steps for spot fundamental-matrix evaluations
COND_LIMIT = 1e10


class TimeVaryingMatrix:
    """Deterministic matrix-valued function of time.

    Three flavours share one interface: a constant matrix, samples with
    linear interpolation, or a named closed form.  Instances are callable;
    evaluation returns a (rows, cols) array.  Sampled evaluation is exact at
    the sample times and linear between them, clamped outside their range.
    """

    def __init__(self, kind, shape, *, value=None, times=None, samples=None, fn=None, name=""):
        self.kind = kind
        self._shape = shape
        self._value = value
        self._times = times
        self._samples = samples
        self._fn = fn
        self.name = name

    @classmethod
    def constant(cls, value) -> "TimeVaryingMatrix":
        arr = np.atleast_2d(np.asarray(value, dtype=float))
        if not np.all(np.isfinite(arr)):
            raise ParameterError("constant matrix has non-finite entries")
        return cls("constant", arr.shape, value=arr)

    @classmethod
    def sampled(cls, times, samples) -> "TimeVaryingMatrix":
        times = np.asarray(times, dtype=float)
        samples = np.asarray(samples, dtype=float)
        if samples.ndim == 2:  # a list of row vectors: treat rows as column matrices
            samples = samples[:, :, None]
        if times.ndim != 1 or samples.ndim != 3 or samples.shape[0] != times.shape[0]:
            raise ShapeError(
                f"need one matrix per sample time, got {samples.shape} for {times.shape[0]} times"
            )
        if times.shape[0] < 2 or np.any(np.diff(times) <= 0):
            raise ParameterError("sample times must be strictly increasing (at least two)")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(samples))):
            raise ParameterError("sampled matrix has non-finite entries")
        return cls("sampled", samples.shape[1:], times=times, samples=samples)

    @classmethod
    def from_function(cls, fn: Callable[[float], np.ndarray], shape, name="") -> "TimeVaryingMatrix":
        return cls("builtin", tuple(shape), fn=fn, name=name)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self._shape)

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def covers(self, t_lo: float, t_hi: float) -> bool:
        """Whether the definition covers [t_lo, t_hi] without extrapolating."""
        if self.kind != "sampled":
            return True
        tol = 1e-9 * max(1.0, abs(t_hi))
        return self._times[0] <= t_lo + tol and self._times[-1] >= t_hi - tol

    def __call__(self, t: float) -> np.ndarray:
        if self.kind == "constant":
            return self._value
        if self.kind == "sampled":
            times = self._times
            if t <= times[0]:
                return self._samples[0]
            if t >= times[-1]:
                return self._samples[-1]
            j = int(np.searchsorted(times, t, side="right")) - 1
            frac = (t - times[j]) / (times[j + 1] - times[j])
            return (1.0 - frac) * self._samples[j] + frac * self._samples[j + 1]
        out = np.atleast_2d(np.asarray(self._fn(t), dtype=float))
        if out.shape != self._shape:
            out = out.reshape(self._shape)
        return out


@dataclass(frozen=True)
class DelayedSystem:
    """The input-delayed linear SDE ``dX = (A X + B U(t-h) + r) dt + sigma dW``.

    All coefficient mappings must be defined on [0, T + h]; the noise is a
    single Wiener process, so ``sigma`` is an n-by-1 column.
    """

    A: TimeVaryingMatrix
    B: TimeVaryingMatrix
    r: TimeVaryingMatrix
    sigma: TimeVaryingMatrix
    h: float
    T: float
    X0: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.h < self.T:
            raise ParameterError(f"need 0 < delay < horizon, got h={self.h}, T={self.T}")
        n_a, m_a = self.A.shape
        if n_a != m_a:
            raise ShapeError(f"A must be square, got {self.A.shape}")
        n, m = self.B.shape
        if n != n_a:
            raise ShapeError(f"B has {n} rows but A is {n_a}x{n_a}")
        if self.r.shape != (n, 1):
            raise ShapeError(f"drift must be {n}x1, got {self.r.shape}")
        if self.sigma.shape != (n, 1):
            raise ShapeError(f"sigma must be {n}x1, got {self.sigma.shape}")
        x0 = np.asarray(self.X0, dtype=float).ravel()
        if x0.shape != (n,):
            raise ShapeError(f"initial state must have length {n}, got {x0.shape}")
        object.__setattr__(self, "X0", x0)
        for label, tvm in (("A", self.A), ("B", self.B), ("drift", self.r), ("sigma", self.sigma)):
            if not tvm.covers(0.0, self.T + self.h):
                raise ParameterError(f"{label} samples do not cover [0, T+h]")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def noise_intensity(self) -> Callable[[float], np.ndarray]:
        """The diffusion term ``sigma sigma'`` as a matrix function of time."""
        sigma = self.sigma

        def d(t: float) -> np.ndarray:
            col = sigma(t)
            return col @ col.T

        return d


@dataclass(frozen=True)
class SteeringProblem:
    """A system plus the target mean and target covariance at the horizon."""

    system: DelayedSystem
    x_target: np.ndarray
    sigma_target: np.ndarray

    def __post_init__(self):
        n = self.system.n
        x = np.asarray(self.x_target, dtype=float).ravel()
        if x.shape != (n,):
            raise ShapeError(f"target mean must have length {n}")
        s = np.asarray(self.sigma_target, dtype=float)
        if s.shape != (n, n):
            raise ShapeError(f"target covariance must be {n}x{n}")
        if np.abs(s - s.T).max() > 1e-8 * max(1.0, np.abs(s).max()):
            raise ShapeError("target covariance must be symmetric")
        if np.linalg.eigvalsh(0.5 * (s + s.T))[0] <= 0.0:
            raise ShapeError("target covariance must be positive definite")
        object.__setattr__(self, "x_target", x)
        object.__setattr__(self, "sigma_target", 0.5 * (s + s.T))


@dataclass(frozen=True)
class ReducedProblem:
    """A steering problem rewritten with zero initial state and zero targets.

    ``system`` carries the compensated drift; ``x_ref`` is the straight-line
    reference path whose endpoints are the original initial state and target
    mean, used to map simulated states back to original coordinates.
    """

    system: DelayedSystem
    x_ref: Callable[[float], np.ndarray]
    source: SteeringProblem


def reduce_problem(problem: SteeringProblem) -> ReducedProblem:
    """Shift coordinates so both the initial state and the mean target are zero.

    The reference path is ``x_ref(t) = x_target * t/T + X0 * (T-t)/T`` and the
    shifted state ``X - x_ref`` obeys the same dynamics with compensated
    drift ``r + A x_ref - dx_ref/dt``.  Steering the reduced system's mean
    0 -> 0 and covariance 0 -> sigma_target is equivalent to the original
    problem.
    """
    sys = problem.system
    x0 = sys.X0
    xt = problem.x_target
    horizon = sys.T
    slope = (xt - x0) / horizon

    def x_ref(t: float) -> np.ndarray:
        return x0 + slope * min(max(t, 0.0), horizon)

    a_fn = sys.A

    def reduced_drift(t: float) -> np.ndarray:
        return sys.r(t) + (a_fn(t) @ x_ref(t) - slope)[:, None]

    rbar = TimeVaryingMatrix.from_function(reduced_drift, (sys.n, 1), name="reduced-drift")
    reduced = DelayedSystem(sys.A, sys.B, rbar, sys.sigma, sys.h, sys.T, np.zeros(sys.n))
    return ReducedProblem(reduced, x_ref, problem)


def artstein_input_matrix(sys: DelayedSystem, t: float, steps: int = PHI_STEPS) -> np.ndarray:
    """Input matrix of the delay-free transformed system at time ``t``.

    Computes ``Phi_A(t, t+h) B(t+h)`` where the transition factor maps the
    state backwards across one delay window.  Defined for t in [0, T].
    """
    tol = 1e-9 * max(1.0, sys.T)
    if t < -tol or t > sys.T + tol:
        raise TimeRangeError(f"t={t:.6g} outside [0, {sys.T:.6g}]")
    phi = fundamental_matrix(sys.A, t + sys.h, t, steps)
    return phi @ sys.B(t + sys.h)


def artstein_input_values(sys: DelayedSystem, times: np.ndarray, steps: int = PHI_STEPS) -> np.ndarray:
    """Evaluate the transformed input matrix at many times at once.

    With a constant A the backward transition factor is shared by every
    evaluation, which makes dense schedules cheap.
    """
    times = np.asarray(times, dtype=float)
    out = np.empty((times.shape[0], sys.n, sys.m))
    if sys.A.is_constant:
        phi = fundamental_matrix(sys.A, sys.h, 0.0, steps)
        if sys.B.is_constant:
            out[:] = phi @ sys.B(0.0)
        else:
            for k, t in enumerate(times):
                out[k] = phi @ sys.B(t + sys.h)
    else:
        for k, t in enumerate(times):
            out[k] = fundamental_matrix(sys.A, t + sys.h, t, steps) @ sys.B(t + sys.h)
    return out


def artstein_input_schedule(sys: DelayedSystem, grid: TimeGrid, steps: int = PHI_STEPS) -> MatrixPath:
    """Sample the transformed input matrix on a grid as a :class:`MatrixPath`."""
    return MatrixPath(grid, artstein_input_values(sys, grid.nodes(), steps))


def drift_feedforward(
    reduced: ReducedProblem,
    grid: TimeGrid,
    steps: int = PHI_STEPS,
    cond_limit: float = COND_LIMIT,
) -> MatrixPath:
    """Minimum-energy open-loop input cancelling the reduced drift's effect.

    The control acts on [0, T - h] but its effect (and the drift's) lands on
    the state at T, so the least-norm input solves

        integral_0^{T-h} Psi(s) Bbar(s) u(s) ds = -integral_0^T Psi(s) rbar(s) ds

    with ``Psi(s)`` the transition matrix to time T - h.  The drift integral
    must run over the whole horizon: the drift keeps accumulating during the
    final delay window where no control can reach the state anymore.  The
    resulting input is

        u(t) = -Bbar(t)' Psi(t)' W^{-1} integral_0^T Psi(s) rbar(s) ds

    with ``W`` the reachability Grammian on [0, T - h], sampled on ``grid``,
    which must span [0, T - h] with an even step count (Simpson rule).
    """
    sys = reduced.system
    t_final = sys.T - sys.h
    tol = 1e-9 * max(1.0, sys.T)
    if abs(grid.t_start) > tol or abs(grid.t_end - t_final) > tol:
        raise ParameterError(f"feedforward grid must span [0, {t_final:.6g}]")
    nodes = grid.nodes()
    weights = simpson_weights(grid.step_count)
    psi = transition_family(sys.A, nodes, anchor_index=-1, refine=2)
    bbar = artstein_input_values(sys, nodes, steps)

    n = sys.n
    gram = np.zeros((n, n))
    forced = np.zeros(n)
    for k in range(nodes.shape[0]):
        pb = psi[k] @ bbar[k]
        gram += weights[k] * (pb @ pb.T)
        forced += weights[k] * (psi[k] @ sys.r(nodes[k])[:, 0])
    scale = grid.dt / 3.0
    gram *= scale
    forced *= scale

    # drift accumulated over the uncontrollable final window [T-h, T]
    tail_steps = max(16, 2 * ((grid.step_count // 8) + 1))
    tail_nodes = t_final + (sys.h / tail_steps) * np.arange(tail_steps + 1)
    tail_psi = transition_family(sys.A, tail_nodes, anchor_index=0, refine=2)
    tail_w = simpson_weights(tail_steps)
    for k in range(tail_nodes.shape[0]):
        forced += (sys.h / tail_steps / 3.0) * tail_w[k] * (
            tail_psi[k] @ sys.r(tail_nodes[k])[:, 0]
        )

    gram = 0.5 * (gram + gram.T)
    if np.linalg.cond(gram) <= cond_limit:
        load = np.linalg.solve(gram, forced)
    else:
        # Rank-deficient actuation is still fine when the drift only needs
        # forcing inside the reachable subspace (least-squares consistent).
        load, *_ = np.linalg.lstsq(gram, forced, rcond=1e-12)
        gap = np.linalg.norm(gram @ load - forced)
        if gap > 1e-6 * max(np.linalg.norm(forced), 1e-12):
            raise ControllabilityError(
                "reachability Grammian is singular and the drift requires "
                "forcing an unreachable direction"
            )
    controls = np.empty((nodes.shape[0], sys.m, 1))
    for k in range(nodes.shape[0]):
        controls[k, :, 0] = -(bbar[k].T @ (psi[k].T @ load))
    return MatrixPath(grid, controls)


def artstein_transform(
    x: np.ndarray,
    u_history: np.ndarray,
    sys: DelayedSystem,
    t: float,
    dt: float,
) -> np.ndarray:
    """Delay-compensated state: the state plus the pipeline of pending inputs.

    ``u_history[j]`` must hold the control issued at time ``t - h + j*dt``
    for j = 0..h/dt, i.e. the last full delay window sampled on the
    simulation grid (zeros for times before the start).  The window integral
    is evaluated with the trapezoid rule on those samples.
    """
    x = np.asarray(x, dtype=float).ravel()
    u_history = np.atleast_2d(np.asarray(u_history, dtype=float))
    slots = int(round(sys.h / dt))
    if abs(sys.h - slots * dt) > 1e-9 * sys.h or slots < 1:
        raise ParameterError(f"dt={dt} does not divide the delay {sys.h}")
    if u_history.shape != (slots + 1, sys.m):
        raise HistoryError(
            f"history must cover [t-h, t] with {slots + 1} samples of dim {sys.m}, "
            f"got shape {u_history.shape}"
        )
    # Phi_A(t, s+h) for s in [t-h, t] <=> transition from u in [t, t+h] back to t
    u_times = t + dt * np.arange(slots + 1)
    psi = transition_family(sys.A, u_times, anchor_index=0, refine=2)
    contrib = np.empty((slots + 1, sys.n))
    for j in range(slots + 1):
        s = t - sys.h + j * dt
        contrib[j] = psi[j] @ (sys.B(s + sys.h) @ u_history[j])
    weights = np.full(slots + 1, dt)
    weights[0] = weights[-1] = 0.5 * dt
    return x + weights @ contrib


# --- configuration ingestion -------------------------------------------------

_MATRIX_KEYS = ("A", "B", "sigma", "drift")
_TOP_KEYS = {
    "dim_state",
    "dim_control",
    "horizon",
    "delay",
    "A",
    "B",
    "sigma",
    "drift",
    "initial_state",
    "target_mean",
    "target_covariance",
}


def _finite_array(raw, field_path: str, shape=None) -> np.ndarray:
    try:
        arr = np.asarray(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"not a numeric array ({exc})", field_path) from None
    if not np.all(np.isfinite(arr)):
        raise ConfigError("contains non-finite values", field_path)
    if shape is not None and arr.shape != shape:
        raise ConfigError(f"expected shape {shape}, got {arr.shape}", field_path)
    return arr


def _builtin_slot(name: str, slot: str, field_path: str) -> TimeVaryingMatrix:
    from . import building  # deferred: building depends on this module

    try:
        return building.builtin_coefficient(name, slot)
    except KeyError:
        raise ConfigError(f"unknown builtin {name!r}", field_path) from None


def _load_matrix(spec, slot: str, shape: tuple[int, int]) -> TimeVaryingMatrix:
    if not isinstance(spec, dict):
        raise ConfigError("must be an object with a 'kind' key", slot)
    kind = spec.get("kind")
    if kind == "constant":
        unknown = set(spec) - {"kind", "value"}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", slot)
        if "value" not in spec:
            raise ConfigError("missing 'value'", slot)
        value = _finite_array(spec["value"], f"{slot}.value")
        value = np.atleast_2d(value)
        if value.shape != shape:
            if value.shape == shape[::-1] and 1 in shape:
                value = value.T  # accept flat vectors for column coefficients
            else:
                raise ConfigError(f"expected shape {shape}, got {value.shape}", f"{slot}.value")
        return TimeVaryingMatrix.constant(value)
    if kind == "sampled":
        unknown = set(spec) - {"kind", "times", "values"}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", slot)
        if "times" not in spec or "values" not in spec:
            raise ConfigError("sampled matrices need 'times' and 'values'", slot)
        times = _finite_array(spec["times"], f"{slot}.times")
        values = _finite_array(spec["values"], f"{slot}.values")
        try:
            tvm = TimeVaryingMatrix.sampled(times, values)
        except (ParameterError, ShapeError) as exc:
            raise ConfigError(str(exc), slot) from None
        if tvm.shape != shape:
            raise ConfigError(f"expected shape {shape}, got {tvm.shape}", f"{slot}.values")
        return tvm
    if kind == "builtin":
        unknown = set(spec) - {"kind", "name"}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", slot)
        name = spec.get("name")
        if not isinstance(name, str):
            raise ConfigError("builtin matrices need a string 'name'", slot)
        tvm = _builtin_slot(name, slot, slot)
        if tvm.shape != shape:
            raise ConfigError(
                f"builtin {name!r} provides shape {tvm.shape}, expected {shape}", slot
            )
        return tvm
    raise ConfigError(f"unknown kind {kind!r}", f"{slot}.kind")


def load_system(config) -> DelayedSystem | SteeringProblem:
    """Build a validated system (or steering problem) from a JSON document.

    ``config`` may be a dict, a JSON string, or a path to a JSON file.  Every
    invariant of the model is checked eagerly; violations raise
    :class:`ConfigError` naming the offending field.  When the document
    carries ``target_mean``/``target_covariance`` the result is a
    :class:`SteeringProblem`, otherwise a bare :class:`DelayedSystem`.
    """
    if isinstance(config, (str, Path)):
        text = str(config)
        try:
            if Path(text).exists():
                text = Path(text).read_text()
        except OSError:
            pass  # not a usable path: treat as raw JSON text
        try:
            config = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
    if not isinstance(config, dict):
        raise ConfigError("configuration must be a JSON object")

    unknown = set(config) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    for key in ("dim_state", "dim_control", "horizon", "delay", "initial_state"):
        if key not in config:
            raise ConfigError("missing required key", key)
    for key in _MATRIX_KEYS:
        if key not in config:
            raise ConfigError("missing required key", key)

    n = config["dim_state"]
    m = config["dim_control"]
    if not isinstance(n, int) or n < 1:
        raise ConfigError("must be a positive integer", "dim_state")
    if not isinstance(m, int) or m < 1:
        raise ConfigError("must be a positive integer", "dim_control")
    horizon = config["horizon"]
    delay = config["delay"]
    if not isinstance(horizon, (int, float)) or not np.isfinite(horizon) or horizon <= 0:
        raise ConfigError("must be a positive finite number", "horizon")
    if not isinstance(delay, (int, float)) or not np.isfinite(delay) or delay <= 0:
        raise ConfigError("must be a positive finite number", "delay")
    if delay >= horizon:
        raise ConfigError(f"delay ({delay}) must be smaller than the horizon ({horizon})", "delay")

    a = _load_matrix(config["A"], "A", (n, n))
    b = _load_matrix(config["B"], "B", (n, m))
    sigma = _load_matrix(config["sigma"], "sigma", (n, 1))
    drift = _load_matrix(config["drift"], "drift", (n, 1))
    x0 = _finite_array(config["initial_state"], "initial_state", (n,))

    try:
        system = DelayedSystem(a, b, drift, sigma, float(delay), float(horizon), x0)
    except (ParameterError, ShapeError) as exc:
        raise ConfigError(str(exc)) from None

    has_mean = "target_mean" in config
    has_cov = "target_covariance" in config
    if has_mean != has_cov:
        raise ConfigError(
            "target_mean and target_covariance must be given together",
            "target_mean" if has_cov else "target_covariance",
        )
    if not has_mean:
        return system

    x_target = _finite_array(config["target_mean"], "target_mean", (n,))
    sigma_target = _finite_array(config["target_covariance"], "target_covariance", (n, n))
    try:
        return SteeringProblem(system, x_target, sigma_target)
    except ShapeError as exc:
        raise ConfigError(str(exc), "target_covariance") from None
