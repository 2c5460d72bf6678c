"""Deterministic matrix-valued integration primitives.

Fundamental matrices, composite-Simpson matrix quadrature, Lyapunov
covariance propagation and forward/backward Riccati solving, all on fixed
uniform grids with the classical fourth-order Runge-Kutta scheme.  Fixed
steps keep every result bit-reproducible; adaptive stepping is deliberately
not offered.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .errors import (
    DomainError,
    GridMismatchError,
    NumericInputError,
    ParameterError,
    RiccatiBlowUpError,
    ShapeError,
)

MatrixFunction = Callable[[float], np.ndarray]
MatrixLike = Union[np.ndarray, Sequence, float, MatrixFunction]

DEFAULT_BLOWUP = 1e12
PSD_TOL = 1e-9


def as_matrix_function(m: MatrixLike) -> MatrixFunction:
    """Wrap a constant matrix as a function of time; callables pass through."""
    if callable(m):
        return m
    arr = np.atleast_2d(np.asarray(m, dtype=float))

    def const(_t: float) -> np.ndarray:
        return arr

    return const


def _eval_checked(f: MatrixFunction, t: float) -> np.ndarray:
    value = np.atleast_2d(np.asarray(f(t), dtype=float))
    if not np.all(np.isfinite(value)):
        raise NumericInputError(f"non-finite sample at t={t:.6g}")
    return value


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def min_eigenvalue(m: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(symmetrize(m))[0])


def require_psd(m: np.ndarray, name: str, tol: float = PSD_TOL) -> np.ndarray:
    """Validate that ``m`` is symmetric positive semidefinite within ``tol``."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max()))
    if np.abs(m - m.T).max() > 1e-8 * scale:
        raise DomainError(f"{name} is not symmetric")
    lam = min_eigenvalue(m)
    if lam < -tol * scale:
        raise DomainError(f"{name} is not positive semidefinite (min eig {lam:.3g})")
    return symmetrize(m)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid on [t_start, t_end] with ``step_count`` steps."""

    t_start: float
    t_end: float
    step_count: int

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise ParameterError(
                f"t_end ({self.t_end}) must exceed t_start ({self.t_start})"
            )
        if int(self.step_count) != self.step_count or self.step_count < 1:
            raise ParameterError(f"step_count must be a positive integer, got {self.step_count}")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.step_count

    @property
    def span(self) -> float:
        return self.t_end - self.t_start

    def nodes(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.step_count + 1)

    def node(self, k: int) -> float:
        return self.t_start + k * self.dt

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        pos = (t - self.t_start) / self.dt
        k = int(round(pos))
        if k < 0 or k > self.step_count or abs(pos - k) > tol * max(1.0, abs(pos)):
            raise GridMismatchError(f"t={t:.9g} is not a node of {self}")
        return k

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_start, self.t_end, self.step_count * factor)

    def __str__(self) -> str:  # keep error messages compact
        return f"TimeGrid([{self.t_start:g}, {self.t_end:g}], {self.step_count} steps)"


@dataclass(frozen=True)
class MatrixPath:
    """A matrix-valued function sampled on a :class:`TimeGrid`.

    Values are exact at grid nodes; evaluation between nodes is linear.
    """

    grid: TimeGrid
    values: np.ndarray  # (step_count + 1, rows, cols)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3:
            raise ShapeError(f"values must be 3-d, got shape {values.shape}")
        if values.shape[0] != self.grid.step_count + 1:
            raise ShapeError(
                f"expected {self.grid.step_count + 1} samples, got {values.shape[0]}"
            )
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def at_node(self, k: int) -> np.ndarray:
        return self.values[k]

    def __call__(self, t: float) -> np.ndarray:
        pos = (t - self.grid.t_start) / self.grid.dt
        pos = min(max(pos, 0.0), float(self.grid.step_count))
        k = int(pos)
        if k >= self.grid.step_count:
            return self.values[-1]
        frac = pos - k
        if frac == 0.0:
            return self.values[k]
        return (1.0 - frac) * self.values[k] + frac * self.values[k + 1]


class CovarianceTrajectory(MatrixPath):
    """A :class:`MatrixPath` whose samples are symmetric PSD covariances."""


def _rk4_step(rhs, t: float, y: np.ndarray, dt: float) -> np.ndarray:
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = rhs(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def fundamental_matrix(M: MatrixLike, s: float, t: float, steps: int) -> np.ndarray:
    """Solution operator of ``dx/dtau = M(tau) x`` mapping time ``s`` to ``t``.

    Integrates ``dPhi/dtau = M(tau) Phi`` with ``Phi(s, s) = I`` over a
    uniform grid of ``steps`` RK4 steps.  ``t < s`` is allowed: the
    integration simply runs in reverse, which yields the inverse operator.

    Args:
        M: square matrix function of time (or a constant matrix).
        s: start time.
        t: end time.
        steps: number of RK4 steps, at least 1.

    Returns:
        The matrix mapping the state at ``s`` to the state at ``t``.
    """
    if int(steps) != steps or steps < 1:
        raise ParameterError(f"steps must be a positive integer, got {steps}")
    f = as_matrix_function(M)
    probe = _eval_checked(f, s)
    if probe.shape[0] != probe.shape[1]:
        raise ShapeError(f"generator must be square, got shape {probe.shape}")
    n = probe.shape[0]
    phi = np.eye(n)
    if t == s:
        return phi
    dt = (t - s) / steps

    def rhs(tau, y):
        return _eval_checked(f, tau) @ y

    tau = s
    for _ in range(int(steps)):
        phi = _rk4_step(rhs, tau, phi, dt)
        tau += dt
    return phi


def simpson_weights(steps: int) -> np.ndarray:
    """Composite-Simpson coefficient vector (without the h/3 factor)."""
    if int(steps) != steps or steps < 2 or steps % 2 != 0:
        raise ParameterError(f"Simpson rule needs a positive even step count, got {steps}")
    w = np.ones(steps + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w


def simpson_combine(samples: np.ndarray, dt: float) -> np.ndarray:
    """Combine uniformly spaced samples with composite-Simpson weights."""
    steps = samples.shape[0] - 1
    w = simpson_weights(steps)
    return np.tensordot(w, samples, axes=(0, 0)) * (dt / 3.0)


def matrix_quadrature(f: MatrixFunction, a: float, b: float, steps: int) -> np.ndarray:
    """Entrywise composite-Simpson approximation of the integral of ``f`` on [a, b].

    ``steps`` must be even; Simpson is exact for polynomial integrands up to
    degree three.
    """
    if a > b:
        raise ParameterError(f"integration bounds reversed: a={a} > b={b}")
    w = simpson_weights(steps)  # validates parity before any sampling
    fn = as_matrix_function(f)
    first = _eval_checked(fn, a)
    if a == b:
        return np.zeros_like(first)
    dt = (b - a) / steps
    total = w[0] * first
    for j in range(1, steps + 1):
        total = total + w[j] * _eval_checked(fn, a + j * dt)
    return total * (dt / 3.0)


def integrate_linear_ode(
    A: MatrixLike,
    forcing: Callable[[float], np.ndarray] | None,
    x0: np.ndarray,
    grid: TimeGrid,
) -> np.ndarray:
    """RK4 solution of ``dx/dt = A(t) x + forcing(t)`` sampled on ``grid``.

    Returns an array of shape (step_count + 1, n).
    """
    a_fn = as_matrix_function(A)
    x = np.asarray(x0, dtype=float).ravel().copy()
    n = x.shape[0]
    out = np.empty((grid.step_count + 1, n))
    out[0] = x

    if forcing is None:
        def rhs(t, y):
            return a_fn(t) @ y
    else:
        def rhs(t, y):
            return a_fn(t) @ y + np.asarray(forcing(t), dtype=float).ravel()

    dt = grid.dt
    for k in range(grid.step_count):
        x = _rk4_step(rhs, grid.node(k), x, dt)
        out[k + 1] = x
    return out


def propagate_lyapunov(
    A_cl: MatrixLike,
    D: MatrixLike,
    sigma0: np.ndarray,
    grid: TimeGrid,
    tol_psd: float = PSD_TOL,
) -> CovarianceTrajectory:
    """Propagate ``dS/dt = A_cl S + S A_cl' + D`` from ``sigma0`` along ``grid``.

    The result is symmetrized after every step so the trajectory cannot
    drift off the symmetric manifold.  ``sigma0`` must be symmetric PSD;
    ``D`` is spot-checked for symmetry at the grid endpoints.
    """
    a_fn = as_matrix_function(A_cl)
    d_fn = as_matrix_function(D)
    sigma = require_psd(np.atleast_2d(np.asarray(sigma0, dtype=float)), "sigma0", tol_psd)
    n = sigma.shape[0]
    for t_probe in (grid.t_start, grid.t_end):
        d_probe = _eval_checked(d_fn, t_probe)
        if d_probe.shape != (n, n):
            raise ShapeError(f"D has shape {d_probe.shape}, expected {(n, n)}")
        require_psd(d_probe, "D", tol_psd)

    def rhs(t, s):
        a = a_fn(t)
        return a @ s + s @ a.T + d_fn(t)

    values = np.empty((grid.step_count + 1, n, n))
    values[0] = sigma
    dt = grid.dt
    for k in range(grid.step_count):
        sigma = symmetrize(_rk4_step(rhs, grid.node(k), sigma, dt))
        values[k + 1] = sigma
    return CovarianceTrajectory(grid, values)


def solve_riccati(
    A: MatrixLike,
    Bbar: MatrixLike,
    Rinv: MatrixLike,
    Qbar: MatrixLike,
    boundary: np.ndarray,
    direction: str,
    grid: TimeGrid,
    blowup: float = DEFAULT_BLOWUP,
) -> MatrixPath:
    """Solve ``dP/dt = -A'P - PA - Qbar + P Bbar Rinv Bbar' P`` on ``grid``.

    ``direction`` selects where the boundary value is imposed:

    * ``"forward"``: ``P(t_start) = boundary``, integrate forward.
    * ``"backward"``: ``P(t_end) = boundary``, integrate in reversed time.

    Entries exceeding ``blowup`` in magnitude abort the solve with a
    :class:`RiccatiBlowUpError` carrying the escape time; finite escape is a
    legitimate signal during shooting and must be catchable.
    """
    if direction not in ("forward", "backward"):
        raise ParameterError(f"direction must be 'forward' or 'backward', got {direction!r}")
    a_fn = as_matrix_function(A)
    b_fn = as_matrix_function(Bbar)
    rinv_fn = as_matrix_function(Rinv)
    q_fn = as_matrix_function(Qbar)
    p = np.atleast_2d(np.asarray(boundary, dtype=float))
    n = p.shape[0]
    if p.shape != (n, n):
        raise ShapeError(f"boundary must be square, got {p.shape}")
    scale = max(1.0, float(np.abs(p).max()))
    if np.abs(p - p.T).max() > 1e-8 * scale:
        raise DomainError("boundary value is not symmetric")
    p = symmetrize(p)

    def rhs(t, y):
        a = a_fn(t)
        b = b_fn(t)
        gain = b @ rinv_fn(t) @ b.T
        return -a.T @ y - y @ a - q_fn(t) + y @ gain @ y

    values = np.empty((grid.step_count + 1, n, n))
    dt = grid.dt
    if direction == "forward":
        values[0] = p
        for k in range(grid.step_count):
            p = symmetrize(_rk4_step(rhs, grid.node(k), p, dt))
            if not np.all(np.abs(p) < blowup):
                raise RiccatiBlowUpError(grid.node(k + 1), blowup)
            values[k + 1] = p
    else:
        values[-1] = p
        for k in range(grid.step_count, 0, -1):
            p = symmetrize(_rk4_step(rhs, grid.node(k), p, -dt))
            if not np.all(np.abs(p) < blowup):
                raise RiccatiBlowUpError(grid.node(k - 1), blowup)
            values[k - 1] = p
    return MatrixPath(grid, values)


def transition_family(
    M: MatrixLike,
    times: np.ndarray,
    anchor_index: int = -1,
    refine: int = 2,
) -> np.ndarray:
    """Evaluate ``Phi_M(times[anchor_index], s)`` for every ``s`` in ``times``.

    Uses a single sweep of ``dPsi/ds = -Psi M(s)`` away from the anchor in
    both directions, with ``refine`` RK4 substeps per interval, instead of
    one independent integration per time point.
    """
    times = np.asarray(times, dtype=float)
    count = times.shape[0]
    anchor = anchor_index % count
    f = as_matrix_function(M)
    n = _eval_checked(f, times[anchor]).shape[0]

    def rhs(s, y):
        return -y @ f(s)

    out = np.empty((count, n, n))
    out[anchor] = np.eye(n)
    for idx in range(anchor - 1, -1, -1):  # sweep toward earlier times
        psi = out[idx + 1]
        s0, s1 = times[idx + 1], times[idx]
        h = (s1 - s0) / refine
        s = s0
        for _ in range(refine):
            psi = _rk4_step(rhs, s, psi, h)
            s += h
        out[idx] = psi
    for idx in range(anchor + 1, count):  # sweep toward later times
        psi = out[idx - 1]
        s0, s1 = times[idx - 1], times[idx]
        h = (s1 - s0) / refine
        s = s0
        for _ in range(refine):
            psi = _rk4_step(rhs, s, psi, h)
            s += h
        out[idx] = psi
    return out
