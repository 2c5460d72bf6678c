"""Exact covariance steering via a forward Riccati gain schedule.

The feedback gain solves a forward Riccati equation whose initial value is
found by shooting: propagate the closed-loop covariance for a trial initial
gain, measure the terminal mismatch, and correct with a damped quasi-Newton
iteration.  Blow-up of a trial Riccati solution marks the trial as outside
the admissible domain rather than failing the solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analysis import (
    controllability_report,
    sigma_min_profile,
    target_for_artstein,
)
from .errors import ControllabilityError, ConvergenceError, ParameterError
from .model import (
    DelayedSystem,
    ReducedProblem,
    SteeringProblem,
    TimeVaryingMatrix,
    artstein_input_values,
    drift_feedforward,
    reduce_problem,
)
from .numerics import (
    CovarianceTrajectory,
    MatrixPath,
    TimeGrid,
    as_matrix_function,
    fundamental_matrix,
    propagate_lyapunov,
    simpson_combine,
    simpson_weights,
    symmetrize,
    transition_family,
)

DEFAULT_GRID_STEPS = 400
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 100
JACOBIAN_REL_STEP = 1e-6
SHOOTING_BLOWUP = 1e12


@dataclass(frozen=True)
class FeedbackLaw:
    """A feedback gain schedule on the transformed state, plus feedforward.

    The realized control at a grid node k is

        u = -r_inverse[k] @ bbar[k].T @ gain_schedule[k] @ y + feedforward[k]

    except for ``kind="static-gain"`` laws, which store the effective m-by-n
    gain directly in ``direct_gain`` (their gain is not of the symmetric
    Riccati form).
    """

    kind: str  # "steering" | "lq" | "static-gain"
    grid: TimeGrid
    gain_schedule: MatrixPath | None
    r_inverse: MatrixPath
    bbar: MatrixPath
    feedforward: MatrixPath | None = None
    direct_gain: MatrixPath | None = None

    def __post_init__(self):
        if self.kind not in ("steering", "lq", "static-gain"):
            raise ParameterError(f"unknown law kind {self.kind!r}")
        if self.kind == "static-gain":
            if self.direct_gain is None:
                raise ParameterError("static-gain laws need a direct_gain schedule")
        else:
            if self.gain_schedule is None:
                raise ParameterError(f"{self.kind} laws need a gain_schedule")
            worst = np.abs(
                self.gain_schedule.values - np.swapaxes(self.gain_schedule.values, 1, 2)
            ).max()
            if worst > 1e-8 * max(1.0, np.abs(self.gain_schedule.values).max()):
                raise ParameterError("gain schedule must be symmetric at every node")

    @property
    def state_dim(self) -> int:
        return self.bbar.shape[0]

    @property
    def control_dim(self) -> int:
        return self.bbar.shape[1]

    def gain_array(self) -> np.ndarray:
        """Effective feedback gains K(t_k), shape (nodes, m, n)."""
        if self.direct_gain is not None:
            return self.direct_gain.values
        rinv = self.r_inverse.values
        bbar = self.bbar.values
        pis = self.gain_schedule.values
        return np.einsum("kij,klj,klm->kim", rinv, bbar, pis)

    def feedforward_array(self) -> np.ndarray:
        """Feedforward samples u_ff(t_k), shape (nodes, m)."""
        count = self.grid.step_count + 1
        if self.feedforward is None:
            return np.zeros((count, self.control_dim))
        return self.feedforward.values[:, :, 0]

    def closed_loop_generator(self, A) -> "callable":
        """``A(t) - Bbar(t) K(t)`` with node-linear interpolation of the law."""
        a_fn = as_matrix_function(A)
        gains = MatrixPath(self.grid, self.gain_array())
        bbar = self.bbar

        def generator(t: float) -> np.ndarray:
            return a_fn(t) - bbar(t) @ gains(t)

        return generator


@dataclass(frozen=True)
class ShootingResult:
    """Converged steering law plus the diagnostics of the shooting solve."""

    law: FeedbackLaw
    pi0: np.ndarray
    residual_norm: float
    iterations: int
    predicted_sigma_y: CovarianceTrajectory
    predicted_sigma_x: CovarianceTrajectory
    predicted_terminal_mean: np.ndarray | None = None


def natural_covariance(sys: DelayedSystem, grid: TimeGrid) -> CovarianceTrajectory:
    """Covariance of the transformed state under zero control."""
    return propagate_lyapunov(sys.A, sys.noise_intensity(), np.zeros((sys.n, sys.n)), grid)


def _sym_to_vec(p: np.ndarray) -> np.ndarray:
    return p[np.triu_indices(p.shape[0])]


def _vec_to_sym(vec: np.ndarray, n: int) -> np.ndarray:
    p = np.zeros((n, n))
    p[np.triu_indices(n)] = vec
    return p + np.triu(p, 1).T


class _JointPropagator:
    """One RK4 pass of the coupled gain/covariance dynamics on a fixed grid.

    Coefficient values are precomputed on the half-step lattice so every RK4
    stage sees exact samples and the pass keeps fourth order.
    """

    def __init__(self, sys: DelayedSystem, grid: TimeGrid, R, steps: int = 128):
        self.grid = grid
        self.n = sys.n
        half_times = grid.refined(2).nodes()
        self.a_half = np.stack([np.asarray(sys.A(t), dtype=float) for t in half_times])
        bbar_half = artstein_input_values(sys, half_times, steps)
        r_fn = as_matrix_function(R if R is not None else np.eye(sys.m))
        rinv_half = np.stack([np.linalg.inv(r_fn(t)) for t in half_times])
        self.gain_core_half = np.einsum(
            "kij,kjl,kml->kim", bbar_half, rinv_half, bbar_half
        )
        sigma_half = np.stack([sys.sigma(t) for t in half_times])
        self.d_half = np.einsum("kij,klj->kil", sigma_half, sigma_half)
        self.bbar = bbar_half[::2]
        self.rinv = rinv_half[::2]

    def run(self, pi0: np.ndarray, blowup: float = SHOOTING_BLOWUP):
        """Returns (gain path, covariance path) or None on finite escape."""
        steps = self.grid.step_count
        dt = self.grid.dt
        n = self.n
        pis = np.empty((steps + 1, n, n))
        sigmas = np.empty((steps + 1, n, n))
        p = pi0.copy()
        s = np.zeros((n, n))
        pis[0] = p
        sigmas[0] = s

        def stage(p_, s_, idx):
            a = self.a_half[idx]
            core_p = self.gain_core_half[idx] @ p_
            dp = -(a.T @ p_) - p_ @ a + p_ @ core_p
            a_cl = a - core_p
            ds = a_cl @ s_ + s_ @ a_cl.T + self.d_half[idx]
            return dp, ds

        sixth = dt / 6.0
        for k in range(steps):
            i0 = 2 * k
            dp1, ds1 = stage(p, s, i0)
            dp2, ds2 = stage(p + 0.5 * dt * dp1, s + 0.5 * dt * ds1, i0 + 1)
            dp3, ds3 = stage(p + 0.5 * dt * dp2, s + 0.5 * dt * ds2, i0 + 1)
            dp4, ds4 = stage(p + dt * dp3, s + dt * ds3, i0 + 2)
            p = symmetrize(p + sixth * (dp1 + 2.0 * dp2 + 2.0 * dp3 + dp4))
            s = symmetrize(s + sixth * (ds1 + 2.0 * ds2 + 2.0 * ds3 + ds4))
            if not (np.all(np.abs(p) < blowup) and np.all(np.abs(s) < blowup)):
                return None
            pis[k + 1] = p
            sigmas[k + 1] = s
        return pis, sigmas


def _predicted_state_covariance(
    sys: DelayedSystem, sigma_y: CovarianceTrajectory, phi_steps: int = 128
) -> CovarianceTrajectory:
    """Map a transformed covariance path on [0, T-h] to state space on [h, T]."""
    grid = sigma_y.grid
    x_grid = TimeGrid(grid.t_start + sys.h, grid.t_end + sys.h, grid.step_count)
    floors = sigma_min_profile(sys, x_grid.nodes())
    values = np.empty_like(sigma_y.values)
    if sys.A.is_constant:
        phi = fundamental_matrix(sys.A, 0.0, sys.h, phi_steps)
        for k in range(values.shape[0]):
            values[k] = symmetrize(phi @ sigma_y.values[k] @ phi.T + floors[k])
    else:
        for k, t in enumerate(x_grid.nodes()):
            phi = fundamental_matrix(sys.A, t - sys.h, t, phi_steps)
            values[k] = symmetrize(phi @ sigma_y.values[k] @ phi.T + floors[k])
    return CovarianceTrajectory(x_grid, values)


def synthesize_covariance_steering(
    sys: DelayedSystem,
    sigma_target: np.ndarray,
    R=None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    grid: TimeGrid | None = None,
    check_controllability: bool = True,
) -> ShootingResult:
    """Find the gain schedule steering the transformed covariance to a target.

    Shooting on the initial gain value: the upper triangle of the symmetric
    initial condition parametrizes the unknowns, the residual is the terminal
    covariance mismatch, and a damped quasi-Newton iteration with
    forward-difference Jacobians drives it below ``tol`` (relative Frobenius).
    Trial values whose Riccati solution escapes in finite time are treated as
    infinitely bad and rejected by the line search.
    """
    if check_controllability:
        report = controllability_report(sys, tau_samples=8, steps=64)
        if not report.controllable:
            raise ControllabilityError(report.summary_line())
    target = np.asarray(sigma_target, dtype=float)
    n = sys.n
    if grid is None:
        grid = TimeGrid(0.0, sys.T - sys.h, DEFAULT_GRID_STEPS)
    propagator = _JointPropagator(sys, grid, R)
    target_norm = max(np.linalg.norm(target, "fro"), 1e-300)
    dof = n * (n + 1) // 2

    def residual(vec):
        run = propagator.run(_vec_to_sym(vec, n))
        if run is None:
            return None, None
        pis, sigmas = run
        return _sym_to_vec(sigmas[-1] - target), (pis, sigmas)

    vec = np.zeros(dof)
    res, run = residual(vec)
    if res is None:
        raise ConvergenceError("zero initial gain already escapes in finite time")
    best_norm = np.linalg.norm(res) / target_norm
    iterations = 0
    while best_norm > tol and iterations < max_iter:
        iterations += 1
        jac = np.empty((dof, dof))
        for i in range(dof):
            delta = JACOBIAN_REL_STEP * max(1.0, abs(vec[i]))
            bumped = vec.copy()
            bumped[i] += delta
            res_i, _ = residual(bumped)
            if res_i is None:  # bump left the admissible domain: probe inward
                bumped[i] = vec[i] - delta
                res_i, _ = residual(bumped)
                if res_i is None:
                    raise ConvergenceError(
                        "Jacobian probe escaped in finite time on both sides",
                        best=vec,
                        residual=best_norm,
                    )
                jac[:, i] = (res - res_i) / delta
            else:
                jac[:, i] = (res_i - res) / delta
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(jac, -res, rcond=None)

        accepted = False
        alpha = 1.0
        for _ in range(30):
            trial = vec + alpha * step
            res_t, run_t = residual(trial)
            if res_t is not None and np.linalg.norm(res_t) < np.linalg.norm(res):
                vec, res, run = trial, res_t, run_t
                best_norm = np.linalg.norm(res) / target_norm
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            raise ConvergenceError(
                f"line search stalled at relative residual {best_norm:.3e}",
                best=_vec_to_sym(vec, n),
                residual=best_norm,
            )

    if best_norm > tol:
        raise ConvergenceError(
            f"no convergence after {iterations} iterations "
            f"(relative residual {best_norm:.3e})",
            best=_vec_to_sym(vec, n),
            residual=best_norm,
        )

    pis, sigmas = run
    pi0 = _vec_to_sym(vec, n)
    law = FeedbackLaw(
        kind="steering",
        grid=grid,
        gain_schedule=MatrixPath(grid, pis),
        r_inverse=MatrixPath(grid, propagator.rinv),
        bbar=MatrixPath(grid, propagator.bbar),
    )
    sigma_y = CovarianceTrajectory(grid, sigmas)
    return ShootingResult(
        law=law,
        pi0=pi0,
        residual_norm=best_norm,
        iterations=iterations,
        predicted_sigma_y=sigma_y,
        predicted_sigma_x=_predicted_state_covariance(sys, sigma_y),
    )


def steer_to_state_covariance(
    problem: SteeringProblem,
    R=None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    grid: TimeGrid | None = None,
) -> ShootingResult:
    """End-to-end mean and covariance steering in original coordinates.

    Composes the coordinate reduction, the covariance-target mapping, the
    covariance shooting solve, and the drift feedforward.  The stored
    feedforward also carries the gain acting on the planned mean, so a
    simulator applying ``u = -K y + feedforward`` to the reduced system
    reproduces both the planned mean and the planned covariance.
    """
    sys = problem.system
    target_y = target_for_artstein(sys, problem.sigma_target)
    reduced = reduce_problem(problem)
    if grid is None:
        grid = TimeGrid(0.0, sys.T - sys.h, DEFAULT_GRID_STEPS)
    shot = synthesize_covariance_steering(
        reduced.system, target_y, R=R, tol=tol, max_iter=max_iter, grid=grid
    )

    half_grid = grid.refined(2)
    ff_half = drift_feedforward(reduced, half_grid)
    mean_half = _transformed_mean_plan(reduced.system, ff_half, half_grid)

    gains = shot.law.gain_array()
    count = grid.step_count + 1
    total_ff = np.empty((count, sys.m, 1))
    for k in range(count):
        total_ff[k, :, 0] = ff_half.values[2 * k, :, 0] + gains[k] @ mean_half[2 * k]
    law = FeedbackLaw(
        kind="steering",
        grid=grid,
        gain_schedule=shot.law.gain_schedule,
        r_inverse=shot.law.r_inverse,
        bbar=shot.law.bbar,
        feedforward=MatrixPath(grid, total_ff),
    )

    terminal_mean = _terminal_mean_in_original_coordinates(
        reduced, mean_half[-1], phi_steps=128
    )
    return ShootingResult(
        law=law,
        pi0=shot.pi0,
        residual_norm=shot.residual_norm,
        iterations=shot.iterations,
        predicted_sigma_y=shot.predicted_sigma_y,
        predicted_sigma_x=shot.predicted_sigma_x,
        predicted_terminal_mean=terminal_mean,
    )


def _transformed_mean_plan(
    sys: DelayedSystem, ff: MatrixPath, half_grid: TimeGrid
) -> np.ndarray:
    """RK4 mean of ``dy/dt = A y + Bbar u_ff + rbar`` sampled on ``half_grid``."""
    quarter = half_grid.refined(2).nodes()
    a_q = np.stack([np.asarray(sys.A(t), dtype=float) for t in quarter])
    bbar_q = artstein_input_values(sys, quarter)
    force_q = np.stack(
        [bbar_q[j] @ ff(t)[:, 0] + sys.r(t)[:, 0] for j, t in enumerate(quarter)]
    )
    count = half_grid.step_count + 1
    out = np.empty((count, sys.n))
    y = np.zeros(sys.n)
    out[0] = y
    dt = half_grid.dt
    for k in range(half_grid.step_count):
        i0 = 2 * k
        k1 = a_q[i0] @ y + force_q[i0]
        k2 = a_q[i0 + 1] @ (y + 0.5 * dt * k1) + force_q[i0 + 1]
        k3 = a_q[i0 + 1] @ (y + 0.5 * dt * k2) + force_q[i0 + 1]
        k4 = a_q[i0 + 2] @ (y + dt * k3) + force_q[i0 + 2]
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = y
    return out


def _terminal_mean_in_original_coordinates(
    reduced: ReducedProblem, y_final: np.ndarray, phi_steps: int
) -> np.ndarray:
    """Predicted E[X(T)]: reference endpoint plus the carried transformed mean.

    The drift keeps acting over the final (uncontrollable) delay window, so
    the carried mean picks up one more drift integral.
    """
    sys = reduced.system
    t_mid = sys.T - sys.h
    phi = fundamental_matrix(sys.A, t_mid, sys.T, phi_steps)
    tail_steps = 32
    nodes = t_mid + (sys.h / tail_steps) * np.arange(tail_steps + 1)
    family = transition_family(sys.A, nodes, anchor_index=-1, refine=2)
    samples = np.stack(
        [(family[k] @ sys.r(nodes[k]))[:, 0] for k in range(tail_steps + 1)]
    )
    tail = simpson_combine(samples[:, :, None], sys.h / tail_steps)[:, 0]
    return reduced.x_ref(sys.T) + phi @ y_final + tail


def independent_terminal_covariance(
    sys: DelayedSystem, law: FeedbackLaw, refine: int = 2
) -> np.ndarray:
    """Re-propagate the closed-loop covariance with the generic Lyapunov solver.

    Runs at ``refine`` times the law's resolution; used to confirm shooting
    results through an independent code path.
    """
    generator = law.closed_loop_generator(sys.A)
    grid = law.grid.refined(refine)
    traj = propagate_lyapunov(
        generator, sys.noise_intensity(), np.zeros((sys.n, sys.n)), grid
    )
    return traj.at_node(grid.step_count)
