"""Structural covariance quantities of the delayed system.

The unavoidable covariance floor accumulated over one delay window, the
controllability Grammians of the delayed and transformed systems, the
covariance map between original and transformed coordinates, and the
weighted variance lower-bound profile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BelowThresholdError, DomainError, ParameterError, TimeRangeError
from .model import DelayedSystem, TimeVaryingMatrix, artstein_input_values
from .numerics import (
    TimeGrid,
    fundamental_matrix,
    require_psd,
    simpson_combine,
    symmetrize,
    transition_family,
)

SIGMA_MIN_STEPS = 64
GRAMIAN_STEPS = 128
PHI_STEPS = 256
COND_LIMIT = 1e10
SV_REL_LIMIT = 1e-12


def _as_weight(Q, n: int) -> TimeVaryingMatrix:
    if isinstance(Q, TimeVaryingMatrix):
        return Q
    return TimeVaryingMatrix.constant(np.broadcast_to(np.asarray(Q, dtype=float), (n, n)))


def _noise_window_covariance(
    sys: DelayedSystem, lo: float, t: float, steps: int, refine: int
) -> np.ndarray:
    """Simpson integral of ``Phi(t,s) sigma(s) sigma(s)' Phi(t,s)'`` over [lo, t]."""
    if t <= lo:
        return np.zeros((sys.n, sys.n))
    nodes = lo + ((t - lo) / steps) * np.arange(steps + 1)
    family = transition_family(sys.A, nodes, anchor_index=-1, refine=refine)
    samples = np.empty((steps + 1, sys.n, sys.n))
    for k in range(steps + 1):
        g = family[k] @ sys.sigma(nodes[k])
        samples[k] = g @ g.T
    return symmetrize(simpson_combine(samples, (t - lo) / steps))


def sigma_min(
    sys: DelayedSystem, t: float, steps: int = SIGMA_MIN_STEPS, refine: int = 4
) -> np.ndarray:
    """Covariance floor at time ``t``: noise accumulated over one delay window.

    No control can push the state covariance below this symmetric PSD
    matrix, because inputs issued during [t-h, t] have not reached the state
    yet.  Defined for t in [h, T].
    """
    tol = 1e-9 * max(1.0, sys.T)
    if t < sys.h - tol or t > sys.T + tol:
        raise TimeRangeError(f"t={t:.6g} outside [{sys.h:.6g}, {sys.T:.6g}]")
    return _noise_window_covariance(sys, t - sys.h, t, steps, refine)


def accumulated_noise_covariance(
    sys: DelayedSystem, t: float, steps: int = SIGMA_MIN_STEPS, refine: int = 4
) -> np.ndarray:
    """Uncontrollable noise covariance with the window clipped at time zero.

    Coincides with :func:`sigma_min` for t >= h; for earlier times every
    disturbance since the start is still uncontrollable, so the window is
    [0, t].  Used for reporting over full horizons.
    """
    if t < 0.0:
        raise TimeRangeError(f"t={t:.6g} is negative")
    return _noise_window_covariance(sys, max(0.0, t - sys.h), t, steps, refine)


def sigma_min_profile(
    sys: DelayedSystem,
    times: np.ndarray,
    steps: int = SIGMA_MIN_STEPS,
    refine: int = 4,
    clip_start: bool = False,
) -> np.ndarray:
    """Evaluate the covariance floor at many times.

    With constant coefficients the floor is shift-invariant for t >= h, so a
    single window integral serves every such node.
    """
    times = np.asarray(times, dtype=float)
    out = np.empty((times.shape[0], sys.n, sys.n))
    shared = None
    use_shared = sys.A.is_constant and sys.sigma.is_constant
    for k, t in enumerate(times):
        if not clip_start or t >= sys.h:
            if use_shared:
                if shared is None:
                    shared = sigma_min(sys, max(t, sys.h), steps, refine)
                out[k] = shared
            else:
                out[k] = sigma_min(sys, t, steps, refine)
        else:
            out[k] = accumulated_noise_covariance(sys, t, steps, refine)
    return out


def covariance_from_artstein(
    sys: DelayedSystem,
    sigma_y: np.ndarray,
    t: float,
    steps: int = PHI_STEPS,
) -> np.ndarray:
    """Map a transformed-state covariance at t-h to the state covariance at t.

    The state covariance splits into the controllable part, carried forward
    across one delay window, plus the structural floor:
    ``Phi(t,t-h) S Phi(t,t-h)' + sigma_min(t)``.
    """
    sigma_y = require_psd(np.asarray(sigma_y, dtype=float), "sigma_y")
    tol = 1e-9 * max(1.0, sys.T)
    if t < sys.h - tol:
        raise TimeRangeError(f"t={t:.6g} is below the delay {sys.h:.6g}")
    phi = fundamental_matrix(sys.A, t - sys.h, t, steps)
    return symmetrize(phi @ sigma_y @ phi.T + sigma_min(sys, t))


def target_for_artstein(
    sys: DelayedSystem,
    sigma_x_target: np.ndarray,
    steps: int = PHI_STEPS,
) -> np.ndarray:
    """Transformed-coordinates covariance target equivalent to a state target.

    Inverts the congruence of :func:`covariance_from_artstein` at the
    horizon.  The state target must exceed the covariance floor; otherwise
    the request is structurally unreachable and a
    :class:`BelowThresholdError` is raised.
    """
    sigma_x_target = np.asarray(sigma_x_target, dtype=float)
    floor = sigma_min(sys, sys.T)
    excess = symmetrize(sigma_x_target - floor)
    scale = max(1.0, float(np.abs(sigma_x_target).max()))
    if np.linalg.eigvalsh(excess)[0] <= SV_REL_LIMIT * scale:
        raise BelowThresholdError(
            "target covariance does not exceed the structural floor at the horizon"
        )
    phi = fundamental_matrix(sys.A, sys.T - sys.h, sys.T, steps)
    half = np.linalg.solve(phi, excess)
    return symmetrize(np.linalg.solve(phi, half.T).T)


def gramian(
    sys: DelayedSystem,
    tau: float,
    variant: str,
    steps: int = GRAMIAN_STEPS,
    phi_steps: int = PHI_STEPS,
) -> np.ndarray:
    """Controllability Grammian over the trailing control interval.

    ``variant="delayed"`` integrates the raw input matrix against the flow
    to T+h over [tau, T+h]; ``variant="artstein"`` integrates the
    delay-compensated input matrix against the flow to T over [tau, T].
    Invertibility over every such interval is the total-controllability
    assumption behind all synthesis routines.
    """
    if variant not in ("delayed", "artstein"):
        raise ParameterError(f"variant must be 'delayed' or 'artstein', got {variant!r}")
    end = sys.T + sys.h if variant == "delayed" else sys.T
    tol = 1e-9 * max(1.0, end)
    if tau < -tol or tau >= end - tol:
        raise TimeRangeError(f"tau={tau:.6g} outside [0, {end:.6g})")
    nodes = tau + ((end - tau) / steps) * np.arange(steps + 1)
    family = transition_family(sys.A, nodes, anchor_index=-1, refine=2)
    if variant == "delayed":
        inputs = np.stack([sys.B(s) for s in nodes])
    else:
        inputs = artstein_input_values(sys, nodes, phi_steps)
    samples = np.empty((steps + 1, sys.n, sys.n))
    for k in range(steps + 1):
        col = family[k] @ inputs[k]
        samples[k] = col @ col.T
    return symmetrize(simpson_combine(samples, (end - tau) / steps))


@dataclass(frozen=True)
class ControllabilityReport:
    """Spectrum of the delayed Grammian over a range of interval starts."""

    tau_grid: np.ndarray
    min_singular_values: np.ndarray
    condition_numbers: np.ndarray
    delayed_vs_artstein_residual: float
    verdict: str  # "controllable" | "deficient"
    deficient_rank: int | None = None
    deficient_tau: float | None = None

    @property
    def controllable(self) -> bool:
        return self.verdict == "controllable"

    def summary_line(self) -> str:
        if self.controllable:
            return (
                f"controllable: min singular value {self.min_singular_values.min():.3e}, "
                f"worst condition number {self.condition_numbers.max():.3e}"
            )
        return (
            f"deficient: rank {self.deficient_rank} at tau={self.deficient_tau:.6g} "
            f"(min singular value {self.min_singular_values.min():.3e})"
        )

    def csv_rows(self):
        for tau, sv, cond in zip(
            self.tau_grid, self.min_singular_values, self.condition_numbers
        ):
            yield tau, sv, cond


def controllability_report(
    sys: DelayedSystem,
    tau_samples: int = 12,
    steps: int = GRAMIAN_STEPS,
    cond_limit: float = COND_LIMIT,
) -> ControllabilityReport:
    """Sweep the delayed Grammian over interval starts and grade invertibility.

    The tau grid leaves a relative margin at the degenerate end (the
    Grammian vanishes as the interval shrinks to nothing).  Also
    cross-checks the delayed and transformed Grammians against the exact
    change-of-variables identity relating them, reporting the worst
    normalized Frobenius mismatch.
    """
    if tau_samples < 2:
        raise ParameterError(f"tau_samples must be at least 2, got {tau_samples}")
    end = sys.T + sys.h
    taus = np.linspace(0.0, end * (1.0 - 1e-3), tau_samples)
    min_svs = np.empty(tau_samples)
    conds = np.empty(tau_samples)
    worst = None
    for j, tau in enumerate(taus):
        g = gramian(sys, tau, "delayed", steps)
        svs = np.linalg.svd(g, compute_uv=False)
        min_svs[j] = svs[-1]
        top = svs[0]
        deficient_here = min_svs[j] < SV_REL_LIMIT * max(top, 1e-300)
        conds[j] = np.inf if deficient_here else top / svs[-1]
        if (deficient_here or conds[j] > cond_limit) and worst is None:
            rank = int(np.sum(svs >= SV_REL_LIMIT * max(top, 1e-300)))
            worst = (rank, tau)

    phi = fundamental_matrix(sys.A, sys.T + sys.h, sys.T, PHI_STEPS)
    residual = 0.0
    for tau in np.linspace(0.0, sys.T * (1.0 - 1e-3), tau_samples):
        lhs = gramian(sys, tau, "artstein", steps)
        rhs = phi @ gramian(sys, tau + sys.h, "delayed", steps) @ phi.T
        denom = max(np.linalg.norm(lhs, "fro"), 1e-300)
        residual = max(residual, np.linalg.norm(lhs - rhs, "fro") / denom)

    if worst is None:
        return ControllabilityReport(taus, min_svs, conds, residual, "controllable")
    return ControllabilityReport(
        taus, min_svs, conds, residual, "deficient", worst[0], worst[1]
    )


@dataclass(frozen=True)
class VarianceProfile:
    """Weighted variance lower bound: running profile plus terminal term."""

    grid: TimeGrid
    running: np.ndarray  # weighted covariance floor at each node
    terminal: float
    total: float


def min_variance_profile(
    sys: DelayedSystem,
    Q,
    G,
    grid: TimeGrid,
    steps: int = SIGMA_MIN_STEPS,
) -> VarianceProfile:
    """Lower bound on the weighted-variance cost achievable by any control.

    ``running[i] = trace(Q(t_i) @ sigma_min(t_i))`` on a grid spanning
    [h, T]; the total adds the time integral of the running profile and the
    terminal term ``trace(G @ sigma_min(T))``.
    """
    tol = 1e-9 * max(1.0, sys.T)
    if abs(grid.t_start - sys.h) > tol or abs(grid.t_end - sys.T) > tol:
        raise ParameterError(f"profile grid must span [{sys.h:.6g}, {sys.T:.6g}]")
    q = _as_weight(Q, sys.n)
    g = require_psd(np.asarray(G, dtype=float), "G")
    nodes = grid.nodes()
    require_psd(q(nodes[0]), "Q")
    require_psd(q(nodes[-1]), "Q")

    floors = sigma_min_profile(sys, nodes, steps)
    running = np.array([float(np.trace(q(t) @ floors[k])) for k, t in enumerate(nodes)])
    terminal = float(np.trace(g @ floors[-1]))
    if grid.step_count % 2 == 0:
        integral = float(simpson_combine(running[:, None, None], grid.dt)[0, 0])
    else:
        integral = float(np.trapezoid(running, dx=grid.dt))
    return VarianceProfile(grid, running, terminal, integral + terminal)
