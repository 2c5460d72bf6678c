"""Tests for the system data model, configuration loading and reductions."""

import json
import math

import numpy as np
import pytest
from scipy.linalg import expm

from delaysteer.building import make_building_system
from delaysteer.errors import (
    ConfigError,
    HistoryError,
    ParameterError,
    ShapeError,
    TimeRangeError,
)
from delaysteer.model import (
    DelayedSystem,
    SteeringProblem,
    TimeVaryingMatrix,
    artstein_input_matrix,
    artstein_input_schedule,
    artstein_transform,
    drift_feedforward,
    load_system,
    reduce_problem,
)
from delaysteer.numerics import TimeGrid, integrate_linear_ode


def minimal_config(**overrides):
    doc = {
        "dim_state": 1,
        "dim_control": 1,
        "horizon": 1.0,
        "delay": 0.25,
        "A": {"kind": "constant", "value": [[0.0]]},
        "B": {"kind": "constant", "value": [[1.0]]},
        "sigma": {"kind": "constant", "value": [[1.0]]},
        "drift": {"kind": "constant", "value": [[0.0]]},
        "initial_state": [0.0],
    }
    doc.update(overrides)
    return doc


def scalar_system(a=0.0, b=1.0, sigma=1.0, r=0.0, h=0.25, T=1.0, x0=0.0):
    return DelayedSystem(
        A=TimeVaryingMatrix.constant([[a]]),
        B=TimeVaryingMatrix.constant([[b]]),
        r=TimeVaryingMatrix.constant([[r]]),
        sigma=TimeVaryingMatrix.constant([[sigma]]),
        h=h,
        T=T,
        X0=np.array([x0]),
    )


class TestTimeVaryingMatrix:
    def test_sampled_exact_at_nodes_linear_between(self):
        times = [0.0, 1.0, 3.0]
        samples = [[[0.0, 0.0]], [[2.0, 1.0]], [[4.0, 3.0]]]
        tvm = TimeVaryingMatrix.sampled(times, samples)
        assert np.array_equal(tvm(1.0), [[2.0, 1.0]])
        assert np.allclose(tvm(0.5), [[1.0, 0.5]])
        assert np.allclose(tvm(2.0), [[3.0, 2.0]])
        # clamped outside the sample range
        assert np.array_equal(tvm(9.0), [[4.0, 3.0]])

    def test_sampled_needs_increasing_times(self):
        with pytest.raises(ParameterError):
            TimeVaryingMatrix.sampled([0.0, 0.0], [[[1.0]], [[2.0]]])

    def test_constant_rejects_nan(self):
        with pytest.raises(ParameterError):
            TimeVaryingMatrix.constant([[np.nan]])


class TestLoadSystem:
    def test_minimal_scalar_document(self):
        sys = load_system(minimal_config())
        assert isinstance(sys, DelayedSystem)
        assert sys.n == 1 and sys.m == 1

    def test_json_string_input(self):
        sys = load_system(json.dumps(minimal_config()))
        assert sys.h == 0.25

    def test_delay_equal_horizon_names_field(self):
        with pytest.raises(ConfigError) as info:
            load_system(minimal_config(delay=1.0))
        assert info.value.field == "delay"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            load_system(minimal_config(extra=1))

    def test_dimension_mismatch_names_field(self):
        with pytest.raises(ConfigError) as info:
            load_system(minimal_config(B={"kind": "constant", "value": [[1.0, 2.0]]}))
        assert "B" in str(info.value)

    def test_non_spd_target_rejected(self):
        doc = minimal_config(target_mean=[1.0], target_covariance=[[-0.5]])
        with pytest.raises(ConfigError):
            load_system(doc)

    def test_targets_must_come_together(self):
        with pytest.raises(ConfigError):
            load_system(minimal_config(target_mean=[1.0]))

    def test_steering_problem_round_trip(self):
        doc = minimal_config(target_mean=[1.0], target_covariance=[[0.2]])
        problem = load_system(doc)
        assert isinstance(problem, SteeringProblem)
        assert problem.sigma_target[0, 0] == 0.2

    def test_builtin_building_document(self):
        doc = {
            "dim_state": 2,
            "dim_control": 1,
            "horizon": 7200.0,
            "delay": 500.0,
            "A": {"kind": "builtin", "name": "building"},
            "B": {"kind": "builtin", "name": "building"},
            "sigma": {"kind": "builtin", "name": "building"},
            "drift": {"kind": "builtin", "name": "building"},
            "initial_state": [20.0, 10.0],
        }
        sys = load_system(doc)
        assert sys.n == 2 and sys.m == 1
        assert np.allclose(sys.A(0.0), [[-5e-4, 5e-4], [0.0, -3.5e-4]])
        assert sys.r(0.0)[1, 0] == pytest.approx(3.5e-4 * 10.0)

    def test_sampled_coverage_enforced(self):
        doc = minimal_config(
            A={"kind": "sampled", "times": [0.0, 0.5], "values": [[[0.0]], [[0.0]]]}
        )
        with pytest.raises(ConfigError):
            load_system(doc)

    def test_invalid_json_text(self):
        with pytest.raises(ConfigError):
            load_system("{not json")


class TestReduceProblem:
    def test_stationary_reference(self):
        sys = scalar_system(x0=2.0)
        problem = SteeringProblem(sys, np.array([2.0]), np.array([[1.0]]))
        reduced = reduce_problem(problem)
        assert np.allclose(reduced.x_ref(0.37), [2.0])
        for t in (0.0, 0.4, 0.9):
            assert reduced.system.r(t)[0, 0] == pytest.approx(0.0)
        assert np.array_equal(reduced.system.X0, [0.0])

    def test_reference_endpoints_exact(self):
        sys = scalar_system(x0=-1.0)
        problem = SteeringProblem(sys, np.array([3.0]), np.array([[1.0]]))
        reduced = reduce_problem(problem)
        assert reduced.x_ref(0.0)[0] == -1.0
        assert reduced.x_ref(sys.T)[0] == 3.0

    def test_pure_translation_drift(self):
        # A=0, r=0, X0=0, X_T=v: shifted coordinates see the constant drift -v/T
        sys = scalar_system()
        problem = SteeringProblem(sys, np.array([2.0]), np.array([[1.0]]))
        reduced = reduce_problem(problem)
        for t in (0.0, 0.5, 1.0):
            assert reduced.system.r(t)[0, 0] == pytest.approx(-2.0)

    def test_reduction_preserves_dynamics(self):
        # integrating the reduced mean and adding the reference back must
        # reproduce the original uncontrolled mean
        rng = np.random.default_rng(3)
        a = rng.standard_normal((2, 2)) * 0.5
        sys = DelayedSystem(
            A=TimeVaryingMatrix.constant(a),
            B=TimeVaryingMatrix.constant([[1.0], [0.5]]),
            r=TimeVaryingMatrix.constant([[0.3], [-0.2]]),
            sigma=TimeVaryingMatrix.constant([[0.1], [0.1]]),
            h=0.2,
            T=1.0,
            X0=np.array([1.0, -1.0]),
        )
        problem = SteeringProblem(sys, np.array([0.5, 0.5]), np.eye(2))
        reduced = reduce_problem(problem)
        grid = TimeGrid(0.0, 1.0, 400)
        original = integrate_linear_ode(sys.A, lambda t: sys.r(t)[:, 0], sys.X0, grid)
        shifted = integrate_linear_ode(
            reduced.system.A, lambda t: reduced.system.r(t)[:, 0], np.zeros(2), grid
        )
        recovered = shifted + np.stack([reduced.x_ref(t) for t in grid.nodes()])
        assert np.allclose(recovered, original, atol=1e-9)


class TestArtsteinInputMatrix:
    def test_zero_generator_shifts_input(self):
        b = TimeVaryingMatrix.sampled(
            [0.0, 1.25], [[[1.0]], [[3.5]]]
        )
        sys = DelayedSystem(
            A=TimeVaryingMatrix.constant([[0.0]]),
            B=b,
            r=TimeVaryingMatrix.constant([[0.0]]),
            sigma=TimeVaryingMatrix.constant([[1.0]]),
            h=0.25,
            T=1.0,
            X0=np.zeros(1),
        )
        assert artstein_input_matrix(sys, 0.5)[0, 0] == pytest.approx(b(0.75)[0, 0])

    def test_scalar_constant_closed_form(self):
        a, b, h = 0.7, 2.0, 0.25
        sys = scalar_system(a=a, b=b, h=h)
        got = artstein_input_matrix(sys, 0.3)[0, 0]
        assert got == pytest.approx(b * math.exp(-a * h), abs=1e-10)

    def test_building_matches_exponential_oracle(self):
        sys = make_building_system()
        got = artstein_input_matrix(sys, 0.0)
        expected = expm(-500.0 * sys.A(0.0)) @ sys.B(500.0)
        assert np.linalg.norm(got - expected) < 1e-8

    def test_constant_system_schedule_is_constant(self):
        sys = scalar_system(a=-0.4)
        sched = artstein_input_schedule(sys, TimeGrid(0.0, sys.T - sys.h, 10))
        assert np.allclose(sched.values, sched.values[0])
        # cached schedule agrees with fresh spot evaluation
        fresh = artstein_input_matrix(sys, 0.3)
        assert np.allclose(sched(0.3), fresh, atol=1e-12)

    def test_out_of_range_time(self):
        sys = scalar_system()
        with pytest.raises(TimeRangeError):
            artstein_input_matrix(sys, sys.T + 0.5)


class TestDriftFeedforward:
    def test_zero_drift_gives_zero_control(self):
        sys = scalar_system(h=0.1, T=1.1)
        problem = SteeringProblem(sys, np.array([0.0]), np.array([[1.0]]))
        reduced = reduce_problem(problem)
        ff = drift_feedforward(reduced, TimeGrid(0.0, 1.0, 100))
        assert np.allclose(ff.values, 0.0, atol=1e-12)

    def test_constant_drift_cancellation(self):
        # A=0, B=1, constant drift c: the drift acts over the whole horizon T
        # while the (constant) least-energy input only acts over T - h, so the
        # cancelling level is -c T / (T - h); the closed-loop mean must land
        # exactly at the target.
        c = 0.8
        sys = scalar_system(h=0.1, T=1.1, r=c)
        problem = SteeringProblem(sys, np.array([0.0]), np.array([[1.0]]))
        reduced = reduce_problem(problem)
        ff = drift_feedforward(reduced, TimeGrid(0.0, 1.0, 100))
        assert np.allclose(ff.values[:, 0, 0], -c * 1.1, atol=1e-9)
        mean = _propagate_mean_with_delay(sys, ff, steps=22000)
        assert abs(mean[0]) < 1e-4

    def test_matches_discrete_least_norm_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((2, 2)) * 0.4
        sys = DelayedSystem(
            A=TimeVaryingMatrix.constant(a),
            B=TimeVaryingMatrix.constant([[1.0, 0.0], [0.3, 1.0]]),
            r=TimeVaryingMatrix.constant([[0.5], [-0.3]]),
            sigma=TimeVaryingMatrix.constant([[0.1], [0.1]]),
            h=0.2,
            T=1.2,
            X0=np.zeros(2),
        )
        problem = SteeringProblem(sys, np.zeros(2), np.eye(2))
        reduced = reduce_problem(problem)
        grid = TimeGrid(0.0, 1.0, 200)
        ff = drift_feedforward(reduced, grid)

        # brute-force oracle: weighted least-norm solve of the discretized
        # reachability constraint; the drift sum runs over the full horizon
        # (trapezoid weights) while the control columns stop at T - h
        from delaysteer.model import artstein_input_values
        from delaysteer.numerics import transition_family

        nodes = grid.nodes()
        psi = transition_family(reduced.system.A, nodes, anchor_index=-1, refine=4)
        bbar = artstein_input_values(reduced.system, nodes)
        w = np.full(nodes.shape[0], grid.dt)
        w[0] = w[-1] = grid.dt / 2.0
        m = sys.m
        cols = np.concatenate(
            [math.sqrt(w[j]) * (psi[j] @ bbar[j]) for j in range(nodes.shape[0])], axis=1
        )
        full_nodes = np.linspace(0.0, sys.T, 1201)
        full_psi = transition_family(
            reduced.system.A, full_nodes, anchor_index=1000, refine=4
        )
        wf = np.full(full_nodes.shape[0], full_nodes[1] - full_nodes[0])
        wf[0] = wf[-1] = wf[1] / 2.0
        target = -sum(
            wf[j] * (full_psi[j] @ reduced.system.r(full_nodes[j])[:, 0])
            for j in range(full_nodes.shape[0])
        )
        solution, *_ = np.linalg.lstsq(cols, target, rcond=None)
        u_oracle = solution.reshape(nodes.shape[0], m) / np.sqrt(w)[:, None]
        assert np.allclose(ff.values[:, :, 0], u_oracle, atol=5e-4)

    def test_closed_loop_mean_reaches_target(self):
        # deterministic mean ODE under the feedforward lands on the target
        rng = np.random.default_rng(9)
        a = rng.standard_normal((2, 2)) * 0.3
        sys = DelayedSystem(
            A=TimeVaryingMatrix.constant(a),
            B=TimeVaryingMatrix.constant([[1.0], [0.4]]),
            r=TimeVaryingMatrix.constant([[0.2], [0.1]]),
            sigma=TimeVaryingMatrix.constant([[0.1], [0.1]]),
            h=0.2,
            T=1.2,
            X0=np.array([1.0, 0.0]),
        )
        problem = SteeringProblem(sys, np.array([-0.5, 0.8]), np.eye(2))
        reduced = reduce_problem(problem)
        grid = TimeGrid(0.0, 1.0, 400)
        ff = drift_feedforward(reduced, grid)
        mean = _propagate_mean_with_delay(sys, ff, steps=4800)
        assert np.allclose(mean, problem.x_target, atol=1e-4)

    def test_building_mean_reaches_consistent_target(self):
        sys = make_building_system()
        # only the indoor temperature is steerable; the outdoor target must be
        # whatever the uncontrolled mean reaches
        grid_full = TimeGrid(0.0, sys.T, 2000)
        natural = integrate_linear_ode(sys.A, lambda t: sys.r(t)[:, 0], sys.X0, grid_full)
        x_target = np.array([20.0, natural[-1][1]])
        problem = SteeringProblem(sys, x_target, np.eye(2))
        reduced = reduce_problem(problem)
        ff = drift_feedforward(reduced, TimeGrid(0.0, sys.T - sys.h, 2000))
        mean = _propagate_mean_with_delay(sys, ff, steps=14400)
        assert np.allclose(mean, x_target, atol=1e-3)


def _propagate_mean_with_delay(sys, ff, steps):
    """RK4 mean of the delayed system under an open-loop input schedule.

    The delayed input switches on discontinuously at t = h, so the two
    smooth pieces are integrated separately.
    """

    def rk4_piece(x, t0, t1, n_steps, u_of_t):
        dt = (t1 - t0) / n_steps

        def rhs(t, y):
            return sys.A(t) @ y + sys.B(t) @ u_of_t(t) + sys.r(t)[:, 0]

        for k in range(n_steps):
            t = t0 + k * dt
            k1 = rhs(t, x)
            k2 = rhs(t + dt / 2, x + dt / 2 * k1)
            k3 = rhs(t + dt / 2, x + dt / 2 * k2)
            k4 = rhs(t + dt, x + dt * k3)
            x = x + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        return x

    steps = int(steps)
    first = max(1, int(round(steps * sys.h / sys.T)))
    x = rk4_piece(sys.X0.copy(), 0.0, sys.h, first, lambda t: np.zeros(sys.m))
    return rk4_piece(x, sys.h, sys.T, steps, lambda t: ff(t - sys.h)[:, 0])


class TestArtsteinTransform:
    def test_zero_control_collapses(self):
        sys = scalar_system(a=-0.3)
        hist = np.zeros((26, 1))
        y = artstein_transform(np.array([1.7]), hist, sys, 0.5, 0.01)
        assert y[0] == pytest.approx(1.7)

    def test_unit_integral(self):
        # A=0, B=1, U=1, h=1: the window integral contributes exactly one
        sys = scalar_system(h=1.0, T=2.0)
        hist = np.ones((51, 1))
        y = artstein_transform(np.array([0.5]), hist, sys, 1.2, 1.0 / 50)
        assert y[0] == pytest.approx(1.5, abs=1e-12)

    def test_vanishing_window_bound(self):
        dt = 0.01
        sys = scalar_system(h=dt, T=1.0, b=2.0)
        hist = np.full((2, 1), 3.0)
        y = artstein_transform(np.array([0.0]), hist, sys, 0.5, dt)
        assert abs(y[0]) <= dt * 2.0 * 3.0 * 1.0001

    def test_incomplete_history_rejected(self):
        sys = scalar_system(h=0.5, T=1.0)
        with pytest.raises(HistoryError):
            artstein_transform(np.array([0.0]), np.zeros((3, 1)), sys, 0.6, 0.01)
