import numpy as np
import pytest

from dualmpc import qlpv, qp, rci, tmpc
from dualmpc.errors import ConfigurationError
from dualmpc.polytope import Hpoly, box_template
from conftest import random_model


TEMPLATE = box_template(2, 1)
Y = Hpoly.box([0.8])
EPS_U = np.ones(1)
CFG = tmpc.ControllerConfig()


@pytest.fixture
def model():
    return random_model(np.random.default_rng(42), infnorm=0.6, gain=0.25)


def solve(model, x_hat, y_ref=0.0, cfg=CFG, **kw):
    return tmpc.solve_tmpc(np.atleast_1d(x_hat), model, np.atleast_1d(y_ref),
                           cfg, TEMPLATE, Y, EPS_U, **kw)


def test_invalid_configs_rejected():
    with pytest.raises(ConfigurationError):
        tmpc.ControllerConfig(N=0)
    with pytest.raises(ConfigurationError):
        tmpc.ControllerConfig(gamma=1.0)
    with pytest.raises(ConfigurationError):
        tmpc.ControllerConfig(beta=1.0)
    cfg = tmpc.ControllerConfig(P=0.5 * np.eye(3))
    with pytest.raises(ConfigurationError):
        cfg.weights(2, 1)


def test_default_terminal_weight_zeroes_decrement_matrix():
    Q, P = CFG.weights(2, 1)
    M = Q + CFG.gamma ** 2 * P - P
    assert np.abs(M).max() <= 1e-12


def test_stationary_at_optimal_set_center(model):
    y_ref = np.array([0.2])
    rci_sol, _ = rci.solve_optimal_rci(model, y_ref, TEMPLATE, CFG.beta, EPS_U, Y)
    sol = solve(model, rci_sol.z_s, y_ref)
    assert sol.status == qp.QpStatus.OPTIMAL
    assert sol.cost == pytest.approx(rci_sol.cost, abs=1e-5)
    for k in range(sol.N + 1):
        assert sol.z[k] == pytest.approx(rci_sol.z_s, abs=1e-4)
        assert sol.v[k] == pytest.approx(rci_sol.v_s, abs=1e-4)
    assert tmpc.lyapunov_value(sol, rci_sol.cost) == pytest.approx(0.0, abs=1e-5)


def test_solution_satisfies_tube_output_and_input_rows(model):
    sol = solve(model, [0.3, -0.2], 0.5)
    assert sol.status == qp.QpStatus.OPTIMAL
    for k in range(sol.N + 1):
        for j in range(TEMPLATE.n_vertices):
            y = model.C @ (sol.z[k] + TEMPLATE.V[j] @ sol.rci.s)
            assert Y.violation(y) <= 1e-7
            u = sol.v[k] + TEMPLATE.vertex_input(sol.rci.c, j)
            assert np.abs(u).max() <= (1 - CFG.beta) * EPS_U[0] + 1e-7


def test_initial_row_and_embedded_rci_rows_hold(model):
    x_hat = np.array([0.25, 0.1])
    sol = solve(model, x_hat, -0.4)
    assert (TEMPLATE.F @ (x_hat - sol.z[0]) <= sol.rci.s + 1e-7).all()
    A, b = rci.rci_constraint_block(model, TEMPLATE, CFG.beta, EPS_U, Y, sol.rci.d)
    assert (A @ sol.rci.stack(sol.layout.xr) - b).max() <= 1e-7


class TestCandidateShift:
    def test_fixed_point_at_set_center(self, model):
        sol = solve(model, [0.0, 0.0])
        sol.z[-1] = sol.rci.z_s
        sol.v[-1] = sol.rci.v_s
        z, v = tmpc.candidate_shift(sol, CFG.gamma)
        assert z[-1] == pytest.approx(sol.rci.z_s)
        assert v[-1] == pytest.approx(sol.rci.v_s)

    def test_terminal_deviation_contracts_by_gamma(self, model):
        sol = solve(model, [0.1, 0.0])
        sol.z[-1] = sol.rci.z_s + np.array([1.0, 0.0])
        z, _ = tmpc.candidate_shift(sol, 0.95)
        assert z[-1] - sol.rci.z_s == pytest.approx([0.95, 0.0])

    def test_double_shift_contracts_by_gamma_squared(self, model):
        sol = solve(model, [0.1, 0.0])
        dev0 = sol.z[-1] - sol.rci.z_s
        z1, v1 = tmpc.candidate_shift(sol, CFG.gamma)
        sol.z, sol.v = z1, v1
        z2, _ = tmpc.candidate_shift(sol, CFG.gamma)
        assert z2[-1] - sol.rci.z_s == pytest.approx(CFG.gamma ** 2 * dev0, abs=1e-12)

    def test_shifted_candidate_feasible_next_step_frozen_theta(self, model):
        x_hat = np.array([0.2, -0.1])
        sol = solve(model, x_hat, 0.6)
        assert sol.status == qp.QpStatus.OPTIMAL
        u_c, lam = tmpc.nominal_input(sol, x_hat, TEMPLATE)
        assert not lam.relaxed
        # Propagate through the model with a perturbation inside the budget.
        u = u_c + np.array([CFG.beta * 0.9])
        x_next = qlpv.step(model, x_hat, u)
        A, b = tmpc._assemble_constraints(model, x_next, CFG, TEMPLATE, Y, EPS_U,
                                          sol.rci.d, sol.layout)
        cand = tmpc.warm_start_vector(sol, CFG.gamma)
        assert (A @ cand - b).max() <= 1e-9
        assert (TEMPLATE.F @ (x_next - sol.z[1]) - sol.rci.s).max() <= 1e-9
        # And the next solve, warm-started from the candidate, succeeds.
        nxt = solve(model, x_next, 0.6, warm_start=cand)
        assert nxt.status == qp.QpStatus.OPTIMAL


class TestNominalInput:
    def test_center_with_symmetric_inputs_returns_v0(self, model):
        sol = solve(model, [0.05, 0.05])
        # Symmetrize: equal and opposite vertex inputs cancel under uniform
        # weights at the set center of a symmetric box.
        sol.rci.c[:] = np.array([0.2, -0.2, -0.2, 0.2])
        sol.rci.s[:] = np.array([0.3, 0.4, 0.3, 0.4])
        sol.z[0] = np.array([0.05, 0.05])
        u, lam = tmpc.nominal_input(sol, np.array([0.05, 0.05]), TEMPLATE)
        assert lam.weights == pytest.approx([0.25] * 4, abs=1e-6)
        assert u == pytest.approx(sol.v[0], abs=1e-6)

    def test_at_vertex_adds_that_vertex_input(self, model):
        sol = solve(model, [0.0, 0.0])
        s = sol.rci.s
        if s.min() < 1e-6:  # ensure a nondegenerate vertex for the check
            sol.rci.s[:] = np.maximum(s, 0.1)
        x_vert = sol.z[0] + TEMPLATE.V[0] @ sol.rci.s
        u, lam = tmpc.nominal_input(sol, x_vert, TEMPLATE)
        assert lam.weights == pytest.approx([1.0, 0.0, 0.0, 0.0], abs=1e-5)
        assert u == pytest.approx(sol.v[0] + TEMPLATE.vertex_input(sol.rci.c, 0), abs=1e-4)

    def test_tracking_input_within_budget_random(self):
        rng = np.random.default_rng(9)
        for k in range(10):
            model = random_model(rng, infnorm=0.6, gain=0.25)
            x_hat = rng.uniform(-0.2, 0.2, size=2)
            sol = solve(model, x_hat, rng.uniform(-0.5, 0.5))
            if sol.status != qp.QpStatus.OPTIMAL:
                continue
            u, _ = tmpc.nominal_input(sol, x_hat, TEMPLATE)
            assert np.abs(u).max() <= (1 - CFG.beta) * EPS_U[0] + 1e-9


class TestLyapunov:
    def test_value_nonnegative_random_states(self, model):
        rng = np.random.default_rng(5)
        y_ref = np.array([0.3])
        rci_sol, _ = rci.solve_optimal_rci(model, y_ref, TEMPLATE, CFG.beta, EPS_U, Y)
        for _ in range(5):
            x_hat = rng.uniform(-0.25, 0.25, size=2)
            sol = solve(model, x_hat, y_ref)
            if sol.status == qp.QpStatus.OPTIMAL:
                assert tmpc.lyapunov_value(sol, rci_sol.cost) >= -1e-7

    def test_frozen_theta_decrease_along_nominal_loop(self, model):
        y_ref = np.array([0.4])
        rci_sol, _ = rci.solve_optimal_rci(model, y_ref, TEMPLATE, CFG.beta, EPS_U, Y)
        Q, _ = CFG.weights(2, 1)
        x_hat = np.array([0.3, -0.3])
        sol = solve(model, x_hat, y_ref)
        assert sol.status == qp.QpStatus.OPTIMAL
        lyap_prev = tmpc.lyapunov_value(sol, rci_sol.cost)
        for _ in range(40):
            u_c, _ = tmpc.nominal_input(sol, x_hat, TEMPLATE)
            m0 = np.concatenate([sol.z[0] - sol.rci.z_s, sol.v[0] - sol.rci.v_s])
            x_hat = qlpv.step(model, x_hat, u_c)
            sol = solve(model, x_hat, y_ref, warm_start=tmpc.warm_start_vector(sol, CFG.gamma))
            assert sol.status == qp.QpStatus.OPTIMAL
            lyap = tmpc.lyapunov_value(sol, rci_sol.cost)
            assert lyap - lyap_prev <= -(m0 @ Q @ m0) + 1e-6
            lyap_prev = lyap
        assert lyap < 1e-3
