import numpy as np
import pytest

from swarmpc.dynamics import ErrorModel, LeaderSignal
from swarmpc.objective import (
    ObjectiveSpec,
    SynthesisError,
    certify_gains,
    horizon_cost,
    lyapunov_residual,
    nonlinearity_margin,
    spectral_radius,
    stacked_slack_eigenvalue,
    stage_cost,
    synthesize_gains,
    terminal_penalty,
)
from swarmpc.topology import STATE_DIM, build_topology, chain_adjacency, line_slots

DT = 0.05


def make_setup(m=2, v=1.0):
    topo = build_topology(chain_adjacency(m), pinned=[0],
                          leader_offsets=line_slots(m, 1.0))
    model = ErrorModel(topo, DT)
    leader = LeaderSignal(pos=np.zeros(2), theta=0.0, v=v)
    spec = ObjectiveSpec.from_weights(topo, horizon=20)
    return topo, model, leader, spec


def test_stage_cost_zero_and_hand_value():
    q = np.eye(4)
    r = 0.5 * np.eye(2)
    assert stage_cost(np.zeros(4), np.zeros(2), q, r) == 0.0
    e = np.array([1.0, 0.0, 0.0, 0.0])
    u = np.array([1.0, 1.0])
    assert stage_cost(e, u, q, r) == pytest.approx(2.0)


def test_table_default_weights():
    topo, _, _, spec = make_setup()
    assert np.array_equal(spec.q_matrices[0], np.eye(8))
    assert np.array_equal(spec.r_matrices[0], 0.5 * np.eye(2))
    assert spec.beta == pytest.approx(1.1)


def test_objective_spec_validation():
    topo, _, _, _ = make_setup()
    bad_q = [np.array([[1.0, 2.0], [0.0, 1.0]])] * 2
    with pytest.raises(ValueError):
        ObjectiveSpec(topo=topo, horizon=5,
                      q_matrices=[np.eye(8), np.eye(8)],
                      r_matrices=[np.zeros((2, 2))] * 2)
    with pytest.raises(ValueError):
        ObjectiveSpec(topo=topo, horizon=0,
                      q_matrices=[np.eye(8)] * 2,
                      r_matrices=[np.eye(2)] * 2)


def test_horizon_cost_zero_and_single_stage():
    q = np.eye(4)
    r = 0.5 * np.eye(2)
    p = 2.0 * np.eye(4)
    zeros = np.zeros((3, 4))
    assert horizon_cost(zeros, np.zeros((3, 2)), np.zeros(4), q, r, p) == 0.0
    e = np.array([[1.0, 0.0, 0.0, 0.0]])
    u = np.array([[0.5, 0.0]])
    e_term = np.array([1.0, 1.0, 0.0, 0.0])
    expected = stage_cost(e[0], u[0], q, r) + e_term @ p @ e_term
    assert horizon_cost(e, u, e_term, q, r, p) == pytest.approx(expected)


def test_horizon_cost_matches_naive_accumulator():
    rng = np.random.default_rng(4)
    q = np.eye(8)
    r = 0.5 * np.eye(2)
    p = np.diag(rng.uniform(0.5, 2.0, 4))
    errs = rng.standard_normal((6, 8))
    us = rng.standard_normal((6, 2))
    e_term = rng.standard_normal(4)
    naive = 0.0
    for k in range(6):
        naive += errs[k] @ q @ errs[k] + us[k] @ r @ us[k]
    naive += e_term @ p @ e_term
    assert horizon_cost(errs, us, e_term, q, r, p) == pytest.approx(naive)


def test_single_robot_lqr_gain_is_schur():
    topo, model, leader, spec = make_setup(m=1)
    a, b = model.linearize_origin(leader)
    gains = synthesize_gains(a, b, topo, spec)
    assert gains.spectral_radius < 1.0


def test_zero_gain_fails_certification():
    # the planar rows at v_r > 0 are not self-stable, so K = 0 must be caught
    topo, model, leader, spec = make_setup(m=1)
    a, b = model.linearize_origin(leader)
    zero = [np.zeros((2, 4))]
    with pytest.raises(SynthesisError):
        certify_gains(a, b, zero, topo)


def test_two_robot_gains_certified_with_radius():
    topo, model, leader, spec = make_setup(m=2)
    a, b = model.linearize_origin(leader)
    gains = synthesize_gains(a, b, topo, spec)
    assert 0.0 < gains.spectral_radius < 1.0
    dense = gains.closed_loop.toarray()
    assert spectral_radius(gains.closed_loop) == pytest.approx(
        np.max(np.abs(np.linalg.eigvals(dense))))


def test_terminal_penalty_decoupled_trivial_case():
    # with F = 0 and no reverse neighbors the equation collapses to
    # P = beta * (Q + K' R K); the joint solve recovers it exactly
    topo, model, leader, spec = make_setup(m=1)
    a, b = model.linearize_origin(leader)
    gains = synthesize_gains(a, b, topo, spec)
    import scipy.sparse as sp
    from swarmpc.objective import StabilizingGains, gamma_slack
    zero_gains = StabilizingGains(gains=gains.gains, spectral_radius=0.0,
                                  closed_loop=sp.csr_matrix((4, 4)))
    zero_a = [np.zeros((STATE_DIM, STATE_DIM))]
    zero_b = [np.zeros((STATE_DIM, 2))]
    qbar = spec.q_matrices[0] + gains.gains[0].T @ spec.r_matrices[0] @ gains.gains[0]
    p_list, gamma_list, stacked = terminal_penalty(zero_a, zero_b, zero_gains,
                                                   topo, spec)
    assert np.allclose(p_list[0], spec.beta * qbar, atol=1e-6)
    assert np.allclose(gamma_list[0], 0.0, atol=1e-6)


def test_terminal_penalty_residual_and_definiteness():
    topo, model, leader, spec = make_setup(m=2)
    a, b = model.linearize_origin(leader)
    gains = synthesize_gains(a, b, topo, spec)
    p_list, gamma_list, stacked = terminal_penalty(a, b, gains, topo, spec)
    f_blocks = [a[i] + b[i] @ gains.gains[i] for i in range(2)]
    qbars = [spec.q_matrices[i] + gains.gains[i].T @ spec.r_matrices[i] @ gains.gains[i]
             for i in range(2)]
    res = lyapunov_residual(f_blocks, p_list, gamma_list, qbars, spec.beta, topo)
    assert res <= 1e-8
    for p in p_list:
        assert np.linalg.eigvalsh(p).min() > 0
    assert stacked <= 1e-9


def test_terminal_descent_under_gains():
    # one closed-loop step from a small random state decreases the stacked
    # terminal function by at least the weighted stage cost
    topo, model, leader, spec = make_setup(m=2)
    a, b = model.linearize_origin(leader)
    gains = synthesize_gains(a, b, topo, spec)
    p_list, gamma_list, _ = terminal_penalty(a, b, gains, topo, spec)
    rng = np.random.default_rng(9)
    qbars = [spec.q_matrices[i] + gains.gains[i].T @ spec.r_matrices[i] @ gains.gains[i]
             for i in range(2)]
    for _ in range(50):
        stacked = 1e-3 * rng.standard_normal(8)
        errors = stacked.reshape(2, 4)
        locals_ = [stacked[topo.selectors.gather[i]] for i in range(2)]
        controls = np.array([gains.gains[i] @ locals_[i] for i in range(2)])
        nxt = model.step(errors, controls, leader)
        decrease = 0.0
        for i in range(2):
            decrease += nxt[i] @ p_list[i] @ nxt[i] - errors[i] @ p_list[i] @ errors[i]
            decrease += spec.beta * locals_[i] @ qbars[i] @ locals_[i]
        assert decrease <= 1e-8


def test_margin_limit_behaviors():
    topo, model, leader, spec = make_setup(m=2)
    a, b = model.linearize_origin(leader)
    gains = synthesize_gains(a, b, topo, spec)
    p_list, _, _ = terminal_penalty(a, b, gains, topo, spec)
    qbars = [spec.q_matrices[i] + gains.gains[i].T @ spec.r_matrices[i] @ gains.gains[i]
             for i in range(2)]
    tiny = nonlinearity_margin(model, leader, topo, gains, p_list, qbars,
                               spec.beta, radius=1e-9, n_samples=100,
                               rng=np.random.default_rng(0))
    assert tiny["ok"]
    # shrinking the region can only improve the margin
    small = nonlinearity_margin(model, leader, topo, gains, p_list, qbars,
                                spec.beta, radius=1e-4, n_samples=200,
                                rng=np.random.default_rng(0))
    assert small["lipschitz"] >= tiny["lipschitz"]


def test_margin_linear_system_passes_exactly():
    # when the rollout is exactly linear the estimated L is zero and the
    # margin equals (beta - 1) * lambda_min(Qbar)
    topo, model, leader, spec = make_setup(m=1)
    a, b = model.linearize_origin(leader)
    gains = synthesize_gains(a, b, topo, spec)
    qbar = [spec.q_matrices[0] + gains.gains[0].T @ spec.r_matrices[0] @ gains.gains[0]]

    class LinearModel:
        def __init__(self, inner):
            self.inner = inner

        def linearize_origin(self, leader):
            return self.inner.linearize_origin(leader)

        def step(self, errors, controls, leader):
            a_b, b_b = self.inner.linearize_origin(leader)
            out = np.zeros_like(errors)
            for i in range(errors.shape[0]):
                out[i] = a_b[i] @ errors[i] + b_b[i] @ controls[i]
            return out

    lin = LinearModel(model)
    p_list = [np.eye(4)]
    res = nonlinearity_margin(lin, leader, topo, gains, p_list, qbar,
                              spec.beta, radius=0.5, n_samples=200,
                              rng=np.random.default_rng(1))
    assert res["lipschitz"] == pytest.approx(0.0, abs=1e-12)
    assert res["margin"] == pytest.approx(0.1 * np.linalg.eigvalsh(qbar[0]).min())
    assert res["ok"]


def test_margin_dense_grid_agrees_with_sampling():
    topo, model, leader, spec = make_setup(m=2)
    a, b = model.linearize_origin(leader)
    gains = synthesize_gains(a, b, topo, spec)
    p_list, _, _ = terminal_penalty(a, b, gains, topo, spec)
    qbars = [spec.q_matrices[i] + gains.gains[i].T @ spec.r_matrices[i] @ gains.gains[i]
             for i in range(2)]
    mc = nonlinearity_margin(model, leader, topo, gains, p_list, qbars,
                             spec.beta, radius=0.1, n_samples=3000,
                             rng=np.random.default_rng(2))
    grid = nonlinearity_margin(model, leader, topo, gains, p_list, qbars,
                               spec.beta, radius=0.1, n_samples=0,
                               rng=np.random.default_rng(2), grid_per_axis=9)
    # the axis grid is a subset of the ball, so it cannot exceed a thorough
    # Monte Carlo sup by much; require the two estimates to be comparable
    assert grid["lipschitz"] <= mc["lipschitz"] * 1.5 + 1e-12
