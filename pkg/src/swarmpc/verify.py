"""Runtime invariant suite behind the ``verify`` subcommand.

Each check re-derives an expected quantity independently (finite differences,
direct substitution, brute-force accumulation) and compares it against the
implementation at a fixed tolerance.
"""

import numpy as np

from . import sim
from .baseline import RecedingHorizonBaseline
from .dynamics import LeaderSignal
from .learning import deployed_spectral_radius
from .objective import (gamma_slack, lyapunov_residual, stacked_slack_eigenvalue,
                        terminal_penalty)
from .safety import ControlBoxBarrier
from .topology import STATE_DIM


def run_verification(cfg) -> dict:
    results = {}
    setup = sim.assemble(cfg)
    results["dynamics_jacobians"] = _check_dynamics_jacobians(setup)
    results["update_gradients"] = _check_update_gradients(setup)
    results["barrier_gradients"] = _check_barrier_gradients(cfg)
    results["terminal_penalty"] = _check_terminal_penalty(setup)
    results["baseline_gradient"] = _check_baseline_gradient(setup)
    results["monitors_and_envelope"] = _check_short_run(cfg)
    return results


def _result(ok, detail):
    return {"ok": bool(ok), "detail": detail}


def _check_dynamics_jacobians(setup, samples=60, tol=1e-5):
    rng = np.random.default_rng(11)
    model = setup.model
    topo = setup.topo
    leader = LeaderSignal(pos=np.zeros(2), theta=0.0, v=setup.nominal_speed,
                          omega=0.2)
    h = 1e-6
    worst = 0.0
    m = topo.n_robots
    for _ in range(samples):
        e = rng.uniform(-1.0, 1.0, (m, STATE_DIM))
        own, edge = model.jacobian_blocks(e, leader)
        for c in range(STATE_DIM):
            for j in range(min(m, 3)):
                ep, em = e.copy(), e.copy()
                ep[j, c] += h
                em[j, c] -= h
                fd = (model.drift(ep, leader) - model.drift(em, leader)) / (2 * h)
                ana = np.zeros_like(fd)
                ana[j] = own[j][:, c]
                for idx in range(model.n_edges):
                    if model.edge_src[idx] == j:
                        ana[model.edge_dst[idx]] += edge[idx][:, c]
                denom = max(1.0, np.abs(fd).max())
                worst = max(worst, float(np.abs(fd - ana).max() / denom))
    return _result(worst <= tol, f"max rel. deviation {worst:.2e} (tol {tol})")


def _check_update_gradients(setup, samples=40, tol=1e-5):
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(samples):
        n_c, n = 4, 8
        w = rng.standard_normal((n_c, n))
        sigma = rng.standard_normal(n_c)
        sigma_p = rng.standard_normal(n_c)
        chain = rng.standard_normal((n, n))
        drive = rng.standard_normal(n)

        def loss(wm):
            eps = drive + chain @ (wm.T @ sigma_p) - wm.T @ sigma
            return float(eps @ eps)

        eps0 = drive + chain @ (w.T @ sigma_p) - w.T @ sigma
        analytic = -2.0 * np.outer(sigma, eps0) \
            + 2.0 * np.outer(sigma_p, eps0 @ chain)
        h = 1e-6
        idx = rng.integers(0, n_c), rng.integers(0, n)
        wp, wm_ = w.copy(), w.copy()
        wp[idx] += h
        wm_[idx] -= h
        fd = (loss(wp) - loss(wm_)) / (2 * h)
        denom = max(1.0, abs(fd))
        worst = max(worst, abs(fd - analytic[idx]) / denom)
    return _result(worst <= tol, f"max rel. deviation {worst:.2e} (tol {tol})")


def _check_barrier_gradients(cfg, samples=60, tol=1e-6):
    barrier = ControlBoxBarrier(np.array([5.0, 5.0]), kappa=0.1)
    rng = np.random.default_rng(17)
    h = 1e-6
    worst = 0.0
    for _ in range(samples):
        u = rng.uniform(-6.0, 6.0, 2)
        ana = barrier.gradient(u)
        for c in range(2):
            up, um = u.copy(), u.copy()
            up[c] += h
            um[c] -= h
            fd = (barrier.value(up) - barrier.value(um)) / (2 * h)
            denom = max(1.0, abs(fd))
            worst = max(worst, abs(fd - ana[c]) / denom)
    return _result(worst <= tol, f"max rel. deviation {worst:.2e} (tol {tol})")


def _check_terminal_penalty(setup, tol=1e-8):
    if setup.topo.n_robots > 64:
        return _result(True, "skipped at this fleet size (joint solve bound)")
    spec = setup.spec
    model = setup.model
    topo = setup.topo
    leader = LeaderSignal(pos=np.zeros(2), theta=0.0, v=setup.nominal_speed)
    a, b = model.linearize_origin(leader)
    p_list, gamma_list, stacked = terminal_penalty(a, b, setup.gains, topo, spec)
    f_blocks = [a[i] + b[i] @ setup.gains.gains[i] for i in range(topo.n_robots)]
    qbars = [spec.q_matrices[i]
             + setup.gains.gains[i].T @ spec.r_matrices[i] @ setup.gains.gains[i]
             for i in range(topo.n_robots)]
    res = lyapunov_residual(f_blocks, p_list, gamma_list, qbars, spec.beta, topo)
    pd = min(float(np.linalg.eigvalsh(p).min()) for p in p_list)
    ok = res <= tol and pd > 0 and stacked <= 1e-9
    return _result(ok, f"residual {res:.2e}, min eig(P) {pd:.2e}, "
                       f"stacked slack {stacked:.2e}")


def _check_baseline_gradient(setup, tol=1e-5):
    solver = RecedingHorizonBaseline(setup.model, setup.spec, max_iterations=1)
    rng = np.random.default_rng(19)
    m = setup.topo.n_robots
    n = min(setup.spec.horizon, 6)
    leaders = setup.leader.window(0, n)
    e0 = rng.uniform(-0.5, 0.5, (m, STATE_DIM))
    controls = rng.uniform(-0.5, 0.5, (n, m, 2))
    states = solver.rollout(e0, controls[:n], leaders)
    grad = solver.gradient(states, controls[:n], leaders)
    h = 1e-6
    worst = 0.0
    for _ in range(25):
        tau = rng.integers(0, n)
        i = rng.integers(0, m)
        c = rng.integers(0, 2)
        up, um = controls.copy(), controls.copy()
        up[tau, i, c] += h
        um[tau, i, c] -= h
        cp = solver.cost(solver.rollout(e0, up[:n], leaders), up[:n])
        cm = solver.cost(solver.rollout(e0, um[:n], leaders), um[:n])
        fd = (cp - cm) / (2 * h)
        denom = max(1.0, abs(fd))
        worst = max(worst, abs(fd - grad[tau, i, c]) / denom)
    return _result(worst <= tol, f"max rel. deviation {worst:.2e} (tol {tol})")


def _check_short_run(cfg):
    import copy
    sub = copy.deepcopy(cfg)
    sub["sim"]["steps"] = min(cfg["sim"]["steps"], 60)
    setup = sim.assemble(sub)
    record = sim.run_closed_loop(setup, "learn")
    summary = record.summary()
    ok = (not record.failed) and summary["envelope_ok_all"] \
        and (summary["monitor_critic_max"] is None
             or summary["monitor_critic_max"] < 1.0) \
        and (summary["monitor_actor_max"] is None
             or summary["monitor_actor_max"] < 1.0)
    return _result(ok, f"envelope_ok={summary['envelope_ok_all']}, "
                       f"Cc_max={summary['monitor_critic_max']}, "
                       f"Ca_max={summary['monitor_actor_max']}")
