"""Stage/horizon costs, stabilizing gains, and the terminal penalty.

The terminal penalty of each robot solves a coupled discrete Lyapunov
condition in the neighborhood coordinates,

    F_i' P_i F_i - embed_own(P_i) = -beta_i * Qbar_i + Gamma_i,

where F_i is the linearized closed loop restricted to robot i's neighborhood
and embed_own places P_i at the robot's own block.  The blocks P_i are coupled
through the stacked requirement sum_i W_i' Gamma_i W_i <= 0, so they are
synthesized jointly: a minimum-trace solve of the stacked linear matrix
inequality in the concatenated P_i entries, after which Gamma_i is the exact
per-robot slack of the equality (zero residual by construction) and the
stacked condition is re-certified numerically on the assembled matrix.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dynamics import ErrorModel, LeaderSignal
from .topology import STATE_DIM, Topology


class SynthesisError(RuntimeError):
    """Gain or penalty synthesis could not be certified."""


@dataclass
class ObjectiveSpec:
    """Weights and horizon shared by the learner, baseline, and simulator."""

    topo: Topology
    horizon: int
    q_matrices: list            # per robot, (n_Ni, n_Ni), symmetric PSD
    r_matrices: list            # per robot, (2, 2), symmetric PD
    beta: float = 1.1
    terminal: list = None       # per robot P_i, filled by terminal_penalty
    gamma: list = None          # per robot consistency slack
    terminal_sets: list = None  # per robot (S_i, level) or None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.beta <= 1.0:
            raise ValueError("beta must exceed 1")
        for i, q in enumerate(self.q_matrices):
            if not np.allclose(q, q.T, atol=1e-12):
                raise ValueError(f"Q_{i} not symmetric")
            if np.linalg.eigvalsh(q).min() < -1e-10:
                raise ValueError(f"Q_{i} not positive semidefinite")
        for i, r in enumerate(self.r_matrices):
            if not np.allclose(r, r.T, atol=1e-12):
                raise ValueError(f"R_{i} not symmetric")
            if np.linalg.eigvalsh(r).min() <= 0:
                raise ValueError(f"R_{i} not positive definite")

    @classmethod
    def from_weights(cls, topo: Topology, horizon: int, q_weight: float = 1.0,
                     r_weight: float = 0.5, beta: float = 1.1):
        degs = topo.degrees
        q = [q_weight * np.eye(STATE_DIM * int(k)) for k in degs]
        r = [r_weight * np.eye(2) for _ in range(topo.n_robots)]
        return cls(topo=topo, horizon=horizon, q_matrices=q, r_matrices=r, beta=beta)


@dataclass
class StabilizingGains:
    """Per-robot static gains with a certified Schur stacked closed loop."""

    gains: list                 # per robot K_Ni, (2, n_Ni)
    spectral_radius: float
    closed_loop: object         # sparse (n, n) stacked matrix


def stage_cost(e_nbr: np.ndarray, u: np.ndarray, q: np.ndarray,
               r: np.ndarray) -> float:
    e_nbr = np.asarray(e_nbr, dtype=float)
    u = np.asarray(u, dtype=float)
    return float(e_nbr @ q @ e_nbr + u @ r @ u)


def horizon_cost(errors_nbr: np.ndarray, controls: np.ndarray,
                 terminal_own: np.ndarray, q: np.ndarray, r: np.ndarray,
                 p: np.ndarray) -> float:
    """Local cost over one prediction interval: N stage terms plus the
    terminal quadratic on the robot's own error."""
    errors_nbr = np.asarray(errors_nbr, dtype=float)
    controls = np.asarray(controls, dtype=float)
    if errors_nbr.shape[0] != controls.shape[0]:
        raise ValueError("need one control per stage state")
    total = 0.0
    for k in range(controls.shape[0]):
        total += stage_cost(errors_nbr[k], controls[k], q, r)
    e_term = np.asarray(terminal_own, dtype=float)
    return total + float(e_term @ p @ e_term)


def _own_block(mat, topo, i):
    p = topo.own_position(i) * STATE_DIM
    return mat[:, p:p + STATE_DIM] if mat.ndim == 2 and mat.shape[0] == STATE_DIM \
        else mat[p:p + STATE_DIM, p:p + STATE_DIM]


def synthesize_gains(a_blocks, b_blocks, topo: Topology,
                     spec: ObjectiveSpec) -> StabilizingGains:
    """Block-local LQR on each robot's own (A, B) sub-block, then a global
    Schur certificate on the stacked closed loop.

    Cross-neighbor terms are treated as disturbances during design; the
    certificate is what validates the result.  Raises if the stacked spectral
    radius reaches 1, reporting the radius found.
    """
    m = topo.n_robots
    gains = []
    for i in range(m):
        a_own = _own_block(a_blocks[i], topo, i)
        b = b_blocks[i]
        q_own = _own_block(spec.q_matrices[i], topo, i)
        r = spec.r_matrices[i]
        try:
            p = sla.solve_discrete_are(a_own, b, q_own, r)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SynthesisError(f"Riccati failed for robot {i}: {exc}") from exc
        k_lqr = np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a_own)
        k_full = np.zeros((2, a_blocks[i].shape[1]))
        pos = topo.own_position(i) * STATE_DIM
        k_full[:, pos:pos + STATE_DIM] = -k_lqr   # policy convention u = K e
        gains.append(k_full)
    return certify_gains(a_blocks, b_blocks, gains, topo)


def certify_gains(a_blocks, b_blocks, gains, topo: Topology) -> StabilizingGains:
    a_cl = stacked_closed_loop(a_blocks, b_blocks, gains, topo)
    rho = spectral_radius(a_cl)
    if rho >= 1.0:
        raise SynthesisError(f"stacked closed loop is not Schur (radius {rho:.6f})")
    return StabilizingGains(gains=gains, spectral_radius=rho, closed_loop=a_cl)


def stacked_closed_loop(a_blocks, b_blocks, gains, topo: Topology):
    m = topo.n_robots
    n = m * STATE_DIM
    rows, cols, vals = [], [], []
    for i in range(m):
        f_i = a_blocks[i] + b_blocks[i] @ gains[i]
        for pos, j in enumerate(topo.neighbors[i]):
            block = f_i[:, pos * STATE_DIM:(pos + 1) * STATE_DIM]
            for r in range(STATE_DIM):
                for c in range(STATE_DIM):
                    if block[r, c] != 0.0:
                        rows.append(i * STATE_DIM + r)
                        cols.append(j * STATE_DIM + c)
                        vals.append(block[r, c])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def spectral_radius(a_cl) -> float:
    n = a_cl.shape[0]
    if n <= 400:
        return float(np.max(np.abs(np.linalg.eigvals(a_cl.toarray()))))
    vals = spla.eigs(a_cl, k=1, which="LM", return_eigenvectors=False,
                     v0=np.ones(n), maxiter=5000)
    return float(np.abs(vals[0]))


MAX_JOINT_SYNTHESIS = 64


def terminal_penalty(a_blocks, b_blocks, gains: StabilizingGains, topo: Topology,
                     spec: ObjectiveSpec, q_extra=None):
    """Jointly synthesize the per-robot terminal penalties P_i.

    ``q_extra`` optionally adds a per-robot PSD term to Qbar_i (used by the
    barrier-aware variant).  Returns (P list, Gamma list, stacked max
    eigenvalue of the slack); also stores them on the spec.  Raises when the
    stacked system is infeasible or too large for the joint solve; large
    fleets use stage_matched_terminal instead.
    """
    m = topo.n_robots
    if m > MAX_JOINT_SYNTHESIS:
        raise SynthesisError(
            f"joint terminal synthesis supports up to {MAX_JOINT_SYNTHESIS} robots; "
            "use stage_matched_terminal for larger fleets")
    f_blocks = [a_blocks[i] + b_blocks[i] @ gains.gains[i] for i in range(m)]
    qbars = []
    for i in range(m):
        qb = spec.q_matrices[i] + gains.gains[i].T @ spec.r_matrices[i] @ gains.gains[i]
        if q_extra is not None:
            qb = qb + q_extra[i]
        qbars.append(qb)

    p_list = _joint_penalty_solve(gains.closed_loop, qbars, topo, spec.beta)
    gamma_list = [gamma_slack(f_blocks[i], p_list[i], qbars[i], spec.beta, topo, i)
                  for i in range(m)]
    stacked_eig = stacked_slack_eigenvalue(gamma_list, topo)
    if stacked_eig > 1e-9:
        raise SynthesisError(
            f"stacked slack not negative semidefinite (max eigenvalue {stacked_eig:.3e})")
    for i, p in enumerate(p_list):
        if np.linalg.eigvalsh(p).min() <= 0:
            raise SynthesisError(f"P_{i} not positive definite")
    spec.terminal = p_list
    spec.gamma = gamma_list
    return p_list, gamma_list, stacked_eig


def _joint_penalty_solve(a_cl, qbars, topo, beta):
    """Minimum-trace block-diagonal solution of
    A' P A - P + sum_i W_i' (beta Qbar_i) W_i <= 0, linear in the P_i entries.

    For a decoupled robot this reduces to P = beta * Qbar exactly (the
    constraint is tight at the minimum-trace point).
    """
    import cvxpy as cp

    m = topo.n_robots
    n = m * STATE_DIM
    a = a_cl.toarray()
    q_stack = np.zeros((n, n))
    for i in range(m):
        idx = topo.selectors.gather[i]
        q_stack[np.ix_(idx, idx)] += beta * qbars[i]

    blocks = [cp.Variable((STATE_DIM, STATE_DIM), symmetric=True) for _ in range(m)]
    zero = np.zeros((STATE_DIM, STATE_DIM))
    p_blk = cp.bmat([[blocks[i] if j == i else zero for j in range(m)]
                     for i in range(m)])
    constraints = [a.T @ p_blk @ a - p_blk + q_stack << -1e-7 * np.eye(n)]
    constraints += [blk >> 1e-8 * np.eye(STATE_DIM) for blk in blocks]
    problem = cp.Problem(cp.Minimize(sum(cp.trace(b) for b in blocks)), constraints)
    problem.solve(solver=cp.CLARABEL)
    if problem.status not in ("optimal", "optimal_inaccurate"):
        raise SynthesisError(f"joint terminal synthesis failed: {problem.status}")
    return [0.5 * (b.value + b.value.T) for b in blocks]


def gamma_slack(f_block, p, qbar, beta, topo, i):
    """Gamma_i := F_i' P_i F_i - embed_own(P_i) + beta Qbar_i, so the terminal
    equality holds with zero residual by construction."""
    pos = topo.own_position(i) * STATE_DIM
    n_local = f_block.shape[1]
    embed = np.zeros((n_local, n_local))
    embed[pos:pos + STATE_DIM, pos:pos + STATE_DIM] = p
    gamma = f_block.T @ p @ f_block - embed + beta * qbar
    return 0.5 * (gamma + gamma.T)


def riccati_terminal(a_blocks, b_blocks, topo: Topology, spec: ObjectiveSpec):
    """P_i from each robot's own-block Riccati solution.

    This is the infinite-horizon value of the decoupled subsystem, which makes
    the horizon-end anchor consistent with a stationary critic: the costate it
    induces does not depend on the time-to-go.
    """
    p_list = []
    for i in range(topo.n_robots):
        pos = topo.own_position(i) * STATE_DIM
        a_own = a_blocks[i][:, pos:pos + STATE_DIM]
        q_own = spec.q_matrices[i][pos:pos + STATE_DIM, pos:pos + STATE_DIM]
        p = sla.solve_discrete_are(a_own, b_blocks[i], q_own, spec.r_matrices[i])
        p_list.append(0.5 * (p + p.T))
    spec.terminal = p_list
    spec.gamma = None
    return p_list


def stage_matched_terminal(topo: Topology, spec: ObjectiveSpec):
    """P_i equal to the own-block stage weight; the lightweight choice used
    in the constrained scenarios and at fleet scales beyond the joint solve."""
    p_list = []
    for i in range(topo.n_robots):
        pos = topo.own_position(i) * STATE_DIM
        p_list.append(spec.q_matrices[i][pos:pos + STATE_DIM, pos:pos + STATE_DIM].copy())
    spec.terminal = p_list
    spec.gamma = None
    return p_list


def lyapunov_residual(f_blocks, p_list, gamma_list, qbars, beta, topo) -> float:
    """Frobenius norm of the stacked defect of the terminal condition."""
    total = 0.0
    for i in range(topo.n_robots):
        pos = topo.own_position(i) * STATE_DIM
        n_local = f_blocks[i].shape[1]
        embed = np.zeros((n_local, n_local))
        embed[pos:pos + STATE_DIM, pos:pos + STATE_DIM] = p_list[i]
        res = f_blocks[i].T @ p_list[i] @ f_blocks[i] - embed \
            + beta * qbars[i] - gamma_list[i]
        total += np.sum(res ** 2)
    return float(np.sqrt(total))


def stacked_slack_eigenvalue(gamma_list, topo: Topology) -> float:
    """Max eigenvalue of sum_i W_i' Gamma_i W_i (must be <= 0)."""
    m = topo.n_robots
    n = m * STATE_DIM
    acc = np.zeros((n, n)) if n <= 800 else sp.lil_matrix((n, n))
    for i in range(m):
        idx = topo.selectors.gather[i]
        if n <= 800:
            acc[np.ix_(idx, idx)] += gamma_list[i]
        else:
            acc[np.ix_(idx, idx)] = acc[np.ix_(idx, idx)] + gamma_list[i]
    if n <= 800:
        return float(np.linalg.eigvalsh(0.5 * (acc + acc.T)).max())
    acc = acc.tocsr()
    acc = 0.5 * (acc + acc.T)
    val = spla.eigsh(acc, k=1, which="LA", return_eigenvectors=False,
                     v0=np.ones(n), maxiter=5000)
    return float(val[0])


def nonlinearity_margin(model: ErrorModel, leader: LeaderSignal, topo: Topology,
                        gains: StabilizingGains, p_list, qbars, beta: float,
                        radius: float, n_samples: int = 2000, rng=None,
                        grid_per_axis: int = 0):
    """Sampled check of ||P|| L^2 + 2 ||P F|| L < (beta - 1) lambda_min(Qbar).

    L is the closed-loop linearization-error gain estimated as the sup of
    ||phi(e)|| / ||e|| over the candidate ball of the given radius, by Monte
    Carlo sampling (plus an optional dense axis grid).  Returns a dict with
    pass/fail, the margin, and the L estimate; failure just means the caller
    should shrink the region.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    m = topo.n_robots
    a_blocks, b_blocks = model.linearize_origin(leader)
    f_blocks = [a_blocks[i] + b_blocks[i] @ gains.gains[i] for i in range(m)]

    def phi_ratio(stacked):
        controls = np.zeros((m, 2))
        local = [stacked[topo.selectors.gather[i]] for i in range(m)]
        for i in range(m):
            controls[i] = gains.gains[i] @ local[i]
        nxt = model.step(stacked.reshape(m, STATE_DIM), controls, leader)
        lin = np.zeros_like(nxt)
        for i in range(m):
            lin[i] = f_blocks[i] @ local[i]
        num = np.linalg.norm(nxt - lin)
        den = np.linalg.norm(stacked)
        return num / den if den > 0 else 0.0

    n = m * STATE_DIM
    l_est = 0.0
    for _ in range(n_samples):
        direction = rng.standard_normal(n)
        direction /= np.linalg.norm(direction)
        r = radius * rng.uniform(0.2, 1.0) ** (1.0 / n)
        l_est = max(l_est, phi_ratio(r * direction))
    if grid_per_axis > 0:
        for axis in range(n):
            for val in np.linspace(-radius, radius, grid_per_axis):
                if val == 0.0:
                    continue
                x = np.zeros(n)
                x[axis] = val
                l_est = max(l_est, phi_ratio(x))

    worst_margin = np.inf
    for i in range(m):
        p = p_list[i]
        lhs = np.linalg.norm(p, 2) * l_est ** 2 \
            + 2.0 * np.linalg.norm(p @ f_blocks[i], 2) * l_est
        rhs = (beta - 1.0) * np.linalg.eigvalsh(qbars[i]).min()
        worst_margin = min(worst_margin, rhs - lhs)
    return {"ok": bool(worst_margin > 0.0), "margin": float(worst_margin),
            "lipschitz": float(l_est)}


def certified_terminal_sets(model, leader, topo, gains, p_list, qbars, beta,
                            rng=None, radius0: float = 0.5, shrink: float = 0.5,
                            max_iters: int = 12):
    """Shrink an error ball until the nonlinearity margin passes, then return
    per-robot ellipsoidal level sets {e: e' P_i e <= level_i} inside it."""
    radius = radius0
    for _ in range(max_iters):
        res = nonlinearity_margin(model, leader, topo, gains, p_list, qbars,
                                  beta, radius, n_samples=500, rng=rng)
        if res["ok"]:
            sets = []
            for p in p_list:
                level = float(np.linalg.eigvalsh(p).min() * radius ** 2)
                sets.append((p / level, level))
            return sets, radius, res
        radius *= shrink
    return None, radius, res
