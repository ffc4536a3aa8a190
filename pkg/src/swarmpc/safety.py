"""Barrier-function algebra and the safety side of the force-field learner.

All barriers are relaxed log barriers: -log of the constraint margin while
the margin exceeds the relaxing factor, and a quadratic extension matching
value and slope below it, so every barrier is totally defined and C^1.
State constraints (obstacle clearances and inter-robot separations) are
expressed in the error coordinates through each robot's position estimate,
which reconstructs its own position from its local error assuming neighbors
sit on their slots; that keeps the gradients local and analytic.
"""

from dataclasses import dataclass, field

import numpy as np

from .dynamics import LeaderSignal
from .topology import STATE_DIM, Topology


class InfeasibleScenario(ValueError):
    """A start state violates a hard constraint."""


# ---------------------------------------------------------------------------
# scalar relaxed log
# ---------------------------------------------------------------------------

def relaxed_log(s, kappa):
    """-log(s) for s >= kappa, quadratic extension below; C^2 at the switch."""
    s = np.asarray(s, dtype=float)
    inside = s >= kappa
    safe_s = np.where(inside, s, 1.0)
    quad = -np.log(kappa) + (kappa - s) / kappa + (kappa - s) ** 2 / (2.0 * kappa ** 2)
    return np.where(inside, -np.log(safe_s), quad)


def relaxed_log_d1(s, kappa):
    s = np.asarray(s, dtype=float)
    inside = s >= kappa
    safe_s = np.where(inside, s, 1.0)
    return np.where(inside, -1.0 / safe_s, -1.0 / kappa - (kappa - s) / kappa ** 2)


def relaxed_log_d2(s, kappa):
    s = np.asarray(s, dtype=float)
    inside = s >= kappa
    safe_s = np.where(inside, s, 1.0)
    return np.where(inside, 1.0 / safe_s ** 2, np.full_like(s, 1.0 / kappa ** 2))


def local_barrier(s, kappa, cut):
    """Relaxed log recentered at the finite influence margin ``cut``: value
    and slope vanish there, so the constraint force is exactly zero outside
    the influence region and cannot interfere with nominal tracking."""
    s = np.asarray(s, dtype=float)
    inner = np.minimum(s, cut)
    val = relaxed_log(inner, kappa) - relaxed_log(cut, kappa) \
        - relaxed_log_d1(cut, kappa) * (inner - cut)
    return np.where(s >= cut, 0.0, val)


def local_barrier_d1(s, kappa, cut):
    s = np.asarray(s, dtype=float)
    val = relaxed_log_d1(s, kappa) - relaxed_log_d1(cut, kappa)
    return np.where(s >= cut, 0.0, val)


def local_barrier_d2(s, kappa, cut):
    s = np.asarray(s, dtype=float)
    return np.where(s >= cut, 0.0, relaxed_log_d2(s, kappa))


# ---------------------------------------------------------------------------
# recentered control-box barrier
# ---------------------------------------------------------------------------

class ControlBoxBarrier:
    """Recentered relaxed barrier for |u_l| <= b_l (affine constraints).

    Value and gradient vanish at u = 0 exactly.  ``bounds`` may be None for
    an unconstrained channel set, in which case everything is zero.
    """

    def __init__(self, bounds, kappa: float = 0.1):
        self.kappa = float(kappa)
        if bounds is None:
            self.bounds = None
            return
        self.bounds = np.asarray(bounds, dtype=float).reshape(-1)
        if np.any(self.bounds <= 0):
            raise ValueError("control bounds must be positive")
        self._center_value = 2.0 * np.sum(relaxed_log(self.bounds, self.kappa))

    @property
    def dim(self):
        return None if self.bounds is None else self.bounds.size

    def value(self, u):
        u = np.asarray(u, dtype=float)
        if self.bounds is None:
            return np.zeros(u.shape[:-1])
        lo = relaxed_log(self.bounds + u, self.kappa)
        hi = relaxed_log(self.bounds - u, self.kappa)
        return np.sum(lo + hi, axis=-1) - self._center_value

    def gradient(self, u):
        u = np.asarray(u, dtype=float)
        if self.bounds is None:
            return np.zeros_like(u)
        # d/du [-log(b+u)] = d1(b+u); d/du [-log(b-u)] = -d1(b-u)
        return relaxed_log_d1(self.bounds + u, self.kappa) \
            - relaxed_log_d1(self.bounds - u, self.kappa)

    def hessian(self, u):
        u = np.asarray(u, dtype=float)
        out = np.zeros(u.shape + (u.shape[-1],))
        if self.bounds is None:
            return out
        diag = relaxed_log_d2(self.bounds + u, self.kappa) \
            + relaxed_log_d2(self.bounds - u, self.kappa)
        idx = np.arange(u.shape[-1])
        out[..., idx, idx] = diag
        return out

    def hessian_bound(self):
        """Closed-form bound at the relaxation switch: one side at the switch
        margin, the other at its farthest feasible distance."""
        if self.bounds is None:
            return np.zeros((2, 2))
        diag = 1.0 / self.kappa ** 2 + 1.0 / (2.0 * self.bounds - self.kappa) ** 2
        return np.diag(diag)

    def violations(self, u):
        if self.bounds is None:
            return np.zeros(np.asarray(u).shape[:-1], dtype=bool)
        return np.any(np.abs(np.asarray(u, dtype=float)) > self.bounds, axis=-1)


# ---------------------------------------------------------------------------
# state constraints in error coordinates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Obstacle:
    center: np.ndarray
    radius: float


def position_estimate(errors, leader: LeaderSignal, topo: Topology):
    """Per-robot position reconstructed from the own error block under the
    on-slot neighbor assumption; differentiable in the local error.

    Returns (positions (M, 2), jacobians (M, 2, 4)).
    """
    e = np.asarray(errors, dtype=float)
    m = topo.n_robots
    coef = 1.0 / (np.array([topo.nonself_degree(i) for i in range(m)])
                  + topo.pinned)
    theta = leader.theta - e[:, 2]
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # body->world rotation applied to the planar error
    wx = cos_t * e[:, 0] - sin_t * e[:, 1]
    wy = sin_t * e[:, 0] + cos_t * e[:, 1]
    pos = leader.pos + topo.leader_offsets - coef[:, None] * np.column_stack([wx, wy])

    jac = np.zeros((m, 2, STATE_DIM))
    jac[:, 0, 0] = -coef * cos_t
    jac[:, 0, 1] = coef * sin_t
    jac[:, 1, 0] = -coef * sin_t
    jac[:, 1, 1] = -coef * cos_t
    # d theta / d e_theta = -1 folded in
    jac[:, 0, 2] = coef * (-sin_t * e[:, 0] - cos_t * e[:, 1])
    jac[:, 1, 2] = coef * (cos_t * e[:, 0] - sin_t * e[:, 1])
    return pos, jac


class SafetySetup:
    """Constraint bundle for a topology: obstacles, neighbor separations, and
    the control box, with batched barrier values and gradients.

    Obstacle barriers keep the raw relaxed log (the recentering constant and
    slope vanish in the far-reference limit); the control barrier is
    recentered at zero.
    """

    def __init__(self, topo: Topology, obstacles=(), pair_clearance=None,
                 control_bounds=None, mu: float = 0.02, kappa: float = 0.1,
                 influence: float = 1.0):
        self.topo = topo
        self.mu = float(mu)
        self.kappa = float(kappa)
        self.influence = float(influence)
        if self.influence <= self.kappa:
            raise ValueError("influence margin must exceed the relaxing factor")
        self.obstacles = [Obstacle(np.asarray(c, dtype=float).reshape(2), float(r))
                          for c, r in obstacles]
        self.control_barrier = ControlBoxBarrier(control_bounds, kappa)
        m = topo.n_robots
        degs = topo.degrees
        offsets = np.zeros(m + 1, dtype=int)
        np.cumsum(degs * STATE_DIM, out=offsets[1:])
        self._flat_size = int(offsets[-1])
        self._own_flat = np.stack(
            [offsets[i] + topo.own_position(i) * STATE_DIM + np.arange(STATE_DIM)
             for i in range(m)])
        # neighbor pairs (i, j in N_i, j != i) subject to a separation floor
        self.pair_clearance = pair_clearance
        pairs = []
        if pair_clearance is not None:
            for i in range(m):
                for pos, j in enumerate(topo.neighbors[i]):
                    if j != i:
                        pairs.append((i, j,
                                      offsets[i] + pos * STATE_DIM,
                                      offsets[i] + topo.own_position(i) * STATE_DIM))
        self._pairs = pairs

    @property
    def flat_size(self):
        return self._flat_size

    def state_barrier_values(self, errors, leader) -> np.ndarray:
        """Barrier of the distance constraints ||p - c|| >= d (and pairwise
        separations), evaluated per robot at the local position estimates."""
        m = self.topo.n_robots
        vals = np.zeros(m)
        pos, _ = position_estimate(errors, leader, self.topo)
        for obs in self.obstacles:
            dist = np.linalg.norm(pos - obs.center, axis=1)
            vals += local_barrier(dist - obs.radius, self.kappa, self.influence)
        for i, j, _, _ in self._pairs:
            dist = np.linalg.norm(pos[i] - pos[j])
            vals[i] += local_barrier(dist - self.pair_clearance, self.kappa,
                                     self.influence)
        return vals

    def state_barrier_gradient(self, errors, leader) -> np.ndarray:
        """Gradient of each robot's state barrier w.r.t. its local stacked
        error, in one flat buffer aligned with the costate layout."""
        flat = np.zeros(self._flat_size)
        pos, jac = position_estimate(errors, leader, self.topo)
        tiny = 1e-12
        for obs in self.obstacles:
            rel = pos - obs.center
            dist = np.maximum(np.linalg.norm(rel, axis=1), tiny)
            coef = local_barrier_d1(dist - obs.radius, self.kappa,
                                    self.influence) / dist
            grad = coef[:, None] * np.einsum("rx,rxn->rn", rel, jac)
            np.add.at(flat, self._own_flat, grad)
        for i, j, j_flat, i_flat in self._pairs:
            rel = pos[i] - pos[j]
            dist = max(float(np.linalg.norm(rel)), tiny)
            coef = float(local_barrier_d1(dist - self.pair_clearance,
                                          self.kappa, self.influence)) / dist
            gi = coef * (rel @ jac[i])
            gj = -coef * (rel @ jac[j])
            flat[i_flat:i_flat + STATE_DIM] += gi
            flat[j_flat:j_flat + STATE_DIM] += gj
        return flat

    def state_hessian_bounds(self, leader, box: float = 1.0, samples: int = 200,
                             rng=None, pad: float = 1.5):
        """Conservative per-robot bounds H_e with H_e >= hess(B_e) over an
        error box, estimated from finite differences of the analytic gradient
        plus the switch-point curvature, scaled by a safety pad."""
        rng = np.random.default_rng(0) if rng is None else rng
        m = self.topo.n_robots
        h = 1e-5
        worst = np.full(m, 1.0 / self.kappa ** 2)  # switch-point curvature floor
        for _ in range(samples):
            e = rng.uniform(-box, box, (m, STATE_DIM))
            base = self.state_barrier_gradient(e, leader)
            for c in range(STATE_DIM):
                ep = e.copy()
                ep[:, c] += h
                gp = self.state_barrier_gradient(ep, leader)
                col = (gp - base) / h
                own_cols = np.abs(col[self._own_flat])
                worst = np.maximum(worst, own_cols.sum(axis=1))
        bounds = []
        for i in range(m):
            n_local = STATE_DIM * len(self.topo.neighbors[i])
            bounds.append(pad * worst[i] * np.eye(n_local))
        return bounds

    def constraints_active(self, errors, leader, preview: float = 0.0) -> bool:
        """True when any robot is inside a barrier's influence region, or will
        be within the given preview distance.  The stability envelope is
        suspended there: the predicted cost rises as soon as the horizon sees
        the constraint, before the robot itself arrives."""
        pos, _ = position_estimate(errors, leader, self.topo)
        limit = self.influence + preview
        for obs in self.obstacles:
            dist = np.linalg.norm(pos - obs.center, axis=1)
            if np.any(dist - obs.radius < limit):
                return True
        for i, j, _, _ in self._pairs:
            if np.linalg.norm(pos[i] - pos[j]) - self.pair_clearance < limit:
                return True
        return False

    # -- ground-truth accounting -------------------------------------------

    def check_start_feasible(self, positions):
        for idx, obs in enumerate(self.obstacles):
            dist = np.linalg.norm(positions - obs.center, axis=1)
            if np.any(dist < obs.radius):
                bad = int(np.argmin(dist))
                raise InfeasibleScenario(
                    f"robot {bad} starts inside obstacle {idx}")

    def violation_events(self, positions, controls=None):
        """Hard-constraint breaches at exact positions: (kind, robot, id)."""
        events = []
        for idx, obs in enumerate(self.obstacles):
            dist = np.linalg.norm(positions - obs.center, axis=1)
            for i in np.flatnonzero(dist < obs.radius):
                events.append(("obstacle", int(i), idx))
        if self.pair_clearance is not None:
            seen = set()
            for i, j, _, _ in self._pairs:
                if (j, i) in seen:
                    continue
                seen.add((i, j))
                if np.linalg.norm(positions[i] - positions[j]) < self.pair_clearance:
                    events.append(("separation", int(i), int(j)))
        if controls is not None and self.control_barrier.bounds is not None:
            for i in np.flatnonzero(self.control_barrier.violations(controls)):
                events.append(("control", int(i), -1))
        return events


def repulsive_force_init(learner, k_steer: float = 1.5, k_brake: float = 1.0):
    """Structured initial state-force block realizing an initial safe policy.

    The own-block (x, y) components of the state-barrier gradient equal the
    body-frame bearing away from the nearest constraint, scaled by barrier
    intensity; mapping the lateral component into the yaw-rate channel and
    the longitudinal one into braking yields a geometric repulsion that the
    learner then refines.  The control-force block starts neutral.
    """
    topo = learner.topo
    for i in range(topo.n_robots):
        w = learner.robot_weights(i)
        if "wa2" not in w:
            continue
        w2 = np.zeros_like(w["wa2"])
        own = topo.own_position(i) * STATE_DIM
        w2[own + 1, 0] = -k_steer   # lateral repulsion -> turn away
        w2[own + 0, 1] = -k_brake   # obstacle ahead -> decelerate
        w["wa2"] = w2
        w["wa3"] = np.zeros_like(w["wa3"])
        w["wc2"] = np.zeros_like(w["wc2"])
        learner.set_robot_weights(i, w)


def safe_stage_cost(e_nbr, u, q, r, setup: SafetySetup, barrier_e, barrier_u):
    """Quadratic stage cost plus the weighted barrier terms.

    ``barrier_e`` / ``barrier_u`` are the already-evaluated barrier values for
    this robot (state barriers depend on leader context, so the caller
    evaluates them)."""
    e_nbr = np.asarray(e_nbr, dtype=float)
    u = np.asarray(u, dtype=float)
    quad = float(e_nbr @ q @ e_nbr + u @ r @ u)
    return quad + setup.mu * (float(barrier_e) + float(barrier_u))


def safe_terminal_penalty(a_blocks, b_blocks, gains, topo, spec, setup: SafetySetup,
                          leader, hessian_box: float = 1.0):
    """Terminal penalties accounting for the barrier curvature: the stage
    weight gains mu * (H_e + K' H_u K) before the joint synthesis."""
    from .objective import terminal_penalty

    h_e = setup.state_hessian_bounds(leader, box=hessian_box)
    h_u = setup.control_barrier.hessian_bound()
    q_extra = []
    for i in range(topo.n_robots):
        k = gains.gains[i]
        q_extra.append(setup.mu * (h_e[i] + k.T @ h_u @ k))
    return terminal_penalty(a_blocks, b_blocks, gains, topo, spec, q_extra=q_extra)


def safe_rate_monitor(rate_c1, rate_c2, sigma_c, sigma_c_plus, grad_be,
                      grad_be_plus, chain_norm, rate_a1, rate_a2, rate_a3,
                      sigma_a, grad_bnu, r_mat, mu, hess_bu):
    """Reference form of the barrier-aware convergence-condition values."""
    def gamma(z, zp):
        return float(z @ z) - 2.0 * abs(float(z @ zp)) * chain_norm \
            + float(zp @ zp) * chain_norm ** 2

    c_crit = rate_c1 * gamma(sigma_c, sigma_c_plus) \
        + rate_c2 * gamma(grad_be, grad_be_plus)
    r_tilde = 2.0 * r_mat + mu * hess_bu
    lam = np.linalg.eigvalsh(r_tilde).max()
    c_act = lam * (rate_a1 * float(sigma_a @ sigma_a)
                   + rate_a2 * float(grad_be @ grad_be)
                   + rate_a3 * float(grad_bnu @ grad_bnu))
    return c_crit, c_act
