"""Numerical receding-horizon baseline and the stability envelope.

The open-loop solver does plain gradient descent with backtracking line
search on the stacked control sequence, with gradients from the discrete
adjoint recursion through the rollout.  It provides the baseline stabilizing
policy whose monotone cost trace bounds the learned cost at every step, and
serves as the in-repo comparison reference.
"""

import numpy as np

from .dynamics import ErrorModel, LeaderSignal
from .objective import ObjectiveSpec
from .topology import STATE_DIM, Topology


class RecedingHorizonBaseline:
    """Finite-horizon open-loop optimizer over all robots' control sequences."""

    def __init__(self, model: ErrorModel, spec: ObjectiveSpec,
                 max_iterations: int = 30, step_init: float = 0.5,
                 grad_tol: float = 1e-10, control_bounds=None):
        self.model = model
        self.spec = spec
        self.topo = model.topo
        self.max_iterations = max_iterations
        self.step_init = step_init
        self.grad_tol = grad_tol
        self.control_bounds = None if control_bounds is None \
            else np.asarray(control_bounds, dtype=float)

    # -- rollout and adjoint -------------------------------------------------

    def rollout(self, e0, controls, leaders):
        n = controls.shape[0]
        states = np.empty((n + 1,) + e0.shape)
        states[0] = e0
        for tau in range(n):
            states[tau + 1] = self.model.step(states[tau], controls[tau],
                                              leaders[tau])
        return states

    def cost(self, states, controls):
        m = self.topo.n_robots
        total = 0.0
        for tau in range(controls.shape[0]):
            for i in range(m):
                e_loc = states[tau][list(self.topo.neighbors[i])].ravel()
                total += e_loc @ self.spec.q_matrices[i] @ e_loc
                total += controls[tau, i] @ self.spec.r_matrices[i] @ controls[tau, i]
        if self.spec.terminal is not None:
            for i in range(m):
                total += states[-1][i] @ self.spec.terminal[i] @ states[-1][i]
        return float(total)

    def _stage_state_grad(self, errors):
        """d(stage cost)/d(stacked state), accumulated over robots."""
        m = self.topo.n_robots
        grad = np.zeros((m, STATE_DIM))
        for i in range(m):
            e_loc = errors[list(self.topo.neighbors[i])].ravel()
            g_loc = 2.0 * self.spec.q_matrices[i] @ e_loc
            for pos, j in enumerate(self.topo.neighbors[i]):
                grad[j] += g_loc[STATE_DIM * pos:STATE_DIM * (pos + 1)]
        return grad

    def gradient(self, states, controls, leaders):
        """Adjoint sweep: exact gradient of the rollout cost in the controls."""
        n = controls.shape[0]
        m = self.topo.n_robots
        grad_u = np.zeros_like(controls)
        lam = np.zeros((m, STATE_DIM))
        if self.spec.terminal is not None:
            for i in range(m):
                lam[i] = 2.0 * self.spec.terminal[i] @ states[-1][i]
        for tau in range(n - 1, -1, -1):
            own, edge, g_mats = self.model.step_jacobians(states[tau],
                                                          controls[tau],
                                                          leaders[tau])
            grad_u[tau] = np.einsum("rxm,rx->rm", g_mats, lam)
            grad_u[tau] += 2.0 * np.einsum("rmn,rn->rm",
                                           np.stack([self.spec.r_matrices[i]
                                                     for i in range(m)]),
                                           controls[tau])
            nxt = np.einsum("rxy,ry->rx", np.transpose(own, (0, 2, 1)), lam)
            src_add = np.einsum("exy,ey->ex",
                                np.transpose(edge, (0, 2, 1)),
                                lam[self.model.edge_dst])
            np.add.at(nxt, self.model.edge_src, src_add)
            lam = nxt + self._stage_state_grad(states[tau])
        return grad_u

    def _project(self, controls):
        if self.control_bounds is None:
            return controls
        return np.clip(controls, -self.control_bounds, self.control_bounds)

    def solve_open_loop(self, e0, leaders, warm_start=None):
        """Optimize the stacked control sequence from e0 over the horizon.

        Returns (controls (N, M, 2), info).  Projected descent when control
        bounds are configured; reports non-finite costs instead of raising.
        """
        n = self.spec.horizon
        m = self.topo.n_robots
        controls = np.zeros((n, m, 2)) if warm_start is None else warm_start.copy()
        controls = self._project(controls)
        states = self.rollout(e0, controls, leaders)
        value = self.cost(states, controls)
        if not np.isfinite(value):
            return controls, {"cost": value, "iterations": 0, "converged": False,
                              "message": "non-finite initial cost"}
        iterations = 0
        for iterations in range(1, self.max_iterations + 1):
            grad = self.gradient(states, controls, leaders)
            gnorm = float(np.sqrt(np.sum(grad ** 2)))
            if gnorm <= self.grad_tol:
                break
            step = self.step_init
            improved = False
            for _ in range(40):  # backtracking line search
                cand = self._project(controls - step * grad)
                cand_states = self.rollout(e0, cand, leaders)
                cand_value = self.cost(cand_states, cand)
                if np.isfinite(cand_value) and \
                        cand_value <= value - 1e-4 * step * gnorm ** 2:
                    controls, states, value = cand, cand_states, cand_value
                    improved = True
                    break
                step *= 0.5
            if not improved:
                break
        return controls, {"cost": value, "iterations": iterations,
                          "converged": True, "message": "ok"}


class StabilityEnvelope:
    """Monotone baseline cost trace that must upper-bound the learned cost.

    ``geometric`` mode fits a decaying trace to the first observed cost;
    ``shifted`` mode maintains the baseline's own shadow system, re-costing
    the shifted control sequences extended by the terminal gains.
    """

    def __init__(self, mode: str = "geometric", ratio: float = 0.97,
                 baseline: RecedingHorizonBaseline = None, gains=None,
                 slack: float = 1e-9, floor: float = 1e-3):
        if mode not in ("geometric", "shifted"):
            raise ValueError(f"unknown envelope mode {mode!r}")
        if mode == "geometric" and not 0.0 < ratio < 1.0:
            raise ValueError("geometric ratio must lie in (0, 1)")
        if mode == "shifted" and (baseline is None or gains is None):
            raise ValueError("shifted mode needs the baseline solver and gains")
        self.mode = mode
        self.ratio = ratio
        self.baseline = baseline
        self.gains = gains
        self.slack = slack
        # the learned cost is ultimately bounded, not exactly zero, so the
        # geometric trace decays to this floor rather than to 0
        self.floor = floor
        self.start_cost = None
        self.start_step = 0
        self._shadow_errors = None
        self._shadow_controls = None
        self._shadow_cost = None
        self.trace = []

    # -- geometric ------------------------------------------------------------

    def _geometric_value(self, step):
        if self.start_cost is None:
            return np.inf
        return max(self.start_cost * self.ratio ** (step - self.start_step),
                   self.floor)

    # -- shifted-sequence -----------------------------------------------------

    def initialize_shifted(self, e0, leaders):
        controls, info = self.baseline.solve_open_loop(e0, leaders)
        self._shadow_errors = np.asarray(e0, dtype=float).copy()
        self._shadow_controls = controls
        states = self.baseline.rollout(e0, controls, leaders)
        self._shadow_cost = self.baseline.cost(states, controls)

    def _advance_shifted(self, leaders):
        """Shift the stored sequences, extend the tail with the terminal
        gains, and step the shadow system by the first action."""
        model = self.baseline.model
        topo = self.baseline.topo
        first = self._shadow_controls[0]
        states = self.baseline.rollout(self._shadow_errors,
                                       self._shadow_controls, leaders)
        tail_state = states[-1]
        tail = np.zeros_like(first)
        for i in range(topo.n_robots):
            e_loc = tail_state[list(topo.neighbors[i])].ravel()
            tail[i] = self.gains.gains[i] @ e_loc
        self._shadow_controls = np.concatenate(
            [self._shadow_controls[1:], tail[None]], axis=0)
        self._shadow_errors = model.step(self._shadow_errors, first, leaders[0])
        new_states = self.baseline.rollout(self._shadow_errors,
                                           self._shadow_controls, leaders[1:])
        self._shadow_cost = self.baseline.cost(new_states, self._shadow_controls)

    # -- public API -------------------------------------------------------------

    def value(self, step):
        if self.mode == "geometric":
            return self._geometric_value(step)
        return np.inf if self._shadow_cost is None else self._shadow_cost

    def check(self, learned_cost, step) -> bool:
        """Stability condition: learned cost under the envelope (with slack)."""
        if self.mode == "geometric" and self.start_cost is None:
            self.start_cost = learned_cost
            self.start_step = step
            self.trace.append((step, learned_cost, learned_cost))
            return True
        bound = self.value(step)
        ok = bool(learned_cost <= bound + self.slack)
        self.trace.append((step, learned_cost, bound))
        return ok

    def advance(self, leaders=None):
        """Move the envelope to the next step (shifted mode re-costs)."""
        if self.mode == "shifted" and self._shadow_controls is not None:
            self._advance_shifted(leaders)


def per_robot_check(learned_costs, baseline_costs, eta=None) -> bool:
    """Distributed relaxation: J_i <= J_i^b + eta_i with sum(eta) <= 0."""
    learned_costs = np.asarray(learned_costs, dtype=float)
    baseline_costs = np.asarray(baseline_costs, dtype=float)
    if eta is None:
        eta = np.zeros_like(learned_costs)
    eta = np.asarray(eta, dtype=float)
    if eta.sum() > 1e-12:
        raise ValueError("eta must sum to a nonpositive value")
    return bool(np.all(learned_costs <= baseline_costs + eta + 1e-9))
