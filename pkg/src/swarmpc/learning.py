"""Distributed incremental actor-critic learner for receding-horizon control.

Each robot carries a critic that approximates the costate (the gradient of
its local cost-to-go with respect to the neighborhood error) and an actor
that emits the local control, both linear in trained output weights over
fixed tanh features.  Within every prediction interval the learner sweeps
forward in time, updating all robots synchronously per step from one-step-
ahead predictions; the nets warm-start the next interval.

The batched engine groups robots by neighbor count so that all per-robot
updates run as stacked einsums; per-robot cost is constant at fixed degree.
"""

from dataclasses import dataclass, field

import numpy as np

from .dynamics import ErrorModel, LeaderSignal
from .objective import ObjectiveSpec
from .topology import STATE_DIM, Topology

BLOCK_FEATURES = 4   # tanh units per neighbor block


class RunFailure(RuntimeError):
    """Learning could not continue (divergence or retry budget exhausted)."""


@dataclass
class LearnerConfig:
    horizon: int = 20
    rate_critic: float = 0.4
    rate_actor: float = 0.2
    rate_critic_barrier: float = 1e-5
    rate_actor_state_force: float = 0.1
    rate_actor_control_force: float = 0.1
    t_max: int = 30
    cold_start_t_max: int = 0   # sweep cap for the very first interval (0: use t_max)
    err_tol: float = 1e-4
    weight_init_high: float = 0.1
    retry_budget: int = 5
    basis_scale: float = 1.0
    critic_features: int = 4
    monitor: bool = True
    monitor_remedy: bool = True
    # per-update safeguard: effective rates are scaled down so the step's
    # convergence-condition value stays below this bound (the configured
    # rates are what the monitors report)
    rate_guard: float = 0.9
    # the state-force block defaults to the designed repulsion gain (the
    # initial safe policy); enable to let the published update move it
    train_state_force: bool = False

    def __post_init__(self):
        if self.horizon < 1 or self.t_max < 1:
            raise ValueError("horizon and t_max must be >= 1")
        for r in (self.rate_critic, self.rate_actor):
            if r <= 0:
                raise ValueError("learning rates must be positive")


class FeatureBasis:
    """Fixed random tanh features with trained output weights only.

    The actor uses one shared 4x4 block map evaluated on each neighbor's
    error, which is what makes trained actor blocks portable across robot
    counts.  The critic uses a per-robot map from the full neighborhood error
    to a fixed number of units; critics are not transferred.
    """

    def __init__(self, seed: int, scale: float = 1.0,
                 critic_features: int = BLOCK_FEATURES):
        self.seed = int(seed)
        self.scale = float(scale)
        self.critic_features = int(critic_features)
        rng = np.random.default_rng(self.seed)
        self.a_actor = scale * rng.uniform(-1.0, 1.0, (BLOCK_FEATURES, STATE_DIM))

    def critic_input_map(self, robot: int, n_local: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, robot + 1])
        return self.scale * rng.uniform(-1.0, 1.0, (self.critic_features, n_local))

    def actor(self, blocks: np.ndarray) -> np.ndarray:
        """(..., K, 4) error blocks -> (..., K*4) stacked features."""
        z = np.tanh(blocks @ self.a_actor.T)
        return z.reshape(*blocks.shape[:-2], -1)


# ---------------------------------------------------------------------------
# reference per-robot forms of the targets and updates; the batched engine is
# tested against these
# ---------------------------------------------------------------------------

def costate_target(e_nbr, lam_plus_blocks, jac_blocks, q):
    """2 Q e_Ni plus the chained one-step-ahead costate blocks.

    ``lam_plus_blocks[j]`` is the slice of robot i's own critic output at the
    predicted next state owned by robot j's coordinates; ``jac_blocks[j]`` is
    d f_j / d e_Ni.  Every j must appear in both maps (delay-free network).
    """
    e_nbr = np.asarray(e_nbr, dtype=float)
    target = 2.0 * q @ e_nbr
    for j, jac in jac_blocks.items():
        if j not in lam_plus_blocks:
            raise KeyError(f"missing one-step-ahead costate block for robot {j}")
        target = target + jac.T @ lam_plus_blocks[j]
    return target


def action_target(g_i, lam_plus_own_blocks):
    """-(sum over reverse neighbors of g_i' lambda_j^[i] at the next state)."""
    g_i = np.asarray(g_i, dtype=float)
    total = np.zeros(g_i.shape[0])
    for lam in lam_plus_own_blocks:
        total = total + np.asarray(lam, dtype=float)
    return -g_i.T @ total


def update_critic(w_c, eps_c, sigma, sigma_plus, g_mat, rate):
    """One gradient step on ||eps_c||^2; the target's dependence on the same
    weights through the next-state evaluation yields the chained term."""
    grad = -2.0 * np.outer(sigma, eps_c) + 2.0 * np.outer(sigma_plus, eps_c @ g_mat)
    return w_c - rate * grad


def update_actor(w_a, eps_a, sigma_a, r_mat, rate):
    grad = -2.0 * np.outer(sigma_a, eps_a @ (2.0 * r_mat))
    return w_a - rate * grad


def critic_chain_matrix(jac_blocks, neighbors, n_local):
    """Assemble G = sum_j (d f_j / d e_Ni)' S_j used by the critic gradient."""
    g = np.zeros((n_local, n_local))
    for j, jac in jac_blocks.items():
        pos = neighbors.index(j) * STATE_DIM
        g[:, pos:pos + STATE_DIM] = jac.T
    return g


def rate_monitor_critic(rate, sigma, sigma_plus, chain_norm):
    """gamma_c * (||s||^2 - 2 |s's+| ||G|| + ||s+||^2 ||G||^2), flagged at 1."""
    gamma = float(sigma @ sigma) \
        - 2.0 * abs(float(sigma @ sigma_plus)) * chain_norm \
        + float(sigma_plus @ sigma_plus) * chain_norm ** 2
    return rate * gamma


def rate_monitor_actor(rate, sigma_a, r_mat):
    return 2.0 * np.linalg.eigvalsh(r_mat).max() * rate * float(sigma_a @ sigma_a)


# ---------------------------------------------------------------------------
# batched engine
# ---------------------------------------------------------------------------

class _DegreeClass:
    """Robots sharing a neighbor count, with index plumbing for the einsums."""

    def __init__(self, ids, topo: Topology, model: ErrorModel, lam_offsets):
        self.ids = np.asarray(ids, dtype=int)
        r = len(ids)
        self.k = len(topo.neighbors[ids[0]])
        self.n_local = STATE_DIM * self.k
        self.nbr = np.array([topo.neighbors[i] for i in ids], dtype=int)
        self.own_pos = np.array([topo.own_position(i) for i in ids], dtype=int)
        # 1 where the a-th neighbor also lists the robot (a reverse neighbor)
        self.rev_mask = np.zeros((r, self.k))
        for row, i in enumerate(ids):
            for a, j in enumerate(topo.neighbors[i]):
                if i in topo.neighbors[j]:
                    self.rev_mask[row, a] = 1.0
        # (r, a, b): index into the jacobian block buffer of d f_{nbr[a]} / d e_{nbr[b]}
        m = topo.n_robots
        edge_lookup = {}
        for idx in range(model.n_edges):
            edge_lookup[(int(model.edge_src[idx]), int(model.edge_dst[idx]))] = m + idx
        zero_idx = m + model.n_edges
        self.pair_idx = np.full((r, self.k, self.k), zero_idx, dtype=int)
        for row, i in enumerate(ids):
            for a, ja in enumerate(topo.neighbors[i]):
                for b, lb in enumerate(topo.neighbors[i]):
                    if ja == lb:
                        self.pair_idx[row, a, b] = ja
                    elif lb in topo.neighbors[ja]:
                        self.pair_idx[row, a, b] = edge_lookup[(lb, ja)]
        self.lam_rows = np.stack([np.arange(lam_offsets[i], lam_offsets[i] + self.n_local)
                                  for i in ids])


class PolicyLearner:
    """Algorithm state for online policy learning and pure deployment."""

    def __init__(self, model: ErrorModel, spec: ObjectiveSpec, cfg: LearnerConfig,
                 basis: FeatureBasis, rng, barrier=None):
        self.model = model
        self.topo = model.topo
        self.spec = spec
        self.cfg = cfg
        self.basis = basis
        self.barrier = barrier          # SafetySetup or None
        self.rng = rng
        m = self.topo.n_robots

        degs = self.topo.degrees
        self.lam_offsets = np.zeros(m + 1, dtype=int)
        np.cumsum(degs * STATE_DIM, out=self.lam_offsets[1:])
        self.lam_size = int(self.lam_offsets[-1])
        # destination of each lambda entry when summed into the actor targets
        dst = np.empty(self.lam_size, dtype=int)
        for j in range(m):
            for pos, l in enumerate(self.topo.neighbors[j]):
                start = self.lam_offsets[j] + pos * STATE_DIM
                dst[start:start + STATE_DIM] = np.arange(l * STATE_DIM,
                                                         (l + 1) * STATE_DIM)
        self.lam_dst = dst

        self.classes = []
        by_k = {}
        for i in range(m):
            by_k.setdefault(degs[i], []).append(i)
        for k in sorted(by_k):
            self.classes.append(_DegreeClass(by_k[k], self.topo, model,
                                             self.lam_offsets))
        self.cls_of = np.zeros(m, dtype=int)
        self.row_of = np.zeros(m, dtype=int)
        for ci, cls in enumerate(self.classes):
            for row, i in enumerate(cls.ids):
                self.cls_of[i] = ci
                self.row_of[i] = row

        # per-class stacks of Q, R, critic input maps, and rates
        self.q_stack = []
        self.r_stack = []
        self.r_eig = []
        self.critic_maps = []
        for cls in self.classes:
            self.q_stack.append(np.stack([spec.q_matrices[i] for i in cls.ids]))
            self.r_stack.append(np.stack([spec.r_matrices[i] for i in cls.ids]))
            self.r_eig.append(np.array([np.linalg.eigvalsh(spec.r_matrices[i]).max()
                                        for i in cls.ids]))
            self.critic_maps.append(np.stack(
                [basis.critic_input_map(i, cls.n_local) for i in cls.ids]))
        self.rate_c = np.full(m, cfg.rate_critic)
        self.rate_a = np.full(m, cfg.rate_actor)
        self.rate_c2 = np.full(m, cfg.rate_critic_barrier)
        self.rate_a2 = np.full(m, cfg.rate_actor_state_force)
        self.rate_a3 = np.full(m, cfg.rate_actor_control_force)

        self.weights = None
        self.initialize_weights()
        self.events = []
        self.monitor_flags = np.zeros(m, dtype=bool)
        self._chain_cache = [None] * len(self.classes)

    # -- weights ------------------------------------------------------------

    def initialize_weights(self):
        """Uniform draws on [0, high], robot by robot so the stream does not
        depend on the class partitioning."""
        high = self.cfg.weight_init_high
        n_c = self.basis.critic_features
        safe = self.barrier is not None
        per_robot = []
        for i in range(self.topo.n_robots):
            k = len(self.topo.neighbors[i])
            n_local = STATE_DIM * k
            w = {"wc": self.rng.uniform(0.0, high, (n_c, n_local)),
                 "wa": self.rng.uniform(0.0, high, (n_local, 2))}
            if safe:
                w["wc2"] = self.rng.uniform(0.0, high, (n_local, n_local))
                w["wa2"] = self.rng.uniform(0.0, high, (n_local, 2))
                w["wa3"] = self.rng.uniform(0.0, high, (2, 2))
            per_robot.append(w)
        self.weights = []
        for cls in self.classes:
            stacks = {}
            for key in per_robot[cls.ids[0]]:
                stacks[key] = np.stack([per_robot[i][key] for i in cls.ids])
            self.weights.append(stacks)

    def robot_weights(self, i: int) -> dict:
        cls = self.cls_of[i]
        row = self.row_of[i]
        return {key: val[row].copy() for key, val in self.weights[cls].items()}

    def set_robot_weights(self, i: int, blocks: dict):
        cls = self.cls_of[i]
        row = self.row_of[i]
        for key, val in blocks.items():
            self.weights[cls][key][row] = val

    # -- inference ----------------------------------------------------------

    def actions(self, errors: np.ndarray, leader: LeaderSignal) -> np.ndarray:
        """Actor outputs for all robots at the given errors (pure inference)."""
        u = np.zeros((self.topo.n_robots, 2))
        grad_be = self._state_barrier_gradients(errors, leader) \
            if self.barrier is not None else None
        for ci, cls in enumerate(self.classes):
            e_blocks = errors[cls.nbr]
            sig_a = self.basis.actor(e_blocks)
            w = self.weights[ci]
            nu = np.einsum("rfm,rf->rm", w["wa"], sig_a)
            if self.barrier is not None:
                gb = grad_be[ci]
                grad_bnu = self.barrier.control_barrier.gradient(nu)
                out = nu + np.einsum("rfm,rf->rm", w["wa2"], gb) \
                    + np.einsum("rfm,rf->rm", w["wa3"], grad_bnu)
            else:
                out = nu
            u[cls.ids] = out
        return u

    def _state_barrier_gradients(self, errors, leader):
        """Per-class gradients of the state barrier w.r.t. the local stacked
        error (zeros when no safety setup is attached)."""
        flat = self.barrier.state_barrier_gradient(errors, leader)
        return [flat[cls.lam_rows] for cls in self.classes]

    # -- learning -----------------------------------------------------------

    def learn_interval(self, e_k: np.ndarray, leaders, envelope=None, step=0,
                       inflate_cost: float = 1.0):
        """Run one prediction interval of forward sweeps, returning the first
        actions and interval diagnostics.

        ``leaders`` must provide the horizon's leader signals (N + 1 entries).
        When the stability check against ``envelope`` fails, the weights are
        re-initialized and the interval repeats, up to the retry budget.
        ``inflate_cost`` scales the reported cost once (fault-injection hook
        used by the verification suite).
        """
        cfg = self.cfg
        t_cap = cfg.t_max
        if step == 0 and cfg.cold_start_t_max > 0:
            t_cap = cfg.cold_start_t_max
        retries = 0
        while True:
            err = np.inf
            t = 0
            monitors = None
            diverged = not self._weights_finite()
            while not diverged and err >= cfg.err_tol and t < t_cap:
                before = [{k: v.copy() for k, v in w.items()} for w in self.weights]
                mon = self._sweep(e_k, leaders, collect_monitors=(t == 0 and cfg.monitor))
                if mon is not None:
                    monitors = mon
                err = 0.0
                for ci, w in enumerate(self.weights):
                    for key, val in w.items():
                        if not np.isfinite(val).all():
                            diverged = True
                        err += np.sqrt(np.sum((val - before[ci][key]) ** 2,
                                              axis=(1, 2))).sum()
                t += 1

            if not diverged:
                j_total, j_quad, j_per = self.rollout_cost(e_k, leaders)
                j_checked = j_quad * inflate_cost
                inflate_cost = 1.0
                if envelope is None or envelope.check(j_checked, step):
                    if monitors is not None and cfg.monitor_remedy:
                        self._apply_monitor_remedy(monitors, step)
                    u_first = self.actions(e_k, leaders[0])
                    return u_first, {
                        "iterations": t, "err": err, "cost": j_total,
                        "cost_quadratic": j_quad, "cost_per_robot": j_per,
                        "envelope": envelope.value(step) if envelope else np.nan,
                        "retries": retries, "monitors": monitors,
                    }
            retries += 1
            self.events.append(("reinit", step, retries))
            if retries > cfg.retry_budget:
                raise RunFailure(
                    f"stability retries exhausted at step {step} "
                    f"(diverged={diverged})")
            self.initialize_weights()
            if envelope is not None and not diverged:
                # the re-initialized policy gets a freshly anchored envelope;
                # any monotone decreasing bound is an admissible candidate
                envelope.start_cost = None

    def _weights_finite(self) -> bool:
        return all(np.isfinite(val).all() for w in self.weights
                   for val in w.values())

    def _sweep(self, e_k, leaders, collect_monitors=False):
        n = self.cfg.horizon
        errors = np.asarray(e_k, dtype=float).copy()
        monitors = {"critic": np.zeros(self.topo.n_robots),
                    "actor": np.zeros(self.topo.n_robots)} if collect_monitors else None
        refresh_all = self.barrier is not None  # barrier features move fast
        for tau in range(n):
            leader = leaders[tau]
            leader_next = leaders[tau + 1]
            u = self.actions(errors, leader)
            nxt = self.model.step(errors, u, leader)
            self._update_all(errors, nxt, u, leader, leader_next, monitors,
                             terminal=(tau == n - 1),
                             refresh_chain=(tau == 0 or refresh_all))
            errors = nxt
        return monitors

    def _terminal_costate(self, errors_next):
        """Flat costate buffer at the horizon end: the local value there is the
        terminal quadratic, so its gradient (own block only) anchors the
        recursion instead of a net evaluation."""
        lam = np.zeros(self.lam_size)
        if self.spec.terminal is None:
            return lam
        for i in range(self.topo.n_robots):
            start = self.lam_offsets[i] + self.topo.own_position(i) * STATE_DIM
            lam[start:start + STATE_DIM] = \
                2.0 * self.spec.terminal[i] @ errors_next[i]
        return lam

    def _critic_features(self, ci, errors):
        cls = self.classes[ci]
        e_local = errors[cls.nbr].reshape(len(cls.ids), -1)
        return np.tanh(np.einsum("rfn,rn->rf", self.critic_maps[ci], e_local))

    def _chain_norms(self, ci, pair):
        """Norm of the side-by-side collection of the reverse neighbors'
        transposed Jacobian blocks, per robot of the class."""
        cls = self.classes[ci]
        r, k = pair.shape[0], cls.k
        masked = pair * cls.rev_mask[:, :, None, None, None]
        j_stack = np.transpose(masked, (0, 1, 3, 2, 4)).reshape(
            r, k, STATE_DIM, k * STATE_DIM)
        gram = np.einsum("rkxn,rkxm->rnm", j_stack, j_stack)
        gram = np.nan_to_num(gram, nan=0.0, posinf=1e12, neginf=-1e12)
        return np.sqrt(np.maximum(np.linalg.eigvalsh(gram)[:, -1], 0.0))

    @staticmethod
    def _gamma_of(z, zp, nu):
        return np.sum(z * z, axis=1) \
            - 2.0 * np.abs(np.sum(z * zp, axis=1)) * nu \
            + np.sum(zp * zp, axis=1) * nu ** 2

    def _update_all(self, errors, nxt, u, leader, leader_next, monitors,
                    terminal=False, refresh_chain=False):
        own, edge = self.model.jacobian_blocks(errors, leader)
        buffer = np.concatenate([own, edge,
                                 np.zeros((1, STATE_DIM, STATE_DIM))], axis=0)
        g_all = self.model.input_matrices(errors)
        safe = self.barrier is not None
        if safe:
            gb_now = self.barrier.state_barrier_gradient(errors, leader)
            gb_nxt = self.barrier.state_barrier_gradient(nxt, leader_next)
        lam_plus = np.zeros(self.lam_size)
        lam_now = np.zeros(self.lam_size)
        cache = []
        for ci, cls in enumerate(self.classes):
            w = self.weights[ci]
            sig_c = self._critic_features(ci, errors)
            sig_c_plus = self._critic_features(ci, nxt)
            lam = np.einsum("rfn,rf->rn", w["wc"], sig_c)
            lamp = np.einsum("rfn,rf->rn", w["wc"], sig_c_plus)
            if safe:
                hb_now = gb_now[cls.lam_rows]
                hb_nxt = gb_nxt[cls.lam_rows]
                lam = lam + np.einsum("rfn,rf->rn", w["wc2"], hb_now)
                lamp = lamp + np.einsum("rfn,rf->rn", w["wc2"], hb_nxt)
                cache.append((sig_c, sig_c_plus, hb_now, hb_nxt))
            else:
                cache.append((sig_c, sig_c_plus, None, None))
            lam_now[cls.lam_rows.ravel()] = lam.ravel()
            lam_plus[cls.lam_rows.ravel()] = lamp.ravel()
        if terminal:
            lam_plus = self._terminal_costate(nxt)

        # actor-target exchange: sum of next-step costate blocks over the
        # robots that include each robot among their neighbors
        s_flat = np.bincount(self.lam_dst, weights=lam_plus,
                             minlength=self.topo.n_robots * STATE_DIM)
        s_states = s_flat.reshape(self.topo.n_robots, STATE_DIM)

        guard = self.cfg.rate_guard
        for ci, cls in enumerate(self.classes):
            w = self.weights[ci]
            sig_c, sig_c_plus, hb_now, hb_nxt = cache[ci]
            r = len(cls.ids)
            k = cls.k
            e_local = errors[cls.nbr].reshape(r, -1)
            pair = buffer[cls.pair_idx]                      # (r, k, k, 4, 4)
            if refresh_chain or self._chain_cache[ci] is None:
                self._chain_cache[ci] = self._chain_norms(ci, pair)
            nu = self._chain_cache[ci]
            lam_plus_blk = lam_plus[cls.lam_rows].reshape(r, k, STATE_DIM)
            lam_plus_blk = lam_plus_blk * cls.rev_mask[:, :, None]

            target = 2.0 * np.einsum("rmn,rn->rm", self.q_stack[ci], e_local)
            target += np.einsum("rabxy,rax->rby", pair, lam_plus_blk).reshape(r, -1)
            if safe:
                target = target + self.barrier.mu * hb_now
            eps_c = target - lam_now[cls.lam_rows].reshape(r, -1)

            eps_blk = eps_c.reshape(r, k, STATE_DIM)
            chained = np.einsum("rabxy,rby->rax", pair, eps_blk)
            chained *= cls.rev_mask[:, :, None]
            chained = chained.reshape(r, -1)
            if terminal:
                chained = np.zeros_like(chained)  # anchored target is net-free

            # per-update safeguard: scale the effective rates so this step's
            # convergence-condition value stays under the guard bound
            nu_step = np.zeros_like(nu) if terminal else nu
            gam_sig = self._gamma_of(sig_c, sig_c_plus, nu_step)
            c_crit = self.rate_c[cls.ids] * gam_sig
            if safe:
                c_crit = c_crit + self.rate_c2[cls.ids] * \
                    self._gamma_of(hb_now, hb_nxt, nu_step)
            scale_c = np.minimum(1.0, guard / np.maximum(c_crit, 1e-12))

            rc = self.rate_c[cls.ids] * scale_c
            grad_wc = -2.0 * sig_c[:, :, None] * eps_c[:, None, :] \
                + 2.0 * sig_c_plus[:, :, None] * chained[:, None, :]
            w["wc"] -= rc[:, None, None] * grad_wc
            if safe:
                grad_wc2 = -2.0 * hb_now[:, :, None] * eps_c[:, None, :] \
                    + 2.0 * hb_nxt[:, :, None] * chained[:, None, :]
                w["wc2"] -= (self.rate_c2[cls.ids] * scale_c)[:, None, None] * grad_wc2

            # actor residual against the first-order optimality target
            sig_a = self.basis.actor(errors[cls.nbr])
            nu_a = np.einsum("rfm,rf->rm", w["wa"], sig_a)
            if safe:
                grad_bnu = self.barrier.control_barrier.gradient(nu_a)
                u_hat = nu_a + np.einsum("rfm,rf->rm", w["wa2"], hb_now) \
                    + np.einsum("rfm,rf->rm", w["wa3"], grad_bnu)
                u_off = 2.0 * np.einsum("rmn,rn->rm", self.r_stack[ci], u_hat) \
                    + self.barrier.mu * self.barrier.control_barrier.gradient(u_hat)
                r_tilde = 2.0 * self.r_stack[ci] \
                    + self.barrier.mu * self.barrier.control_barrier.hessian(u_hat)
                lam_max = np.linalg.eigvalsh(r_tilde)[:, -1]
                c_act = lam_max * (self.rate_a[cls.ids] * np.sum(sig_a ** 2, axis=1)
                                   + self.rate_a2[cls.ids] * np.sum(hb_now ** 2, axis=1)
                                   + self.rate_a3[cls.ids] * np.sum(grad_bnu ** 2, axis=1))
            else:
                u_hat = nu_a
                u_off = 2.0 * np.einsum("rmn,rn->rm", self.r_stack[ci], u_hat)
                r_tilde = 2.0 * self.r_stack[ci]
                c_act = 2.0 * self.r_eig[ci] * self.rate_a[cls.ids] \
                    * np.sum(sig_a ** 2, axis=1)
            scale_a = np.minimum(1.0, guard / np.maximum(c_act, 1e-12))

            g_cls = g_all[cls.ids]
            u_target = -np.einsum("rxm,rx->rm", g_cls, s_states[cls.ids])
            eps_a = u_target - u_off
            eps_r = np.einsum("rm,rmn->rn", eps_a, r_tilde)
            w["wa"] -= (self.rate_a[cls.ids] * scale_a)[:, None, None] * \
                (-2.0 * sig_a[:, :, None] * eps_r[:, None, :])
            if safe:
                if self.cfg.train_state_force:
                    w["wa2"] -= (self.rate_a2[cls.ids] * scale_a)[:, None, None] * \
                        (-2.0 * hb_now[:, :, None] * eps_r[:, None, :])
                w["wa3"] -= (self.rate_a3[cls.ids] * scale_a)[:, None, None] * \
                    (-2.0 * grad_bnu[:, :, None] * eps_r[:, None, :])

            if monitors is not None:
                exact_nu = self._chain_norms(ci, pair)
                c_crit_m = self.rate_c[cls.ids] * \
                    self._gamma_of(sig_c, sig_c_plus, exact_nu)
                if safe:
                    c_crit_m = c_crit_m + self.rate_c2[cls.ids] * \
                        self._gamma_of(hb_now, hb_nxt, exact_nu)
                np.maximum.at(monitors["critic"], cls.ids, c_crit_m)
                np.maximum.at(monitors["actor"], cls.ids, c_act)
        return None

    def _apply_monitor_remedy(self, monitors, step):
        """Halve the offending rate for the rest of the run when a condition
        value reaches 1; the event is recorded for the run log."""
        hot_c = monitors["critic"] >= 1.0
        hot_a = monitors["actor"] >= 1.0
        for i in np.flatnonzero(hot_c):
            self.rate_c[i] *= 0.5
            self.rate_c2[i] *= 0.5
            self.events.append(("monitor_critic", step, int(i)))
        for i in np.flatnonzero(hot_a):
            self.rate_a[i] *= 0.5
            self.rate_a2[i] *= 0.5
            self.rate_a3[i] *= 0.5
            self.events.append(("monitor_actor", step, int(i)))

    # -- costs --------------------------------------------------------------

    def rollout_cost(self, e_k, leaders):
        """Roll the horizon under the current actor and accumulate the local
        costs.  Returns (total cost, quadratic-only total, per-robot costs);
        in safe mode the first includes the weighted barrier terms."""
        n = self.cfg.horizon
        m = self.topo.n_robots
        errors = np.asarray(e_k, dtype=float).copy()
        j_per = np.zeros(m)
        j_quad = np.zeros(m)
        for tau in range(n):
            leader = leaders[tau]
            u = self.actions(errors, leader)
            for ci, cls in enumerate(self.classes):
                e_local = errors[cls.nbr].reshape(len(cls.ids), -1)
                qe = np.einsum("rmn,rn->rm", self.q_stack[ci], e_local)
                stage = np.sum(e_local * qe, axis=1)
                ru = np.einsum("rmn,rn->rm", self.r_stack[ci], u[cls.ids])
                stage = stage + np.sum(u[cls.ids] * ru, axis=1)
                j_quad[cls.ids] += stage
                j_per[cls.ids] += stage
            if self.barrier is not None:
                j_per += self.barrier.mu * (
                    self.barrier.state_barrier_values(errors, leader)
                    + self.barrier.control_barrier.value(u))
            errors = self.model.step(errors, u, leader)
        if self.spec.terminal is not None:
            for i in range(m):
                term = errors[i] @ self.spec.terminal[i] @ errors[i]
                j_per[i] += term
                j_quad[i] += term
        return float(j_per.sum()), float(j_quad.sum()), j_per

    # -- serialization / transfer -------------------------------------------

    def export_weights(self) -> dict:
        """Portable bundle: per-robot named weight blocks plus the basis seed."""
        bundle = {"basis_seed": self.basis.seed, "basis_scale": self.basis.scale,
                  "mode": "safe" if self.barrier is not None else "unconstrained",
                  "robots": {}}
        for i in range(self.topo.n_robots):
            w = self.robot_weights(i)
            bundle["robots"][i] = {
                "own_pos": self.topo.own_position(i),
                "n_neighbors": len(self.topo.neighbors[i]),
                **w,
            }
        return bundle


def actor_blocks_by_role(robot_entry: dict, key: str = "wa"):
    """Split a robot's stacked actor weights into (own block, neighbor blocks
    in stored order)."""
    w = robot_entry[key]
    k = robot_entry["n_neighbors"]
    own = robot_entry["own_pos"]
    blocks = [w[STATE_DIM * a:STATE_DIM * (a + 1)] for a in range(k)]
    nbr = [blocks[a] for a in range(k) if a != own]
    return blocks[own], nbr


def replicate_actor(own_block, nbr_blocks, own_pos: int, k: int) -> np.ndarray:
    """Build a (4k, 2) actor weight matrix by block replication: the own block
    at the robot's own slot, neighbor blocks filling the rest in order, the
    last one repeated when the new robot has more neighbors than the source."""
    if k < 1:
        raise ValueError("need at least the self block")
    if not nbr_blocks and k > 1:
        raise ValueError("source robot has no neighbor block to replicate")
    out = np.zeros((STATE_DIM * k, own_block.shape[1]))
    fill = 0
    for slot in range(k):
        block = own_block if slot == own_pos else \
            nbr_blocks[min(fill, len(nbr_blocks) - 1)]
        if slot != own_pos:
            fill += 1
        out[STATE_DIM * slot:STATE_DIM * (slot + 1)] = block
    return out


def deploy_policy(bundle: dict, topo: Topology, source_robot: int = 0):
    """Construct per-robot actor weights on a (possibly different) topology by
    replicating the source robot's trained blocks.

    Returns {robot: {key: weights}} covering every actor block present in the
    bundle; critics are not needed for deployment.
    """
    robots = bundle["robots"]
    src_key = source_robot if source_robot in robots else str(source_robot)
    if src_key not in robots:
        raise KeyError(f"source robot {source_robot} not in weight bundle")
    entry = robots[src_key]
    out = {}
    actor_keys = [k for k in ("wa", "wa2") if k in entry]
    for i in range(topo.n_robots):
        k = len(topo.neighbors[i])
        built = {}
        for key in actor_keys:
            own, nbr = actor_blocks_by_role(entry, key)
            built[key] = replicate_actor(own, nbr, topo.own_position(i), k)
        if "wa3" in entry:
            built["wa3"] = np.array(entry["wa3"], dtype=float).copy()
        out[i] = built
    return out


def load_policy(learner: PolicyLearner, deployed: dict):
    """Install deployed actor blocks into a learner used for pure inference."""
    for i, blocks in deployed.items():
        current = learner.robot_weights(int(i))
        current.update({k: np.asarray(v, dtype=float) for k, v in blocks.items()})
        learner.set_robot_weights(int(i), current)


def stabilizing_warm_start(learner: PolicyLearner, gains, box: float = 0.6,
                           samples: int = 400, seed: int = 1):
    """Initialize the nets at the stabilizing policy instead of random draws.

    The actor's output weights are least-squares fitted so the policy matches
    the certified static gains over an error box, and the critic is fitted to
    the terminal-weight costate; online learning then refines both.  This
    realizes the stabilizing initial policy the learning procedure assumes,
    which matters when the trained blocks are exported for reuse at other
    robot counts.
    """
    rng = np.random.default_rng([seed, 0xA5])
    topo = learner.topo
    for i in range(topo.n_robots):
        k = len(topo.neighbors[i])
        blocks = rng.uniform(-box, box, (samples, k, STATE_DIM))
        flat = blocks.reshape(samples, -1)
        feats_a = learner.basis.actor(blocks)
        target_u = flat @ gains.gains[i].T
        wa, *_ = np.linalg.lstsq(feats_a, target_u, rcond=None)
        w = learner.robot_weights(i)
        w["wa"] = wa
        if learner.spec.terminal is not None:
            amap = learner.critic_maps[learner.cls_of[i]][learner.row_of[i]]
            feats_c = np.tanh(flat @ amap.T)
            own = topo.own_position(i) * STATE_DIM
            lam = np.zeros((samples, flat.shape[1]))
            lam[:, own:own + STATE_DIM] = \
                2.0 * flat[:, own:own + STATE_DIM] @ learner.spec.terminal[i].T
            wc, *_ = np.linalg.lstsq(feats_c, lam, rcond=None)
            w["wc"] = wc
        learner.set_robot_weights(i, w)


def deployed_spectral_radius(bundle: dict, topo: Topology, basis: FeatureBasis,
                             leader, dt: float, source_robot: int = 0) -> float:
    """Spectral radius of the linearized closed loop under the replicated
    policy on the given topology; the export-time stability certificate."""
    from .dynamics import ErrorModel

    model = ErrorModel(topo, dt)
    a_blocks, b_blocks = model.linearize_origin(leader)
    deployed = deploy_policy(bundle, topo, source_robot)
    m = topo.n_robots
    n = m * STATE_DIM
    a_cl = np.zeros((n, n))
    for i in range(m):
        nbrs = topo.neighbors[i]
        gain = np.zeros((2, STATE_DIM * len(nbrs)))
        wa = deployed[i]["wa"]
        for pos in range(len(nbrs)):
            # tanh slope at the origin is the input map itself
            gain[:, STATE_DIM * pos:STATE_DIM * (pos + 1)] = \
                wa[STATE_DIM * pos:STATE_DIM * (pos + 1)].T @ basis.a_actor
        f_i = a_blocks[i] + b_blocks[i] @ gain
        for pos, j in enumerate(nbrs):
            a_cl[STATE_DIM * i:STATE_DIM * (i + 1),
                 STATE_DIM * j:STATE_DIM * (j + 1)] = \
                f_i[:, STATE_DIM * pos:STATE_DIM * (pos + 1)]
    return float(np.max(np.abs(np.linalg.eigvals(a_cl))))
