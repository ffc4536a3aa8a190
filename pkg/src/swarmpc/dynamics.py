"""Robot kinematics, the discrete formation-error model, and its Jacobians.

State conventions: a robot state is q = (p_x, p_y, theta, v); the local
formation error e = (e_x, e_y, e_theta, e_v) lives in the robot's body frame.
The control is u = (omega_ref - omega, accel_ref - accel), so the error model
is exactly input-affine,

    e_i(k+1) = f_i(e_Ni(k)) + g_i(e_i(k)) u_i(k),

with the yaw-rate coupling split so that f carries the leader's yaw rate and
g(e_i) carries the (-e_y, e_x) column induced by the robot's own yaw-rate
deviation.  f_i(0) = 0 and g depends on e_i only.
"""

from dataclasses import dataclass

import numpy as np

from .topology import STATE_DIM, Topology

LAMBDA_POS = np.diag([1.0, 1.0, 0.0, 0.0])
LAMBDA_CON = np.diag([0.0, 0.0, 1.0, 1.0])


def wrap_angle(theta):
    """Wrap to (-pi, pi]; used at state ingestion only."""
    wrapped = np.remainder(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


@dataclass
class RobotState:
    p_x: float
    p_y: float
    theta: float
    v: float

    def __post_init__(self):
        if not np.isfinite([self.p_x, self.p_y, self.theta, self.v]).all():
            raise ValueError("robot state must be finite")
        self.theta = float(wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.p_x, self.p_y, self.theta, self.v])


@dataclass
class LeaderSignal:
    """Reference state plus feedforward (yaw rate, acceleration)."""

    pos: np.ndarray      # (2,)
    theta: float
    v: float
    omega: float = 0.0
    accel: float = 0.0

    def state(self) -> np.ndarray:
        return np.array([self.pos[0], self.pos[1], self.theta, self.v])


def rotation_to_body(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [-s, c]])


def formation_error(states: np.ndarray, leader: LeaderSignal, topo: Topology,
                    i: int) -> np.ndarray:
    """Local formation error of robot i from its neighbors and the leader.

    ``states`` holds all robot states (M, 4); only rows for N_i are read.
    Missing (non-finite) neighbor states are a hard error: the network is
    assumed delay-free.
    """
    states = np.asarray(states, dtype=float)
    qi = states[i]
    for j in topo.neighbors[i]:
        if not np.isfinite(states[j]).all():
            raise ValueError(f"state of neighbor {j} of robot {i} is missing")
    acc = np.zeros(2)
    for j in topo.neighbors[i]:
        if j == i:
            continue
        acc += (states[j, :2] - qi[:2]) + topo.edge_offsets[(j, i)]
    if topo.pinned[i]:
        acc += (leader.pos - qi[:2]) + topo.leader_offsets[i]
    exy = rotation_to_body(qi[2]) @ acc
    return np.array([exy[0], exy[1], leader.theta - qi[2], leader.v - qi[3]])


def formation_error_all(states: np.ndarray, leader: LeaderSignal,
                        topo: Topology) -> np.ndarray:
    return np.stack([formation_error(states, leader, topo, i)
                     for i in range(topo.n_robots)])


def input_matrix(e_i: np.ndarray, dt: float) -> np.ndarray:
    """g(e_i): the (-e_y, e_x) column from the yaw-rate deviation plus dt*I2
    on the (e_theta, e_v) rows."""
    return dt * np.array([
        [-e_i[1], 0.0],
        [e_i[0], 0.0],
        [1.0, 0.0],
        [0.0, 1.0],
    ])


def step_error_single(e_nbr: np.ndarray, u: np.ndarray, leader: LeaderSignal,
                      topo: Topology, i: int, dt: float) -> np.ndarray:
    """One Euler step of robot i's error model, f(e_Ni) + g(e_i) u.

    ``e_nbr`` is the stacked neighborhood error in topology order.  Neighbor
    headings and speeds enter through the exact error-coordinate identities
    theta_j - theta_i = e_theta_i - e_theta_j and v_j = v_r - e_v_j.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    nbrs = topo.neighbors[i]
    e_nbr = np.asarray(e_nbr, dtype=float).reshape(len(nbrs), STATE_DIM)
    own = nbrs.index(i)
    e = e_nbr[own]
    d = len(nbrs) - 1
    s = topo.pinned[i]
    v_i = leader.v - e[3]

    fx = leader.omega * e[1] - (d + s) * v_i
    fy = -leader.omega * e[0]
    for pos, j in enumerate(nbrs):
        if j == i:
            continue
        dth = e[2] - e_nbr[pos, 2]
        vj = leader.v - e_nbr[pos, 3]
        fx += vj * np.cos(dth)
        fy += vj * np.sin(dth)
    if s:
        fx += s * leader.v * np.cos(e[2])
        fy += s * leader.v * np.sin(e[2])

    f = np.array([e[0] + dt * fx, e[1] + dt * fy, e[2], e[3]])
    return f + input_matrix(e, dt) @ np.asarray(u, dtype=float)


def jacobians(errors: np.ndarray, leader: LeaderSignal, topo: Topology, i: int,
              dt: float):
    """Analytic Jacobian blocks feeding robot i's learning targets.

    Returns ``(blocks, g_i)`` where ``blocks[j]`` is d f_j / d e_Ni for every
    j in both N_i and its reverse list (the robots whose one-step cost robot
    i's coordinates influence), shaped (4, 4*|N_i|).  ``errors`` holds all
    robots' current errors because f_j's own-block derivative sums over all
    of j's neighbors.
    """
    errors = np.asarray(errors, dtype=float)
    nbrs = topo.neighbors[i]
    n_local = STATE_DIM * len(nbrs)
    blocks = {}
    for j in nbrs:
        if i not in topo.neighbors[j]:
            continue  # no lambda block exists for j outside the reverse list
        jac = np.zeros((STATE_DIM, n_local))
        for pos, l in enumerate(nbrs):
            if l in topo.neighbors[j]:
                jac[:, pos * STATE_DIM:(pos + 1) * STATE_DIM] = \
                    _edge_jacobian(errors, leader, topo, j, l, dt)
        blocks[j] = jac
    g_i = input_matrix(errors[i], dt)
    return blocks, g_i


def _edge_jacobian(errors, leader, topo, j, l, dt):
    """d f_j / d e_l, zero pattern included (rows e_theta/e_v are integrators)."""
    e_j = errors[j]
    block = np.zeros((STATE_DIM, STATE_DIM))
    if l == j:
        d = topo.nonself_degree(j)
        s = topo.pinned[j]
        sum_sin = 0.0
        sum_cos = 0.0
        for m in topo.neighbors[j]:
            if m == j:
                continue
            dth = e_j[2] - errors[m, 2]
            vm = leader.v - errors[m, 3]
            sum_sin += vm * np.sin(dth)
            sum_cos += vm * np.cos(dth)
        block[0, 0] = 1.0
        block[0, 1] = dt * leader.omega
        block[0, 2] = -dt * (sum_sin + s * leader.v * np.sin(e_j[2]))
        block[0, 3] = dt * (d + s)
        block[1, 0] = -dt * leader.omega
        block[1, 1] = 1.0
        block[1, 2] = dt * (sum_cos + s * leader.v * np.cos(e_j[2]))
        block[2, 2] = 1.0
        block[3, 3] = 1.0
    else:
        dth = e_j[2] - errors[l, 2]
        vl = leader.v - errors[l, 3]
        block[0, 2] = dt * vl * np.sin(dth)
        block[0, 3] = -dt * np.cos(dth)
        block[1, 2] = -dt * vl * np.cos(dth)
        block[1, 3] = -dt * np.sin(dth)
    return block


class ErrorModel:
    """Vectorized formation-error dynamics over all robots.

    Precomputes flat directed-edge index arrays so that stepping, Jacobian
    assembly, and the learning-side block buffers all run as batched numpy
    operations; per-robot cost is constant at fixed neighbor degree.
    """

    def __init__(self, topo: Topology, dt: float = 0.05):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.topo = topo
        self.dt = dt
        m = topo.n_robots
        src, dst = [], []
        for i in range(m):
            for j in topo.neighbors[i]:
                if j != i:
                    src.append(j)
                    dst.append(i)
        self.edge_src = np.array(src, dtype=int)
        self.edge_dst = np.array(dst, dtype=int)
        self.n_edges = len(src)
        self.deg = np.array([topo.nonself_degree(i) for i in range(m)], dtype=float)
        self.pin = topo.pinned.astype(float)

    # -- model ------------------------------------------------------------

    def drift(self, errors: np.ndarray, leader: LeaderSignal) -> np.ndarray:
        """f(e) for all robots, (M, 4)."""
        e = np.asarray(errors, dtype=float)
        m = self.topo.n_robots
        dt = self.dt
        dth = e[self.edge_dst, 2] - e[self.edge_src, 2]
        v_src = leader.v - e[self.edge_src, 3]
        sum_cos = np.bincount(self.edge_dst, weights=v_src * np.cos(dth), minlength=m)
        sum_sin = np.bincount(self.edge_dst, weights=v_src * np.sin(dth), minlength=m)
        v_own = leader.v - e[:, 3]
        fx = leader.omega * e[:, 1] - (self.deg + self.pin) * v_own + sum_cos \
            + self.pin * leader.v * np.cos(e[:, 2])
        fy = -leader.omega * e[:, 0] + sum_sin + self.pin * leader.v * np.sin(e[:, 2])
        out = e.copy()
        out[:, 0] += dt * fx
        out[:, 1] += dt * fy
        return out

    def input_matrices(self, errors: np.ndarray) -> np.ndarray:
        """g(e_i) stacked, (M, 4, 2)."""
        e = np.asarray(errors, dtype=float)
        g = np.zeros((e.shape[0], STATE_DIM, 2))
        g[:, 0, 0] = -e[:, 1]
        g[:, 1, 0] = e[:, 0]
        g[:, 2, 0] = 1.0
        g[:, 3, 1] = 1.0
        return self.dt * g

    def step(self, errors: np.ndarray, controls: np.ndarray,
             leader: LeaderSignal) -> np.ndarray:
        u = np.asarray(controls, dtype=float)
        out = self.drift(errors, leader)
        e = np.asarray(errors, dtype=float)
        out[:, 0] += self.dt * (-e[:, 1] * u[:, 0])
        out[:, 1] += self.dt * (e[:, 0] * u[:, 0])
        out[:, 2] += self.dt * u[:, 0]
        out[:, 3] += self.dt * u[:, 1]
        return out

    # -- Jacobians ---------------------------------------------------------

    def jacobian_blocks(self, errors: np.ndarray, leader: LeaderSignal):
        """All drift Jacobian blocks: own (M,4,4) and per-edge (E,4,4).

        Edge block k is d f_dst / d e_src for the k-th directed edge.
        """
        e = np.asarray(errors, dtype=float)
        m = self.topo.n_robots
        dt = self.dt
        dth = e[self.edge_dst, 2] - e[self.edge_src, 2]
        v_src = leader.v - e[self.edge_src, 3]
        sin_d, cos_d = np.sin(dth), np.cos(dth)

        own = np.zeros((m, STATE_DIM, STATE_DIM))
        own[:, 0, 0] = 1.0
        own[:, 1, 1] = 1.0
        own[:, 2, 2] = 1.0
        own[:, 3, 3] = 1.0
        own[:, 0, 1] = dt * leader.omega
        own[:, 1, 0] = -dt * leader.omega
        sum_sin = np.bincount(self.edge_dst, weights=v_src * sin_d, minlength=m)
        sum_cos = np.bincount(self.edge_dst, weights=v_src * cos_d, minlength=m)
        own[:, 0, 2] = -dt * (sum_sin + self.pin * leader.v * np.sin(e[:, 2]))
        own[:, 0, 3] = dt * (self.deg + self.pin)
        own[:, 1, 2] = dt * (sum_cos + self.pin * leader.v * np.cos(e[:, 2]))

        edge = np.zeros((self.n_edges, STATE_DIM, STATE_DIM))
        edge[:, 0, 2] = dt * v_src * sin_d
        edge[:, 0, 3] = -dt * cos_d
        edge[:, 1, 2] = -dt * v_src * cos_d
        edge[:, 1, 3] = -dt * sin_d
        return own, edge

    def step_jacobians(self, errors, controls, leader):
        """Full one-step Jacobians (drift + control coupling) for the adjoint.

        Returns (own, edge, g) where own includes d(g(e_i)u_i)/de_i.
        """
        own, edge = self.jacobian_blocks(errors, leader)
        u = np.asarray(controls, dtype=float)
        own = own.copy()
        own[:, 0, 1] += -self.dt * u[:, 0]
        own[:, 1, 0] += self.dt * u[:, 0]
        return own, edge, self.input_matrices(errors)

    def linearize_origin(self, leader_nominal: LeaderSignal):
        """(A_Ni, B_i) per robot at e = 0 under a constant-speed leader."""
        e0 = np.zeros((self.topo.n_robots, STATE_DIM))
        own, edge = self.jacobian_blocks(e0, leader_nominal)
        a_blocks = []
        for i in range(self.topo.n_robots):
            nbrs = self.topo.neighbors[i]
            a = np.zeros((STATE_DIM, STATE_DIM * len(nbrs)))
            for pos, j in enumerate(nbrs):
                if j == i:
                    a[:, pos * STATE_DIM:(pos + 1) * STATE_DIM] = own[i]
                else:
                    k = self._edge_index(j, i)
                    a[:, pos * STATE_DIM:(pos + 1) * STATE_DIM] = edge[k]
            a_blocks.append(a)
        b = self.input_matrices(e0)
        return a_blocks, [b[i] for i in range(self.topo.n_robots)]

    def _edge_index(self, src, dst):
        hits = np.flatnonzero((self.edge_src == src) & (self.edge_dst == dst))
        return int(hits[0])


# -- physical-state side ----------------------------------------------------

def positions_from_errors(errors: np.ndarray, leader: LeaderSignal,
                          topo: Topology, solver=None) -> np.ndarray:
    """Exact joint recovery of robot positions from stacked errors.

    Headings and speeds follow directly (theta_i = theta_r - e_theta_i,
    v_i = v_r - e_v_i); the planar coordinates solve the grounded-Laplacian
    system implied by the error definition.
    """
    e = np.asarray(errors, dtype=float)
    m = topo.n_robots
    theta = leader.theta - e[:, 2]
    rhs = np.zeros((m, 2))
    for i in range(m):
        body = rotation_to_body(theta[i]).T @ e[i, :2]
        acc = body.copy()
        for j in topo.neighbors[i]:
            if j != i:
                acc -= topo.edge_offsets[(j, i)]
        if topo.pinned[i]:
            acc -= topo.leader_offsets[i] + leader.pos
        rhs[i] = -acc
    if solver is None:
        solver = topo.laplacian_solver()
    px = solver(rhs[:, 0])
    py = solver(rhs[:, 1])
    return np.column_stack([px, py])


def states_from_errors(errors, leader, topo, solver=None) -> np.ndarray:
    e = np.asarray(errors, dtype=float)
    pos = positions_from_errors(e, leader, topo, solver)
    theta = leader.theta - e[:, 2]
    v = leader.v - e[:, 3]
    return np.column_stack([pos, theta, v])
