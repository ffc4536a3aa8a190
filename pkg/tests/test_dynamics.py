import numpy as np
import pytest

from swarmpc.dynamics import (
    ErrorModel,
    LeaderSignal,
    RobotState,
    formation_error,
    formation_error_all,
    input_matrix,
    jacobians,
    positions_from_errors,
    states_from_errors,
    step_error_single,
    wrap_angle,
)
from swarmpc.topology import build_topology, chain_adjacency, line_slots, shape_topology

DT = 0.05


def two_robot_topo():
    return build_topology(chain_adjacency(2), pinned=[0],
                          leader_offsets=line_slots(2, 1.0))


def make_leader(v=1.0, omega=0.0, pos=(0.0, 0.0), theta=0.0, accel=0.0):
    return LeaderSignal(pos=np.array(pos, dtype=float), theta=theta, v=v,
                        omega=omega, accel=accel)


# ---------------------------------------------------------------------------
# scalar transcription of the four error-update lines, written directly from
# the physical quantities (robot speeds / headings / yaw rates).  Independent
# of the vectorized model: kept in plain floats on purpose.
# ---------------------------------------------------------------------------

def scalar_error_step(e_nbr, u, leader, topo, i, dt):
    nbrs = topo.neighbors[i]
    e_nbr = np.asarray(e_nbr, dtype=float).reshape(len(nbrs), 4)
    own = nbrs.index(i)
    ex, ey, eth, ev = (float(x) for x in e_nbr[own])
    d = len(nbrs) - 1
    s = float(topo.pinned[i])

    # physical quantities recovered from the error coordinates
    v_i = leader.v - ev
    omega_i = leader.omega - float(u[0])        # u1 = omega_r - omega_i
    a_term = float(u[1])                        # u2 = a_r - a_i

    fx = omega_i * ey - (d + s) * v_i
    fy = -omega_i * ex
    for pos, j in enumerate(nbrs):
        if j == i:
            continue
        theta_ji = eth - float(e_nbr[pos, 2])   # theta_j - theta_i
        v_j = leader.v - float(e_nbr[pos, 3])
        fx += v_j * np.cos(theta_ji)
        fy += v_j * np.sin(theta_ji)
    theta_ri = eth
    fx += s * leader.v * np.cos(theta_ri)
    fy += s * leader.v * np.sin(theta_ri)

    return np.array([
        ex + dt * fx,
        ey + dt * fy,
        eth + dt * (leader.omega - omega_i),
        ev + dt * a_term,
    ])


def test_zero_error_zero_input_is_fixed_point():
    topo = two_robot_topo()
    leader = make_leader(v=1.3, omega=0.2)
    model = ErrorModel(topo, DT)
    e = np.zeros((2, 4))
    u = np.zeros((2, 2))
    assert np.allclose(model.step(e, u, leader), 0.0, atol=0.0)
    e_nbr = np.zeros(8)
    assert np.allclose(step_error_single(e_nbr, np.zeros(2), leader, topo, 0, DT), 0.0)


def test_step_matches_scalar_transcription():
    topo = two_robot_topo()
    model = ErrorModel(topo, DT)
    rng = np.random.default_rng(11)
    for _ in range(200):
        e = rng.uniform(-2, 2, (2, 4))
        u = rng.uniform(-3, 3, (2, 2))
        leader = make_leader(v=rng.uniform(0, 2), omega=rng.uniform(-1, 1))
        stepped = model.step(e, u, leader)
        for i in range(2):
            e_nbr = e[list(topo.neighbors[i])].ravel()
            ref = scalar_error_step(e_nbr, u[i], leader, topo, i, DT)
            mine = step_error_single(e_nbr, u[i], leader, topo, i, DT)
            assert np.max(np.abs(mine - ref)) <= 1e-12
            assert np.max(np.abs(stepped[i] - ref)) <= 1e-12


def test_input_matrix_structure():
    # theta/v rows take the control with dt*I2; the planar rows vanish at the
    # origin, which fixes the linearized B matrix.
    g0 = input_matrix(np.zeros(4), DT)
    expected = DT * np.array([[0, 0], [0, 0], [1, 0], [0, 1]], dtype=float)
    assert np.array_equal(g0, expected)
    g = input_matrix(np.array([0.5, -0.2, 0.1, 0.3]), DT)
    assert g[0, 0] == pytest.approx(DT * 0.2)
    assert g[1, 0] == pytest.approx(DT * 0.5)
    assert np.all(g[:, 1] == expected[:, 1])


def test_input_affinity_exact():
    topo = two_robot_topo()
    model = ErrorModel(topo, DT)
    rng = np.random.default_rng(5)
    leader = make_leader(v=1.0, omega=0.4)
    e = rng.uniform(-1, 1, (2, 4))
    u1 = rng.uniform(-2, 2, (2, 2))
    u2 = rng.uniform(-2, 2, (2, 2))
    for alpha in (0.0, 0.3, 1.0, -0.7):
        mix = model.step(e, alpha * u1 + (1 - alpha) * u2, leader)
        ref = alpha * model.step(e, u1, leader) + (1 - alpha) * model.step(e, u2, leader)
        assert np.allclose(mix, ref, atol=1e-12)


def test_formation_error_zero_on_slots():
    topo = build_topology(chain_adjacency(4), pinned=[0],
                          leader_offsets=line_slots(4, 1.0))
    leader = make_leader(v=0.8, pos=(3.0, -1.0), theta=0.3)
    states = np.zeros((4, 4))
    for i in range(4):
        states[i, :2] = leader.pos + topo.leader_offsets[i]
        states[i, 2] = leader.theta
        states[i, 3] = leader.v
    err = formation_error_all(states, leader, topo)
    assert np.allclose(err, 0.0, atol=1e-12)


def test_pinned_robot_displaced_along_x():
    topo = build_topology(np.eye(1), pinned=[0],
                          leader_offsets=np.array([[-1.0, 0.0]]))
    leader = make_leader(v=1.0, pos=(0.0, 0.0), theta=0.0)
    state = np.array([[0.0, 0.0, 0.0, 1.0]])  # 1 m beyond its slot at (-1, 0)
    e = formation_error(state, leader, topo, 0)
    assert e[0] == pytest.approx(-1.0)
    assert np.allclose(e[1:], 0.0)


def test_missing_neighbor_state_is_hard_error():
    topo = two_robot_topo()
    leader = make_leader()
    states = np.zeros((2, 4))
    states[1, 0] = np.nan
    with pytest.raises(ValueError):
        formation_error(states, leader, topo, 0)


def test_jacobians_match_finite_differences():
    topo = build_topology(chain_adjacency(3), pinned=[0],
                          leader_offsets=line_slots(3, 1.0))
    model = ErrorModel(topo, DT)
    rng = np.random.default_rng(17)
    h = 1e-6
    for _ in range(40):
        e = rng.uniform(-1.5, 1.5, (3, 4))
        leader = make_leader(v=rng.uniform(0.2, 1.5), omega=rng.uniform(-0.5, 0.5))
        for i in range(3):
            blocks, g_i = jacobians(e, leader, topo, i, DT)
            nbrs = topo.neighbors[i]
            for j, jac in blocks.items():
                # central differences over every coordinate robot i sees
                for pos, l in enumerate(nbrs):
                    for c in range(4):
                        ep = e.copy()
                        em = e.copy()
                        ep[l, c] += h
                        em[l, c] -= h
                        fp = model.drift(ep, leader)[j]
                        fm = model.drift(em, leader)[j]
                        fd = (fp - fm) / (2 * h)
                        ana = jac[:, pos * 4 + c]
                        denom = max(1.0, np.max(np.abs(fd)))
                        assert np.max(np.abs(fd - ana)) / denom <= 1e-5


def test_integrator_rows_at_origin():
    topo = two_robot_topo()
    leader = make_leader(v=1.0)
    e = np.zeros((2, 4))
    blocks, _ = jacobians(e, leader, topo, 0, DT)
    own = blocks[0][:, 0:4]
    assert own[2, 2] == pytest.approx(1.0)
    assert own[3, 3] == pytest.approx(1.0)


def test_control_coupling_independent_of_neighbors():
    # g multiplies only robot i's own error; perturbing a neighbor leaves the
    # control contribution untouched.
    topo = two_robot_topo()
    model = ErrorModel(topo, DT)
    leader = make_leader(v=1.0)
    rng = np.random.default_rng(2)
    e = rng.uniform(-1, 1, (2, 4))
    u = rng.uniform(-1, 1, (2, 2))
    contrib = model.step(e, u, leader) - model.drift(e, leader)
    e2 = e.copy()
    e2[1] += rng.uniform(-1, 1, 4)
    contrib2 = model.step(e2, u, leader) - model.drift(e2, leader)
    assert np.allclose(contrib[0], contrib2[0], atol=1e-14)


def test_linearize_origin_matches_jacobians():
    topo = build_topology(chain_adjacency(3), pinned=[0],
                          leader_offsets=line_slots(3, 1.0))
    model = ErrorModel(topo, DT)
    leader = make_leader(v=1.0)
    a_blocks, b_blocks = model.linearize_origin(leader)
    e0 = np.zeros((3, 4))
    for i in range(3):
        blocks, g = jacobians(e0, leader, topo, i, DT)
        # stack d f_i / d e_Ni from the per-pair blocks
        assert np.allclose(a_blocks[i], blocks[i], atol=1e-14)
        assert np.array_equal(b_blocks[i],
                              DT * np.array([[0, 0], [0, 0], [1, 0], [0, 1.0]]))


def test_positions_roundtrip():
    topo = build_topology(chain_adjacency(5), pinned=[0],
                          leader_offsets=line_slots(5, 1.0))
    leader = make_leader(v=1.0, pos=(2.0, 1.0), theta=0.2)
    rng = np.random.default_rng(23)
    states = np.zeros((5, 4))
    for i in range(5):
        states[i, :2] = leader.pos + topo.leader_offsets[i] + rng.uniform(-0.5, 0.5, 2)
        states[i, 2] = leader.theta + rng.uniform(-0.3, 0.3)
        states[i, 3] = leader.v + rng.uniform(-0.2, 0.2)
    errors = formation_error_all(states, leader, topo)
    recovered = states_from_errors(errors, leader, topo)
    assert np.allclose(recovered, states, atol=1e-9)


def test_robot_state_wraps_theta():
    st = RobotState(0.0, 0.0, 4.0, 1.0)
    assert -np.pi < st.theta <= np.pi
    with pytest.raises(ValueError):
        RobotState(np.nan, 0.0, 0.0, 0.0)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)
