import numpy as np
import pytest

from swarmpc.topology import (
    TopologyError,
    build_topology,
    chain_adjacency,
    circle_slots,
    grid_slots,
    line_slots,
    ring_adjacency,
    shape_topology,
)


def fig_example_graph():
    """Six-robot directed graph whose first robot has neighbors {0,1,4} and
    reverse list {0,5} (0-based)."""
    c = np.eye(6)
    c[0, 1] = c[0, 4] = 1
    c[5, 0] = 1
    c[4, 5] = 1
    c[1, 4] = 1
    c[2, 1] = 1
    c[3, 2] = 1
    return c


def test_six_robot_neighbor_and_reverse_lists():
    topo = build_topology(fig_example_graph(), pinned=[0])
    assert topo.neighbors[0] == (0, 1, 4)
    assert topo.reverse_neighbors[0] == (0, 5)


def test_single_pinned_robot_self_loop_only():
    topo = build_topology(np.eye(1), pinned=[0])
    assert topo.neighbors[0] == (0,)
    assert topo.reverse_neighbors[0] == (0,)


def test_ring_reverse_lists_match_adjacency_transpose():
    m = 4
    c = np.eye(m)
    for i in range(m):
        c[i, (i - 1) % m] = 1  # each robot listens to its predecessor
    topo = build_topology(c, pinned=[0])
    # brute-force scan over all ordered pairs
    for i in range(m):
        for j in range(m):
            in_reverse = i in topo.reverse_neighbors[j]
            assert in_reverse == bool(c[i, j])


def test_edge_count_conservation():
    rng = np.random.default_rng(7)
    for _ in range(20):
        m = int(rng.integers(2, 9))
        c = np.eye(m)
        c[1:, 0] = 1  # keep everyone anchored through robot 0
        extra = rng.random((m, m)) < 0.3
        c = np.clip(c + extra, 0, 1)
        topo = build_topology(c, pinned=[0])
        fwd = sum(len(n) for n in topo.neighbors)
        rev = sum(len(n) for n in topo.reverse_neighbors)
        assert fwd == rev


def test_selector_gather_scatter_roundtrip():
    topo = build_topology(fig_example_graph(), pinned=[0])
    rng = np.random.default_rng(3)
    stacked = rng.standard_normal(6 * 4)
    for i in range(6):
        local = topo.selectors.local(stacked, i)
        back = topo.selectors.scatter(local, i, stacked.size)
        # bitwise identical on selected coordinates
        assert np.array_equal(back[topo.selectors.gather[i]],
                              stacked[topo.selectors.gather[i]])
        assert local.size == 4 * len(topo.neighbors[i])


def test_unanchored_component_rejected():
    c = np.eye(4)
    c[0, 1] = c[1, 0] = 1  # robots 2, 3 never hear from the pinned pair
    with pytest.raises(TopologyError):
        build_topology(c, pinned=[0])


def test_no_pinning_rejected():
    with pytest.raises(TopologyError):
        build_topology(np.eye(3), pinned=[])


def test_diagonal_forced_to_one():
    c = np.zeros((2, 2))
    c[0, 1] = c[1, 0] = 1
    topo = build_topology(c, pinned=[0])
    assert all(i in topo.neighbors[i] for i in range(2))


def test_grid_slot_spacings():
    slots = grid_slots(4, 4, row_spacing=1.0, col_spacing=2.0)
    for r in range(4):
        for c in range(3):
            a, b = r * 4 + c, r * 4 + c + 1
            assert np.linalg.norm(slots[a] - slots[b]) == pytest.approx(2.0)
    for c in range(4):
        for r in range(3):
            a, b = r * 4 + c, (r + 1) * 4 + c
            assert np.linalg.norm(slots[a] - slots[b]) == pytest.approx(1.0)


def test_single_robot_offsets_zero():
    topo = build_topology(np.eye(1), pinned=[0], leader_offsets=line_slots(1) * 0)
    assert np.allclose(topo.leader_offsets, 0)
    assert np.allclose(topo.edge_offsets[(0, 0)], 0)


def test_circle_slots_on_radius():
    slots = circle_slots(8, radius=3.0)
    assert np.allclose(np.linalg.norm(slots, axis=1), 3.0)


def test_shape_topology_validation():
    with pytest.raises(TopologyError):
        shape_topology("grid", 10, rows=4, cols=4)
    with pytest.raises(TopologyError):
        shape_topology("nonsense", 4)


def test_edge_offsets_consistent_around_cycles():
    topo = shape_topology("circle", 6, radius=2.0)
    # walking the ring accumulates to zero displacement
    total = np.zeros(2)
    for i in range(6):
        j = (i + 1) % 6
        total += topo.edge_offsets[(i, j)]
    assert np.allclose(total, 0, atol=1e-12)
