"""Communication graph, neighbor index algebra, pinning, and formation offsets.

Conventions used throughout the package:

* robots are indexed 0..M-1; adjacency ``c[i, j] = 1`` means robot i receives
  robot j's state (j is a neighbor of i); the diagonal is always 1,
* neighbor lists are stored sorted by robot index and every per-neighbor
  stacking (error vectors, weight blocks) follows that order,
* formation slots are planar displacements from the (virtual) leader; the
  directed edge offset from neighbor j to robot i is ``slot_i - slot_j`` so
  that the error of a robot sitting exactly on its slot vanishes.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

STATE_DIM = 4
INPUT_DIM = 2


class TopologyError(ValueError):
    """Raised for graphs that cannot support a stabilizing policy."""


@dataclass(frozen=True)
class Selectors:
    """Index maps realizing the gather/scatter between stacked and local states.

    ``gather[i]`` holds the flat indices of robot i's neighborhood coordinates
    inside the stacked state vector (M * STATE_DIM entries), so
    ``e_local = e_stacked[gather[i]]``.
    """

    gather: tuple
    own_pos: tuple

    def local(self, stacked: np.ndarray, i: int) -> np.ndarray:
        return stacked[self.gather[i]]

    def scatter(self, local: np.ndarray, i: int, size: int) -> np.ndarray:
        out = np.zeros(size)
        out[self.gather[i]] = local
        return out


@dataclass(frozen=True)
class Topology:
    """Directed neighbor graph with pinning gains and formation offsets.

    Immutable after construction and safe to share across per-robot workers.
    """

    n_robots: int
    adjacency: np.ndarray          # (M, M) 0/1, diagonal forced to 1
    pinned: np.ndarray             # (M,) 0/1 leader-reference indicator
    neighbors: tuple               # per robot: sorted tuple incl. self
    reverse_neighbors: tuple       # robots that list i among their neighbors
    leader_offsets: np.ndarray     # (M, 2) slot displacement from the leader
    edge_offsets: dict             # (j, i) -> slot_i - slot_j for j in N_i
    selectors: Selectors

    def __post_init__(self):
        self.adjacency.setflags(write=False)
        self.pinned.setflags(write=False)
        self.leader_offsets.setflags(write=False)

    @property
    def degrees(self) -> np.ndarray:
        """Neighbor counts |N_i| including the self loop."""
        return np.array([len(n) for n in self.neighbors])

    def own_position(self, i: int) -> int:
        """Position of robot i inside its own sorted neighbor list."""
        return self.selectors.own_pos[i]

    def nonself_degree(self, i: int) -> int:
        return len(self.neighbors[i]) - 1

    def grounded_laplacian(self) -> sp.csc_matrix:
        """(D + S - C_off) matrix used to recover positions from errors.

        Nonsingular whenever every robot is anchored to a pinned component,
        which build_topology guarantees.
        """
        m = self.n_robots
        d = self.adjacency.sum(axis=1) - 1.0
        lap = sp.lil_matrix((m, m))
        for i in range(m):
            lap[i, i] = d[i] + self.pinned[i]
            for j in self.neighbors[i]:
                if j != i:
                    lap[i, j] = -1.0
        return lap.tocsc()

    def laplacian_solver(self):
        return spla.factorized(self.grounded_laplacian())


def build_topology(adjacency, pinned, leader_offsets=None, edge_offsets=None) -> Topology:
    """Validate a graph description and assemble the immutable Topology.

    Offsets may be supplied either as per-robot slot displacements from the
    leader (preferred; edge offsets are derived as slot differences, which
    keeps them consistent around graph cycles) or as an explicit per-edge
    table {(j, i): offset} together with per-robot leader offsets.
    """
    c = np.asarray(adjacency, dtype=float).copy()
    m = c.shape[0]
    if c.shape != (m, m):
        raise TopologyError(f"adjacency must be square, got {c.shape}")
    if not np.isin(c, (0.0, 1.0)).all():
        raise TopologyError("adjacency entries must be 0 or 1")
    np.fill_diagonal(c, 1.0)  # self loop is mandatory

    s = np.zeros(m)
    s[np.asarray(pinned, dtype=int)] = 1.0
    if s.sum() < 1:
        raise TopologyError("at least one robot must be pinned to the leader")

    neighbors = tuple(tuple(np.flatnonzero(c[i]).tolist()) for i in range(m))
    reverse = tuple(tuple(np.flatnonzero(c[:, j]).tolist()) for j in range(m))
    for i in range(m):
        if len(neighbors[i]) == 0:
            raise TopologyError(f"robot {i} has no neighbors")

    # Every robot must be reachable from a pinned robot along information flow,
    # otherwise no stabilizing policy exists and the position recovery map is
    # singular.
    anchored = s.astype(bool).copy()
    changed = True
    while changed:
        changed = False
        for i in range(m):
            if not anchored[i] and any(anchored[j] for j in neighbors[i] if j != i):
                anchored[i] = True
                changed = True
    if not anchored.all():
        bad = np.flatnonzero(~anchored).tolist()
        raise TopologyError(f"robots {bad} are not reachable from any pinned robot")

    if leader_offsets is None:
        leader_offsets = np.zeros((m, 2))
    slots = np.asarray(leader_offsets, dtype=float).reshape(m, 2)

    edges = {}
    for i in range(m):
        for j in neighbors[i]:
            if edge_offsets is not None and (j, i) in edge_offsets:
                edges[(j, i)] = np.asarray(edge_offsets[(j, i)], dtype=float)
            else:
                edges[(j, i)] = slots[i] - slots[j]

    gather = []
    own_pos = []
    for i in range(m):
        idx = np.concatenate([np.arange(j * STATE_DIM, (j + 1) * STATE_DIM)
                              for j in neighbors[i]])
        gather.append(idx)
        own_pos.append(neighbors[i].index(i))
    selectors = Selectors(gather=tuple(gather), own_pos=tuple(own_pos))

    return Topology(
        n_robots=m,
        adjacency=c,
        pinned=s,
        neighbors=neighbors,
        reverse_neighbors=reverse,
        leader_offsets=slots,
        edge_offsets=edges,
        selectors=selectors,
    )


def line_slots(m: int, spacing: float = 1.0) -> np.ndarray:
    """Slots trailing the leader along -x at the given spacing."""
    if m < 1 or spacing <= 0:
        raise TopologyError("need m >= 1 and spacing > 0")
    slots = np.zeros((m, 2))
    slots[:, 0] = -spacing * np.arange(1, m + 1)
    return slots


def circle_slots(m: int, radius: float) -> np.ndarray:
    """Slots evenly spaced on a circle centered on the leader."""
    if m < 1 or radius <= 0:
        raise TopologyError("need m >= 1 and radius > 0")
    ang = 2.0 * np.pi * np.arange(m) / m
    return np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])


def grid_slots(rows: int, cols: int, row_spacing: float, col_spacing: float,
               lateral_shift: float = 0.0) -> np.ndarray:
    """Rectangular formation slots behind the leader.

    Robots in the same row are row_spacing apart along the travel direction,
    robots in the same column are col_spacing apart laterally.  The grid is
    centered laterally on the leader plus an optional shift.
    """
    if rows < 1 or cols < 1 or row_spacing <= 0 or col_spacing <= 0:
        raise TopologyError("grid needs positive dimensions and spacings")
    slots = np.zeros((rows * cols, 2))
    y0 = col_spacing * (cols - 1) / 2.0 + lateral_shift
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            slots[k, 0] = -row_spacing * (r + 1)
            slots[k, 1] = y0 - col_spacing * c
    return slots


def chain_adjacency(m: int) -> np.ndarray:
    """Symmetric chain: robot i talks to i-1 and i+1."""
    c = np.eye(m)
    for i in range(m - 1):
        c[i, i + 1] = 1.0
        c[i + 1, i] = 1.0
    return c


def ring_adjacency(m: int) -> np.ndarray:
    c = chain_adjacency(m)
    if m > 2:
        c[0, m - 1] = 1.0
        c[m - 1, 0] = 1.0
    return c


def grid_chain_adjacency(rows: int, cols: int) -> np.ndarray:
    """Chain through the grid in slot order (bounded degree, leader-anchored)."""
    return chain_adjacency(rows * cols)


def shape_topology(kind: str, m: int, **kw) -> Topology:
    """Convenience constructor for the built-in formation shapes."""
    if kind == "line":
        slots = line_slots(m, kw.get("spacing", 1.0))
        adj = chain_adjacency(m)
    elif kind == "circle":
        slots = circle_slots(m, kw.get("radius", m * kw.get("spacing", 1.0) / (2 * np.pi)))
        adj = ring_adjacency(m)
    elif kind == "grid":
        rows = kw.get("rows")
        cols = kw.get("cols")
        if rows is None or cols is None:
            raise TopologyError("grid shape needs rows and cols")
        if rows * cols != m:
            raise TopologyError(f"grid {rows}x{cols} does not hold {m} robots")
        slots = grid_slots(rows, cols, kw.get("row_spacing", 1.0),
                           kw.get("col_spacing", 2.0), kw.get("lateral_shift", 0.0))
        adj = grid_chain_adjacency(rows, cols)
    else:
        raise TopologyError(f"unknown shape kind {kind!r}")
    return build_topology(adj, pinned=[0], leader_offsets=slots)
