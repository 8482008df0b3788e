"""Choice problem: shortest paths on directed acyclic graphs.

The default instance is a monotone grid lattice (every edge goes one step
right or one step down).  Edges are numbered per node in row-major order,
right edge before down edge, so the ordering is a pure function of the grid
shape.

Paths are represented as binary indicator vectors over the edge list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

# relative tolerance used to detect tied path lengths
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class OdSpec:
    origin: int
    destination: int

    def __post_init__(self):
        if self.origin == self.destination:
            raise ValueError("origin and destination must differ")


@dataclass(frozen=True, eq=False)
class DiGraph:
    """Directed acyclic graph with an ordered edge list."""

    n_nodes: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(t), int(h)) for t, h in self.edges))
        for t, h in self.edges:
            if not (0 <= t < self.n_nodes and 0 <= h < self.n_nodes) or t == h:
                raise ValueError(f"invalid edge ({t}, {h})")
        self.topo_order  # raises on cycles

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def tails(self) -> np.ndarray:
        return np.array([t for t, _ in self.edges], dtype=np.int64)

    @cached_property
    def heads(self) -> np.ndarray:
        return np.array([h for _, h in self.edges], dtype=np.int64)

    @cached_property
    def in_edges(self) -> list[np.ndarray]:
        incoming = [[] for _ in range(self.n_nodes)]
        for e, (_, h) in enumerate(self.edges):
            incoming[h].append(e)
        return [np.array(es, dtype=np.int64) for es in incoming]

    @cached_property
    def out_edges(self) -> list[np.ndarray]:
        outgoing = [[] for _ in range(self.n_nodes)]
        for e, (t, _) in enumerate(self.edges):
            outgoing[t].append(e)
        return [np.array(es, dtype=np.int64) for es in outgoing]

    @cached_property
    def padded_in_edges(self) -> np.ndarray:
        """(n_nodes, max_in_degree) incoming edge ids, padded with -1."""
        width = max(1, max(len(es) for es in self.in_edges))
        out = np.full((self.n_nodes, width), -1, dtype=np.int64)
        for v, es in enumerate(self.in_edges):
            out[v, : len(es)] = es
        return out

    @cached_property
    def incidence(self) -> np.ndarray:
        """(n_nodes, n_edges) matrix: +1 at each edge's head, -1 at its tail."""
        A = np.zeros((self.n_nodes, self.n_edges))
        A[self.heads, np.arange(self.n_edges)] += 1.0
        A[self.tails, np.arange(self.n_edges)] -= 1.0
        return A

    @cached_property
    def topo_order(self) -> np.ndarray:
        indeg = np.zeros(self.n_nodes, dtype=np.int64)
        for _, h in self.edges:
            indeg[h] += 1
        stack = [v for v in range(self.n_nodes - 1, -1, -1) if indeg[v] == 0]
        order = []
        while stack:
            v = stack.pop()
            order.append(v)
            for e in self.out_edges[v][::-1]:
                h = self.edges[e][1]
                indeg[h] -= 1
                if indeg[h] == 0:
                    stack.append(h)
        if len(order) != self.n_nodes:
            raise ValueError("graph contains a cycle")
        return np.array(order, dtype=np.int64)

    @cached_property
    def topo_rank(self) -> np.ndarray:
        rank = np.empty(self.n_nodes, dtype=np.int64)
        rank[self.topo_order] = np.arange(self.n_nodes)
        return rank

    def check_od(self, od: OdSpec) -> None:
        for v in (od.origin, od.destination):
            if not 0 <= v < self.n_nodes:
                raise ValueError(f"node {v} out of range for graph with {self.n_nodes} nodes")

    def to_dict(self) -> dict:
        return {"n_nodes": self.n_nodes, "edges": [list(e) for e in self.edges]}


@dataclass(frozen=True, eq=False)
class GridGraph(DiGraph):
    """Right/down lattice on ``rows x cols`` nodes, node id ``r * cols + c``."""

    rows: int = field(default=1)
    cols: int = field(default=1)

    def node(self, r: int, c: int) -> int:
        return r * self.cols + c

    def coords(self, v: int) -> tuple[int, int]:
        return divmod(int(v), self.cols)

    def default_od(self) -> OdSpec:
        return OdSpec(0, self.n_nodes - 1)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "edges": [list(e) for e in self.edges]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GridGraph":
        data = json.loads(text)
        g = build_grid(data["rows"], data["cols"])
        if [list(e) for e in g.edges] != data["edges"]:
            raise ValueError("edge list does not match the canonical grid ordering")
        return g


def build_grid(rows: int, cols: int) -> GridGraph:
    """Build the monotone ``rows x cols`` lattice."""
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise ValueError(f"grid {rows}x{cols} has no valid origin-destination pair")
    edges = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                edges.append((v, v + 1))
            if r + 1 < rows:
                edges.append((v, v + cols))
    return GridGraph(n_nodes=rows * cols, edges=tuple(edges), rows=rows, cols=cols)


def parallel_edges(k: int = 2) -> DiGraph:
    """Two nodes joined by ``k`` parallel edges; each edge is a full route."""
    if k < 1:
        raise ValueError("need at least one edge")
    return DiGraph(n_nodes=2, edges=tuple((0, 1) for _ in range(k)))


def _check_costs(graph: DiGraph, costs: np.ndarray) -> np.ndarray:
    costs = np.asarray(costs, dtype=np.float64)
    if costs.shape[-1] != graph.n_edges:
        raise ValueError(f"expected {graph.n_edges} edge costs, got {costs.shape[-1]}")
    if not np.all(np.isfinite(costs)) or np.any(costs <= 0):
        raise ValueError("edge costs must be finite and strictly positive")
    return costs


def _forward_pass(graph: DiGraph, C: np.ndarray, origin: int):
    """Distances and optimal-path counts from ``origin`` for a (B, E) cost batch."""
    B = C.shape[0]
    dist = np.full((B, graph.n_nodes), np.inf)
    count = np.zeros((B, graph.n_nodes))
    dist[:, origin] = 0.0
    count[:, origin] = 1.0
    start = graph.topo_rank[origin]
    for v in graph.topo_order[start + 1 :]:
        es = graph.in_edges[v]
        if len(es) == 0:
            continue
        tails = graph.tails[es]
        cand = dist[:, tails] + C[:, es]
        best = cand.min(axis=1)
        tight = cand <= best[:, None] * (1.0 + TIE_RTOL)
        dist[:, v] = best
        count[:, v] = np.where(tight, count[:, tails], 0.0).sum(axis=1)
    return dist, count


def _backtrack_uniform(graph, C, dist, count, od, rng):
    """Sample one optimal path per row, uniformly over all optimal paths.

    Walking back from the destination, each tight incoming edge is picked with
    probability proportional to the number of optimal paths reaching its tail.
    """
    B = C.shape[0]
    Z = np.zeros((B, graph.n_edges), dtype=np.int8)
    cur = np.full(B, od.destination, dtype=np.int64)
    rows = np.arange(B)
    for _ in range(graph.n_nodes):
        active = cur != od.origin
        if not active.any():
            break
        r = rows[active]
        v = cur[active]
        es = graph.padded_in_edges[v]
        valid = es >= 0
        es_safe = np.where(valid, es, 0)
        tails = graph.tails[es_safe]
        cand = dist[r[:, None], tails] + C[r[:, None], es_safe]
        limit = dist[r, v] * (1.0 + TIE_RTOL)
        w = np.where(valid & (cand <= limit[:, None]), count[r[:, None], tails], 0.0)
        cum = np.cumsum(w, axis=1)
        u = rng.random(len(r)) * cum[:, -1]
        pick = (cum <= u[:, None]).sum(axis=1)
        pick = np.minimum(pick, es.shape[1] - 1)
        chosen = es_safe[np.arange(len(r)), pick]
        Z[r, chosen] = 1
        cur[active] = graph.tails[chosen]
    return Z


def _reverse_distances(graph: DiGraph, c: np.ndarray, destination: int) -> np.ndarray:
    dist = np.full(graph.n_nodes, np.inf)
    dist[destination] = 0.0
    for v in graph.topo_order[::-1]:
        for e in graph.out_edges[v]:
            h = graph.heads[e]
            dist[v] = min(dist[v], c[e] + dist[h])
    return dist


def _lexmin_path(graph: DiGraph, c: np.ndarray, od: OdSpec, dist_from: np.ndarray) -> np.ndarray:
    """Optimal path whose sorted edge-id tuple is lexicographically smallest.

    Greedy over edge ids: keep an edge whenever some optimal path contains it
    together with every edge kept so far.
    """
    opt = dist_from[od.destination]
    dist_to = _reverse_distances(graph, c, od.destination)
    through = dist_from[graph.tails] + c + dist_to[graph.heads]
    tight = through <= opt * (1.0 + TIE_RTOL)

    # reach[u, w]: w reachable from u using tight edges only
    V = graph.n_nodes
    reach = np.eye(V, dtype=bool)
    for v in graph.topo_order[::-1]:
        for e in graph.out_edges[v]:
            if tight[e]:
                reach[v] |= reach[graph.heads[e]]

    def feasible(chosen):
        seq = sorted(chosen, key=lambda e: graph.topo_rank[graph.tails[e]])
        at = od.origin
        for e in seq:
            if not reach[at, graph.tails[e]]:
                return False
            at = graph.heads[e]
        return bool(reach[at, od.destination])

    kept: list[int] = []
    for e in range(graph.n_edges):
        if tight[e] and feasible(kept + [e]):
            kept.append(e)
    z = np.zeros(graph.n_edges, dtype=np.int8)
    z[kept] = 1
    return z


def solve_shortest_paths(
    graph: DiGraph,
    C: np.ndarray,
    od: OdSpec,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Solve the choice problem for each row of a (B, E) cost matrix.

    With an ``rng`` ties are broken uniformly at random among all optimal
    paths; without one the lexicographically smallest optimal edge set is
    returned (slow path, one solve per row).

    Returns:
        (B, E) int8 path indicators.
    """
    C = _check_costs(graph, np.atleast_2d(C))
    graph.check_od(od)
    dist, count = _forward_pass(graph, C, od.origin)
    if not np.all(np.isfinite(dist[:, od.destination])):
        raise ValueError(f"destination {od.destination} unreachable from {od.origin}")
    if rng is not None:
        return _backtrack_uniform(graph, C, dist, count, od, rng)
    return np.stack([_lexmin_path(graph, C[b], od, dist[b]) for b in range(C.shape[0])])


def solve_shortest_path(
    graph: DiGraph,
    c: np.ndarray,
    od: OdSpec,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Single-cost-vector version of :func:`solve_shortest_paths`."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 1:
        raise ValueError("expected a single cost vector")
    return solve_shortest_paths(graph, c[None, :], od, rng)[0]


def count_paths(graph: DiGraph, od: OdSpec) -> int:
    count = [0] * graph.n_nodes
    count[od.origin] = 1
    for v in graph.topo_order[graph.topo_rank[od.origin] + 1 :]:
        count[v] = sum(count[graph.tails[e]] for e in graph.in_edges[v])
    return count[od.destination]


def enumerate_paths(graph: DiGraph, od: OdSpec, cap: int = 10**6) -> np.ndarray:
    """All origin-destination paths, one row per path, by depth-first search."""
    graph.check_od(od)
    n = count_paths(graph, od)
    if n > cap:
        raise ValueError(f"{n} paths exceeds enumeration cap {cap}")
    out = np.zeros((n, graph.n_edges), dtype=np.int8)
    i = 0
    stack: list[tuple[int, list[int]]] = [(od.origin, [])]
    while stack:
        v, used = stack.pop()
        if v == od.destination:
            out[i, used] = 1
            i += 1
            continue
        for e in graph.out_edges[v]:
            stack.append((int(graph.heads[e]), used + [int(e)]))
    # dead-end branches never reach the destination, so i == n
    return out[:i]


def flow_residual(graph: DiGraph, z: np.ndarray, od: OdSpec) -> np.ndarray:
    """Node-wise inflow minus outflow minus the unit demand vector.

    Zero everywhere iff ``z`` (or an average of path indicators) carries one
    unit of flow from origin to destination.  Accepts leading batch axes.
    """
    z = np.asarray(z, dtype=np.float64)
    demand = np.zeros(graph.n_nodes)
    demand[od.origin] = -1.0
    demand[od.destination] = 1.0
    return z @ graph.incidence.T - demand


def is_path(graph: DiGraph, z: np.ndarray, od: OdSpec) -> bool:
    """True when ``z`` is a simple origin-destination path."""
    z = np.asarray(z)
    if not np.isin(z, (0, 1)).all():
        return False
    # conservation on a DAG rules out stray cycles
    return bool(np.all(flow_residual(graph, z, od) == 0))
