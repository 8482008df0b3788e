"""Risk-averse driver-rider assignment driven by sampled route choices.

A scenario draws one perceived-cost vector per driver, solves that driver's
shortest path to every rider, and prices each path with the decision cost
vector ``g``.  Assignments minimise the empirical CVaR of total cost across
scenarios.  For a fixed assignment the inner (v, u) block of the usual CVaR
linear program is exactly the empirical CVaR of its scenario costs, so
enumerating permutations solves the mixed-integer program exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .graph import GridGraph, OdSpec, solve_shortest_paths

ENUM_CAP = 8


@dataclass(frozen=True, eq=False)
class AssignmentProblem:
    """Drivers start at ``drivers[d]``, riders wait at ``riders[r]``."""

    drivers: tuple[int, ...]
    riders: tuple[int, ...]
    g: np.ndarray
    alpha: float = 0.95
    X: np.ndarray | None = None

    def __post_init__(self):
        if len(self.drivers) != len(self.riders):
            raise ValueError("assignment must be square (|D| == |R|)")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        g = np.asarray(self.g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise ValueError("decision costs must be finite")
        object.__setattr__(self, "g", g)

    @property
    def size(self) -> int:
        return len(self.drivers)

    def od(self, d: int, r: int) -> OdSpec:
        return OdSpec(self.drivers[d], self.riders[r])

    @property
    def od_pairs(self) -> list[list[OdSpec]]:
        return [[self.od(d, r) for r in range(self.size)] for d in range(self.size)]


def place_drivers_riders(grid: GridGraph, k: int, rng: np.random.Generator) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Random distinct driver and rider nodes such that every driver reaches every rider.

    Drivers come from the top-left block of the lattice and riders from the
    bottom-right block (sharing the centre row/column, minus the centre node).
    """
    rs, cs = grid.rows // 2, grid.cols // 2
    centre = grid.node(rs, cs)
    driver_pool = [grid.node(r, c) for r in range(rs + 1) for c in range(cs + 1)]
    rider_pool = [grid.node(r, c) for r in range(rs, grid.rows) for c in range(cs, grid.cols) if grid.node(r, c) != centre]
    if k > min(len(driver_pool), len(rider_pool)):
        raise ValueError(f"grid {grid.rows}x{grid.cols} cannot host {k} drivers and riders")
    drivers = rng.choice(driver_pool, size=k, replace=False)
    riders = rng.choice(rider_pool, size=k, replace=False)
    return tuple(int(v) for v in drivers), tuple(int(v) for v in riders)


def make_problem(grid: GridGraph, X: np.ndarray, k: int, rng: np.random.Generator, alpha: float = 0.95) -> AssignmentProblem:
    """Assignment problem for an unseen context; ``g`` is the first feature column."""
    drivers, riders = place_drivers_riders(grid, k, rng)
    return AssignmentProblem(drivers, riders, g=np.asarray(X)[:, 0], alpha=alpha, X=X)


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    G: np.ndarray  # (K, D, R)

    def __post_init__(self):
        G = np.asarray(self.G, dtype=np.float64)
        if G.ndim != 3 or G.shape[0] < 1:
            raise ValueError("scenario set must be a non-empty (K, D, R) array")
        if not np.all(np.isfinite(G)):
            raise ValueError("scenario costs must be finite")
        object.__setattr__(self, "G", G)

    @property
    def K(self) -> int:
        return self.G.shape[0]

    def mean(self) -> np.ndarray:
        return self.G.mean(axis=0)


@dataclass(frozen=True, eq=False)
class Assignment:
    """Driver ``d`` serves rider ``perm[d]``."""

    perm: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(len(perm))):
            raise ValueError(f"{perm} is not a permutation")
        object.__setattr__(self, "perm", perm)

    @property
    def W(self) -> np.ndarray:
        W = np.zeros((len(self.perm), len(self.perm)), dtype=np.int8)
        W[np.arange(len(self.perm)), self.perm] = 1
        return W

    def cost(self, M: np.ndarray) -> np.ndarray:
        """Total cost under one (D, R) matrix or each of a (K, D, R) stack."""
        return np.asarray(M)[..., np.arange(len(self.perm)), self.perm].sum(axis=-1)


def generate_scenarios(dist, problem: AssignmentProblem, graph, K: int, rng: np.random.Generator) -> ScenarioSet:
    """K cost matrices; each driver draws one cost vector per scenario."""
    if K < 1:
        raise ValueError("need at least one scenario")
    D = problem.size
    G = np.empty((K, D, D))
    for d in range(D):
        costs = dist.sample(rng, K)
        for r in range(D):
            Z = solve_shortest_paths(graph, costs, problem.od(d, r), rng)
            G[:, d, r] = Z @ problem.g
    return ScenarioSet(G)


def empirical_cvar(costs: np.ndarray, alpha: float) -> np.ndarray:
    """``min_v v + E[(cost - v)+] / (1 - alpha)`` over the empirical distribution.

    The minimiser is attained at a sample point, so each order statistic is
    tried.  Reduces the last axis.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    x = np.sort(np.asarray(costs, dtype=np.float64), axis=-1)
    K = x.shape[-1]
    if K == 0:
        raise ValueError("empty cost vector")
    # above[j] = sum_{i > j} x[i]
    tail = np.flip(np.cumsum(np.flip(x, axis=-1), axis=-1), axis=-1)
    above = np.concatenate([tail[..., 1:], np.zeros(x.shape[:-1] + (1,))], axis=-1)
    n_above = K - 1 - np.arange(K)
    values = x + (above - n_above * x) / ((1.0 - alpha) * K)
    return values.min(axis=-1)


def _permutation_blocks(D: int, block: int = 5040):
    it = itertools.permutations(range(D))
    while True:
        chunk = list(itertools.islice(it, block))
        if not chunk:
            return
        yield np.array(chunk, dtype=np.int64)


def _local_search(G, alpha, start, rng, restarts=10):
    D = G.shape[1]
    rows = np.arange(D)

    def value(p):
        return float(empirical_cvar(G[:, rows, p].sum(axis=-1), alpha))

    best_p, best_v = None, np.inf
    for attempt in range(restarts):
        p = start.copy() if attempt == 0 else rng.permutation(D)
        v = value(p)
        improved = True
        while improved:
            improved = False
            for i, j in itertools.combinations(range(D), 2):
                q = p.copy()
                q[i], q[j] = q[j], q[i]
                vq = value(q)
                if vq < v - 1e-12:
                    p, v, improved = q, vq, True
        if v < best_v:
            best_p, best_v = p, v
    return best_p, best_v


def solve_cvar_assignment(
    scenarios: ScenarioSet,
    alpha: float,
    cap: int = ENUM_CAP,
    local_search: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Assignment, float]:
    """Assignment minimising empirical CVaR of total cost.

    Exact by enumeration when ``|D| <= cap``; otherwise 2-swap hill climbing
    from the risk-neutral solution with random restarts (``local_search``).
    Ties go to the first permutation in lexicographic order.
    """
    G = scenarios.G
    if G.shape[1] != G.shape[2]:
        raise ValueError(f"scenario matrices must be square, got {G.shape[1:]}")
    D = G.shape[1]
    if D > cap:
        if not local_search:
            raise ValueError(f"|D|={D} exceeds enumeration cap {cap}; enable local_search")
        start = solve_risk_neutral_assignment(scenarios.mean()).perm
        perm, value = _local_search(G, alpha, start, rng or np.random.default_rng(0))
        return Assignment(perm), value
    rows = np.arange(D)
    best_p, best_v = None, np.inf
    for perms in _permutation_blocks(D):
        totals = G[:, rows, perms].sum(axis=-1).T  # (P, K)
        vals = empirical_cvar(totals, alpha)
        i = int(np.argmin(vals))
        if vals[i] < best_v:
            best_p, best_v = perms[i], float(vals[i])
    return Assignment(best_p), best_v


def solve_risk_neutral_assignment(mean_costs: np.ndarray) -> Assignment:
    """Minimum-total-cost permutation (Hungarian method)."""
    M = np.asarray(mean_costs, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"cost matrix must be square, got {M.shape}")
    rows, cols = linear_sum_assignment(M)
    perm = np.empty(len(rows), dtype=np.int64)
    perm[rows] = cols
    return Assignment(perm)


def decision_cost_samples(dist, problem: AssignmentProblem, graph, assignment: Assignment, N: int, rng) -> np.ndarray:
    """Total decision cost of ``assignment`` in N fresh scenarios."""
    if N < 1:
        raise ValueError("need at least one evaluation scenario")
    total = np.zeros(N)
    for d, r in enumerate(assignment.perm):
        costs = dist.sample(rng, N)
        total += solve_shortest_paths(graph, costs, problem.od(d, int(r)), rng) @ problem.g
    return total


def expected_decision_cost(dist, problem: AssignmentProblem, graph, assignment: Assignment, N: int, rng) -> float:
    """Monte Carlo mean of the assignment's total decision cost."""
    return float(decision_cost_samples(dist, problem, graph, assignment, N, rng).mean())
