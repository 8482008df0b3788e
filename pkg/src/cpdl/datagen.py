"""Synthetic route-choice data.

Two global coefficient vectors are drawn uniformly from [0, 1]^n.  Each
instance gets standard-normal edge features ``X`` and log-normal edge costs
with location ``X @ beta_mu`` and scale ``max(X @ beta_sigma, sigma_floor)``.
S cost vectors are drawn, the shortest path is solved for each, and the
learner sees only ``X`` and the edge selection frequencies ``p_bar``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .graph import DiGraph, OdSpec, solve_shortest_paths
from .pref_dist import SIGMA_FLOOR, PrefDistParams
from .trainer import MomentSpec, Observation, second_moments


@dataclass(frozen=True, eq=False)
class GroundTruth:
    beta_mu: np.ndarray
    beta_sigma: np.ndarray

    @property
    def n(self) -> int:
        return len(self.beta_mu)

    def params(self, X: np.ndarray, sigma_floor: float = SIGMA_FLOOR) -> PrefDistParams:
        """Per-edge cost distribution for features ``X``."""
        return PrefDistParams(X @ self.beta_mu, np.maximum(X @ self.beta_sigma, sigma_floor))


@dataclass(eq=False)
class Instance:
    """One context.  ``gt_mu``/``gt_sigma`` are for evaluation only.

    ``pp_bar`` holds the packed upper-triangular second moments of the
    sampled paths when they were requested at generation time.
    """

    X: np.ndarray
    p_bar: np.ndarray
    gt_mu: np.ndarray
    gt_sigma: np.ndarray
    pp_bar: np.ndarray | None = None

    @property
    def gt_dist(self) -> PrefDistParams:
        return PrefDistParams(self.gt_mu, self.gt_sigma)

    def phi_bar(self, spec: MomentSpec) -> np.ndarray:
        if spec.order == 1:
            return self.p_bar
        if self.pp_bar is None:
            raise ValueError("instance was generated without second moments")
        return np.concatenate([self.p_bar, self.pp_bar])

    def observed(self, spec: MomentSpec = MomentSpec(1)) -> Observation:
        """Learner-facing view without the ground truth."""
        return Observation(X=self.X, phi_bar=self.phi_bar(spec))

    def to_dict(self) -> dict:
        out = {
            "X": self.X.tolist(),
            "p_bar": self.p_bar.tolist(),
            "gt_mu": self.gt_mu.tolist(),
            "gt_sigma": self.gt_sigma.tolist(),
        }
        if self.pp_bar is not None:
            out["pp_bar"] = self.pp_bar.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Instance":
        pp = d.get("pp_bar")
        return cls(
            X=np.array(d["X"], dtype=np.float64),
            p_bar=np.array(d["p_bar"], dtype=np.float64),
            gt_mu=np.array(d["gt_mu"], dtype=np.float64),
            gt_sigma=np.array(d["gt_sigma"], dtype=np.float64),
            pp_bar=None if pp is None else np.array(pp, dtype=np.float64),
        )


def sample_ground_truth(n: int, rng: np.random.Generator) -> GroundTruth:
    if n < 1:
        raise ValueError("feature dimension must be >= 1")
    return GroundTruth(rng.uniform(0.0, 1.0, n), rng.uniform(0.0, 1.0, n))


def instance_from_features(
    graph: DiGraph,
    od: OdSpec,
    X: np.ndarray,
    dist: PrefDistParams,
    S: int,
    rng: np.random.Generator,
    second_order: bool = False,
) -> Instance:
    """Sample S choices under ``dist`` and aggregate them."""
    if S < 1:
        raise ValueError("need at least one sample per instance")
    costs = dist.sample(rng, S)
    Z = solve_shortest_paths(graph, costs, od, rng)
    pp = second_moments(Z, axis=0) if second_order else None
    return Instance(X=X, p_bar=Z.mean(axis=0), gt_mu=dist.mu, gt_sigma=dist.sigma, pp_bar=pp)


def generate_instance(
    graph: DiGraph,
    od: OdSpec,
    gt: GroundTruth,
    S: int,
    rng: np.random.Generator,
    second_order: bool = False,
) -> Instance:
    X = rng.standard_normal((graph.n_edges, gt.n))
    return instance_from_features(graph, od, X, gt.params(X), S, rng, second_order)


def instance_rng(seed: int, i: int, split: int = 0) -> np.random.Generator:
    """Substream for instance ``i``; ``split`` separates train (0) from test (1)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, split, i)))


def generate_dataset(
    graph: DiGraph,
    od: OdSpec,
    n: int,
    I: int,
    S: int,
    seed: int,
    second_order: bool = False,
    split: int = 0,
    gt: GroundTruth | None = None,
) -> tuple[GroundTruth, list[Instance]]:
    """Shared ground truth plus ``I`` instances on independent substreams.

    Pass ``gt`` and ``split=1`` to draw a held-out set from the same
    ground truth.
    """
    if I < 1:
        raise ValueError("need at least one instance")
    if gt is None:
        gt = sample_ground_truth(n, np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,))))
    instances = [generate_instance(graph, od, gt, S, instance_rng(seed, i, split), second_order) for i in range(I)]
    return gt, instances


def write_jsonl(path, instances: list[Instance]) -> None:
    with open(path, "w") as f:
        for inst in instances:
            f.write(json.dumps(inst.to_dict()))
            f.write("\n")


def read_jsonl(path) -> list[Instance]:
    with open(path) as f:
        return [Instance.from_dict(json.loads(line)) for line in f if line.strip()]
