import numpy as np
import pytest

from cpdl.datagen import generate_dataset
from cpdl.decision import Assignment, AssignmentProblem
from cpdl.encoder import LinearEncoder, MLPEncoder
from cpdl.graph import OdSpec, build_grid, parallel_edges
from cpdl.metrics import (
    DecisionGap,
    decide,
    decision_gap,
    evaluate_decisions,
    post_decision_disappointment,
    post_decision_surprise,
    r2_recovery,
    r_squared,
    signed_correlations,
    test_loss,
)
from cpdl.pref_dist import PointMass, PrefDistParams
from cpdl.trainer import MomentSpec, Observation, TrainConfig


class DGPModel:
    """Encoder stand-in that returns the ground-truth distribution."""

    def __init__(self, gt):
        self.gt = gt

    def forward(self, theta, X):
        return self.gt.params(np.asarray(X)), None


@pytest.fixture
def two_route_problem():
    g = parallel_edges(2)
    return g, AssignmentProblem((0,), (1,), g=np.array([5.0, 3.0]))


def test_point_mass_surprise_and_disappointment(two_route_problem):
    g, problem = two_route_problem
    W = Assignment([0])
    gt, pred = PointMass([1.0, 2.0]), PointMass([2.0, 1.0])  # gt picks route 0, pred route 1
    rng = np.random.default_rng(0)
    gap = decision_gap(W, gt, pred, problem, g, 10, rng)
    assert (gap.e_gt, gap.e_pred) == (5.0, 3.0)
    assert gap.surprise == 4.0 and gap.disappointment == 4.0
    assert post_decision_surprise(W, pred, gt, problem, g, 10, rng) == 4.0
    assert post_decision_disappointment(W, pred, gt, problem, g, 10, rng) == 0.0


def test_gap_properties():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a, b = rng.normal(size=2) * 10
        gap, rev = DecisionGap(a, b), DecisionGap(b, a)
        assert gap.surprise == rev.surprise
        assert gap.disappointment <= gap.surprise
        assert gap.disappointment + rev.disappointment == pytest.approx(gap.surprise)


def test_true_model_has_small_surprise():
    g = build_grid(3, 3)
    problem = AssignmentProblem((0,), (8,), g=np.linspace(0.5, 2.0, g.n_edges))
    dist = PrefDistParams(np.zeros(g.n_edges), np.ones(g.n_edges))
    gap = decision_gap(Assignment([0]), dist, dist, problem, g, 10**5, np.random.default_rng(2))
    assert abs(gap.e_gt - gap.e_pred) < 3 * np.hypot(gap.se_gt, gap.se_pred)


def test_test_loss_prefers_ground_truth():
    g = build_grid(3, 3)
    od = g.default_od()
    gt, insts = generate_dataset(g, od, n=3, I=10, S=500, seed=0)
    obs = [i.observed() for i in insts]
    cfg = TrainConfig(K=500)
    model = MLPEncoder(3)
    true_loss = test_loss(DGPModel(gt), None, obs, g, od, cfg, MomentSpec(1), np.random.default_rng(0))
    zero_loss = test_loss(model, model.init(np.random.default_rng(0), 0.0), obs, g, od, cfg, MomentSpec(1), np.random.default_rng(0))
    assert true_loss < zero_loss


def test_test_loss_zero_on_single_path_graph():
    g = build_grid(1, 4)
    model = MLPEncoder(2)
    theta = model.init(np.random.default_rng(0))
    obs = [Observation(np.random.default_rng(i).normal(size=(3, 2)), np.ones(3)) for i in range(3)]
    assert test_loss(model, theta, obs, g, OdSpec(0, 3), TrainConfig(K=10), MomentSpec(1), np.random.default_rng(0)) == 0.0


def test_r_squared_examples():
    x = np.arange(10.0)
    assert r_squared(x, 2 * x + 1) == pytest.approx(1.0)
    assert r_squared(-x, x) == pytest.approx(1.0)
    assert r_squared(np.ones(10), x) == 0.0
    with pytest.raises(ValueError):
        r_squared(x, np.ones(10))


def test_r_squared_affine_invariant():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=50), rng.normal(size=50)
    assert r_squared(3 * a - 2, b) == pytest.approx(r_squared(a, b), rel=1e-12)


def test_recovery_of_exact_locations():
    g = build_grid(3, 3)
    gt, insts = generate_dataset(g, g.default_od(), n=3, I=5, S=5, seed=1)
    model = LinearEncoder(3)
    theta = np.concatenate([gt.beta_mu, np.zeros(3)])
    r2_loc, _ = r2_recovery(model, theta, insts)
    corr_loc, _ = signed_correlations(model, theta, insts)
    assert r2_loc == pytest.approx(1.0) and corr_loc == pytest.approx(1.0)
    corr_neg, _ = signed_correlations(model, np.concatenate([-gt.beta_mu, np.zeros(3)]), insts)
    assert corr_neg == pytest.approx(-1.0)


def test_gtd_rn_plans_on_expected_costs():
    g = build_grid(3, 3)
    gt, insts = generate_dataset(g, g.default_od(), n=2, I=1, S=5, seed=2)
    problem = AssignmentProblem((0, 1), (7, 8), g=np.ones(g.n_edges))
    W, pred = decide("gtd-rn", problem, g, insts[0], 10, np.random.default_rng(0))
    assert isinstance(pred, PointMass)
    np.testing.assert_allclose(pred.mean(), insts[0].gt_dist.mean())
    with pytest.raises(ValueError):
        decide("cpdl", problem, g, insts[0], 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        decide("oracle", problem, g, insts[0], 10, np.random.default_rng(0))


def test_evaluate_rows_and_disappointment_bound():
    g = build_grid(5, 5)
    _, insts = generate_dataset(g, g.default_od(), n=5, I=3, S=10, seed=3)
    for method in ("gtd-rn", "gtd-ra"):
        rows = evaluate_decisions(method, insts, g, n_drivers=3, K=20, N=200, alpha=0.9, seed=0)
        assert [r["instance"] for r in rows] == [0, 1, 2]
        for r in rows:
            assert r["disappointment"] <= r["surprise"]
            assert r["surprise"] == pytest.approx((r["e_gt"] - r["e_pred"]) ** 2)
