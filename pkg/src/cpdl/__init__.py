"""Learning context-dependent preference distributions from aggregated route choices."""

from .datagen import GroundTruth, Instance, generate_dataset, generate_instance, sample_ground_truth
from .decision import (
    Assignment,
    AssignmentProblem,
    ScenarioSet,
    empirical_cvar,
    expected_decision_cost,
    generate_scenarios,
    solve_cvar_assignment,
    solve_risk_neutral_assignment,
)
from .encoder import LinearEncoder, MLPEncoder, linear_variant
from .graph import DiGraph, GridGraph, OdSpec, build_grid, enumerate_paths, solve_shortest_path, solve_shortest_paths
from .pref_dist import SIGMA_FLOOR, PointMass, PrefDistParams, log_density, sample, score
from .trainer import (
    MomentEstimate,
    MomentSpec,
    TrainConfig,
    cpdl_gradient,
    cpdl_loss,
    estimate_moments,
    moment_features,
    reinforce_gradient,
    train,
)

__version__ = "0.1.0"
