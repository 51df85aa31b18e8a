from .bounds import BoundRow, rollout_policy_table, verify_bounds
from .graph import (FeatureGraph, GraphNotClosed, GraphTooLarge, NotConverged, argmin_ties,
                    bellman_apply, bellman_policy_apply, exact_policy_cost, exact_value_iteration,
                    power_policy_apply, write_graph_csv, write_table_csv)
from .model import FlatProblem, PomdpModel, bayes_update, expected_stage_cost, obs_likelihood

__all__ = [
    "BoundRow", "FeatureGraph", "FlatProblem", "GraphNotClosed", "GraphTooLarge", "NotConverged",
    "PomdpModel", "argmin_ties", "bayes_update", "bellman_apply", "bellman_policy_apply",
    "exact_policy_cost", "exact_value_iteration", "expected_stage_cost", "obs_likelihood",
    "power_policy_apply", "rollout_policy_table", "verify_bounds", "write_graph_csv",
    "write_table_csv",
]
