import numpy as np
import pytest

from pomdp_rollout.belief import Belief, FeatureState
from pomdp_rollout.core.adapters import PipelineProblem, greedy_table, start_states
from pomdp_rollout.core.graph import FeatureGraph, exact_policy_cost, exact_value_iteration
from pomdp_rollout.pipeline import PipelineModel


class ToyGraph:
    """An enumerated toy instance with its exact solutions."""

    def __init__(self, model, priors):
        self.model = model
        self.graph = FeatureGraph.build(PipelineProblem(model), start_states(model, priors))
        self.J_star, self.mu_star = exact_value_iteration(self.graph)
        self.base = greedy_table(self.graph, model)
        self.J_mu = exact_policy_cost(self.graph, self.base)
        self.index = {y.key(): i for i, y in enumerate(self.graph.nodes)}
        self.live = np.array([not y.is_terminal() for y in self.graph.nodes])


class TableCost:
    """Terminal cost read from a table over enumerated nodes."""

    def __init__(self, toy, values):
        self.toy, self.values = toy, np.asarray(values, dtype=float)

    def __call__(self, states):
        keys = [y.key() for y in states.feature_states(self.toy.model)]
        return np.array([self.values[self.toy.index[k]] for k in keys])


def toy_model(L=2, levels=2, costs=None, discount=0.99):
    chain = np.eye(levels)
    return PipelineModel.linear(L, levels=levels, chain=chain, costs=costs, discount=discount)


@pytest.fixture(scope="session")
def toy2():
    """2 locations, 2 levels: the smallest instance with a finite belief graph."""
    return ToyGraph(toy_model(2, 2), np.full((2, 2), 0.5))


@pytest.fixture(scope="session")
def toy3():
    """3 locations, 3 levels, static chain, costs that make greedy suboptimal."""
    model = toy_model(3, 3, costs=[0.0, 1.0, 30.0], discount=0.95)
    priors = np.array([[0.3, 0.5, 0.2], [0.6, 0.1, 0.3], [0.2, 0.2, 0.6]])
    return ToyGraph(model, priors)


def state(model, robots, rows):
    return FeatureState.create(model, robots, Belief(np.asarray(rows, dtype=float)))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
