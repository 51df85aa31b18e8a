"""Pipeline instances as feature-graph problems and as flat joint-state POMDPs."""

from __future__ import annotations

import itertools

import numpy as np

from ..belief import Belief, FeatureState, expected_cost, successors
from ..pipeline.greedy import greedy_policy
from ..pipeline.model import REPAIR, PipelineModel
from .model import PomdpModel


class PipelineProblem:
    """Feature-graph adapter over pipeline ``FeatureState`` nodes."""

    def __init__(self, model: PipelineModel):
        self.model = model
        self.discount = model.discount
        self.n_controls = model.n_actions

    def controls(self, y: FeatureState) -> list[int]:
        return self.model.topology.legal_actions(y.robots)

    def stage_cost(self, y: FeatureState, u: int) -> float:
        return expected_cost(self.model, y)

    def transitions(self, y: FeatureState, u: int):
        return successors(self.model, y, u)

    def key(self, y: FeatureState):
        return y.key()

    def is_terminal(self, y: FeatureState) -> bool:
        return y.is_terminal()


def greedy_table(graph, model: PipelineModel) -> np.ndarray:
    return np.array([greedy_policy(y, model) for y in graph.nodes], dtype=np.int64)


def terminal_nodes(graph) -> np.ndarray:
    return np.array([y.is_terminal() for y in graph.nodes], dtype=bool)


class JointStates:
    """Enumeration of hidden states ``(robots, levels)`` for a small instance."""

    def __init__(self, model: PipelineModel):
        if model.sense_radius != 0:
            raise ValueError("flat conversion supports sense_radius=0 only")
        self.model = model
        L, K, R = model.n_locations, model.levels, model.n_robots
        self.states = [(rb, lv) for rb in itertools.product(range(L), repeat=R)
                       for lv in itertools.product(range(K), repeat=L)]
        self.index = {s: i for i, s in enumerate(self.states)}

    def __len__(self) -> int:
        return len(self.states)

    def belief_vector(self, y: FeatureState) -> np.ndarray:
        b = np.zeros(len(self))
        d = y.belief.damage
        for i, (rb, lv) in enumerate(self.states):
            if rb == y.robots:
                b[i] = np.prod(d[np.arange(len(lv)), lv])
        return b

    def marginals(self, b: np.ndarray) -> tuple[tuple[int, ...], np.ndarray]:
        """Robot positions (must be certain) and per-location level marginals."""
        L, K = self.model.n_locations, self.model.levels
        out = np.zeros((L, K))
        robots = set()
        for p, (rb, lv) in zip(b, self.states):
            if p > 0:
                robots.add(rb)
                out[np.arange(L), lv] += p
        if len(robots) != 1:
            raise ValueError("robot position is not certain under this belief")
        return robots.pop(), out

    def obs_code(self, robots, levels) -> int:
        z = 0
        for p in robots:
            z = z * self.model.levels + levels[p]
        return z


def to_flat_pomdp(model: PipelineModel) -> tuple[PomdpModel, JointStates]:
    """Brute-force joint-state POMDP equivalent to ``model``.

    Observations encode the true level under each robot (robot order, base
    ``levels``). Off-boundary moves, which the pipeline forbids, become
    "stay without repairing" so every control is defined everywhere.
    """
    js = JointStates(model)
    topo = model.topology
    K, L, R = model.levels, model.n_locations, model.n_robots
    n, U, Z = len(js), model.n_actions, K ** R
    trans = np.zeros((U, n, n))
    cost = np.zeros((U, n, n))
    obs = np.zeros((U, n, Z))
    for i, (rb, lv) in enumerate(js.states):
        g = float(sum(model.costs[v] for v in lv))
        for u in range(U):
            comps = topo.joint[u]
            levels = list(lv)
            for p, c in zip(rb, comps):
                if c == REPAIR:
                    levels[p] = 0
            new_rb = tuple(int(topo.move[p, c]) if topo.move[p, c] >= 0 else p
                           for p, c in zip(rb, comps))
            for nxt in itertools.product(range(K), repeat=L):
                prob = 1.0
                for cur, new in zip(levels, nxt):
                    prob *= model.chain[cur, new]
                if prob > 0:
                    j = js.index[(new_rb, nxt)]
                    trans[u, i, j] += prob
                    cost[u, i, j] = g
            cost[u, i, trans[u, i] == 0] = g
    for j, (rb, lv) in enumerate(js.states):
        obs[:, j, js.obs_code(rb, lv)] = 1.0
    return PomdpModel(trans, cost, obs, model.discount), js


def start_states(model: PipelineModel, priors) -> list[FeatureState]:
    """Feature states for every robot position with the current location
    resolved by every positive-probability sensing outcome.

    ``priors`` is the ``L x levels`` prior over damage before the robot has
    looked at its own location.
    """
    priors = np.asarray(priors, dtype=float)
    out = []
    for robots in itertools.product(range(model.n_locations), repeat=model.n_robots):
        cur = sorted(set(robots))
        for z in itertools.product(*(np.flatnonzero(priors[p] > 0) for p in cur)):
            d = priors.copy()
            for p, level in zip(cur, z):
                d[p] = 0.0
                d[p, level] = 1.0
            out.append(FeatureState.create(model, robots, Belief(d)))
    return out
