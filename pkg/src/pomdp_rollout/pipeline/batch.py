"""Vectorized kernels over batches of feature states.

A batch holds beliefs ``(B, L, K)`` and robot positions ``(B, R)``. All
reductions are written as explicit elementwise loops over the short level
axis so that a row's result never depends on which other rows share the
batch; this is what makes chunked, multi-worker runs bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import REPAIR, PipelineModel

TERMINAL_TOL = 1e-12


@dataclass
class StateBatch:
    beliefs: np.ndarray
    robots: np.ndarray

    def __post_init__(self):
        self.beliefs = np.asarray(self.beliefs, dtype=float)
        self.robots = np.asarray(self.robots, dtype=np.int64)
        if self.robots.ndim == 1:
            self.robots = self.robots[:, None]

    def __len__(self) -> int:
        return self.beliefs.shape[0]

    def take(self, idx) -> StateBatch:
        return StateBatch(self.beliefs[idx], self.robots[idx])

    def copy(self) -> StateBatch:
        return StateBatch(self.beliefs.copy(), self.robots.copy())

    @classmethod
    def concat(cls, batches) -> StateBatch:
        batches = list(batches)
        return cls(np.concatenate([b.beliefs for b in batches]),
                   np.concatenate([b.robots for b in batches]))

    @classmethod
    def empty(cls, model: PipelineModel) -> StateBatch:
        return cls(np.zeros((0, model.n_locations, model.levels)),
                   np.zeros((0, model.n_robots), dtype=np.int64))

    @classmethod
    def from_states(cls, states) -> StateBatch:
        states = list(states)
        return cls(np.stack([s.belief.damage for s in states]),
                   np.array([s.robots for s in states], dtype=np.int64))

    def feature_states(self, model: PipelineModel):
        from ..belief import Belief, FeatureState
        return [FeatureState.create(model, tuple(int(p) for p in r), Belief(b))
                for b, r in zip(self.beliefs, self.robots)]


def contract_levels(beliefs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``sum_k beliefs[..., k] * weights[k]`` with a fixed summation order."""
    acc = beliefs[..., 0] * weights[0]
    for k in range(1, beliefs.shape[-1]):
        acc = acc + beliefs[..., k] * weights[k]
    return acc


def predict(beliefs: np.ndarray, chain: np.ndarray) -> np.ndarray:
    """Row-wise ``belief @ chain`` for every location."""
    acc = beliefs[..., 0:1] * chain[0]
    for k in range(1, chain.shape[0]):
        acc = acc + beliefs[..., k:k + 1] * chain[k]
    return acc


def terminal_mask(beliefs: np.ndarray) -> np.ndarray:
    return np.all(beliefs[..., 0] >= 1.0 - TERMINAL_TOL, axis=-1)


def damaged_mask(model: PipelineModel, beliefs: np.ndarray) -> np.ndarray:
    return beliefs[..., 0] < model.damaged_threshold


def uncertain_mask(beliefs: np.ndarray) -> np.ndarray:
    return beliefs[..., 0] < 1.0 - TERMINAL_TOL


def expected_stage_cost(model: PipelineModel, beliefs: np.ndarray) -> np.ndarray:
    """Expected one-period cost; the pipeline cost does not depend on the action."""
    return contract_levels(beliefs, model.costs).sum(axis=-1)


def densities(model: PipelineModel, beliefs: np.ndarray, robots: np.ndarray):
    """Belief-weighted cost mass strictly left / right of the first robot."""
    per_loc = contract_levels(beliefs, model.costs)
    pos = robots[:, 0]
    left = np.where(model.topology.left_of[pos], per_loc, 0.0).sum(axis=1)
    right = np.where(model.topology.right_of[pos], per_loc, 0.0).sum(axis=1)
    return left, right


def apply_action(model: PipelineModel, beliefs: np.ndarray, robots: np.ndarray,
                 actions: np.ndarray):
    """Repair, damage-chain prediction and robot motion, without sensing.

    Returns fresh ``(beliefs, robots)``; raises on an illegal move.
    """
    topo = model.topology
    comps = topo.joint[actions]
    beliefs = beliefs.copy()
    rows = np.arange(len(actions))
    for r in range(topo.n_robots):
        rep = comps[:, r] == REPAIR
        if rep.any():
            beliefs[rows[rep], robots[rep, r]] = 0.0
            beliefs[rows[rep], robots[rep, r], 0] = 1.0
    beliefs = predict(beliefs, model.chain)
    new_robots = np.empty_like(robots)
    for r in range(topo.n_robots):
        new_robots[:, r] = topo.move[robots[:, r], comps[:, r]]
    if np.any(new_robots < 0):
        bad = int(np.argwhere(new_robots < 0)[0, 0])
        raise ValueError(f"illegal action {topo.action_name(int(actions[bad]))} "
                         f"at robots {robots[bad].tolist()}")
    return beliefs, new_robots


def sensed_table(model: PipelineModel) -> np.ndarray:
    """Per-location list of locations sensed by a robot standing there (-1 padded)."""
    topo = model.topology
    own = np.arange(topo.n_locations)[:, None]
    if model.sense_radius == 0:
        return own
    return np.concatenate([own, topo.neighbors], axis=1)


def sense(model: PipelineModel, beliefs: np.ndarray, robots: np.ndarray,
          levels: np.ndarray) -> None:
    """In place: rows at sensed locations become point masses at the true level."""
    table = sensed_table(model)
    rows = np.arange(beliefs.shape[0])
    for r in range(robots.shape[1]):
        for j in range(table.shape[1]):
            loc = table[robots[:, r], j]
            ok = loc >= 0
            rr, ll = rows[ok], loc[ok]
            beliefs[rr, ll] = 0.0
            beliefs[rr, ll, levels[rr, ll]] = 1.0


def sample_levels(beliefs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of one level per location from its belief row."""
    cdf = np.cumsum(beliefs, axis=-1)
    cdf[..., -1] = 1.0
    return (uniforms[..., None] >= cdf).sum(axis=-1)


def transition_levels(model: PipelineModel, levels: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    cdf = model.chain_cdf[levels]
    return (uniforms[..., None] >= cdf).sum(axis=-1)


def env_step(model: PipelineModel, levels: np.ndarray, robots: np.ndarray,
             actions: np.ndarray, uniforms: np.ndarray):
    """Hidden-state step for a batch: cost, repair, chain, move.

    Returns ``(levels, robots, cost)``; ``cost`` is charged on the
    pre-transition levels.
    """
    topo = model.topology
    cost = model.costs[levels].sum(axis=1)
    comps = topo.joint[actions]
    levels = levels.copy()
    rows = np.arange(len(actions))
    for r in range(topo.n_robots):
        rep = comps[:, r] == REPAIR
        levels[rows[rep], robots[rep, r]] = 0
    levels = transition_levels(model, levels, uniforms)
    new_robots = np.empty_like(robots)
    for r in range(topo.n_robots):
        new_robots[:, r] = topo.move[robots[:, r], comps[:, r]]
    if np.any(new_robots < 0):
        raise ValueError("illegal move off the pipeline boundary")
    return levels, new_robots, cost


def encode(model: PipelineModel, beliefs: np.ndarray, robots: np.ndarray,
           dtype=np.float64) -> np.ndarray:
    """Network input: one-hot robot position(s) followed by the flattened belief."""
    n, L = beliefs.shape[0], model.n_locations
    out = np.zeros((n, model.n_robots * L + L * model.levels), dtype=dtype)
    rows = np.arange(n)
    for r in range(model.n_robots):
        out[rows, r * L + robots[:, r]] = 1.0
    out[:, model.n_robots * L:] = beliefs.reshape(n, -1)
    return out
