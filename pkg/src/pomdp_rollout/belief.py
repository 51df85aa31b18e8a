"""Exact factored Bayes filter and the feature estimator ``F(y, u, z)``.

Locations evolve independently given the actions, so the joint posterior
over damage levels is the product of per-location rows; the filter is
exact, not an approximation.

Within one period the order is: stage cost, repair, damage chain, robot
motion, sensing of the newly occupied location(s).
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass

import numpy as np

from .partition import classify_index
from .pipeline.model import REPAIR, PipelineModel, validate_chain

ROW_TOL = 1e-12
KEY_DECIMALS = 12


class InconsistentObservation(ValueError):
    """An observation with zero probability under the belief."""


@dataclass(frozen=True, eq=False)
class Belief:
    """``damage[loc]`` is the distribution over damage levels at ``loc``."""

    damage: np.ndarray

    def __post_init__(self):
        d = np.array(self.damage, dtype=float)
        if d.ndim != 2:
            raise ValueError("belief must be an L x (levels) matrix")
        if np.any(d < 0):
            raise ValueError("belief has negative entries")
        sums = d.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_TOL)
        if bad.size:
            raise ValueError(f"belief row {int(bad[0])} sums to {sums[bad[0]]!r}")
        d.setflags(write=False)
        object.__setattr__(self, "damage", d)

    @classmethod
    def point_masses(cls, levels, n_levels: int) -> Belief:
        d = np.zeros((len(levels), n_levels))
        d[np.arange(len(levels)), levels] = 1.0
        return cls(d)

    @property
    def n_locations(self) -> int:
        return self.damage.shape[0]

    def is_terminal(self) -> bool:
        return bool(np.all(self.damage[:, 0] >= 1.0 - ROW_TOL))

    def key(self) -> tuple:
        return tuple(np.round(self.damage, KEY_DECIMALS).ravel().tolist())

    def __eq__(self, other) -> bool:
        return isinstance(other, Belief) and np.array_equal(self.damage, other.damage)

    def __hash__(self) -> int:
        return hash(self.key())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for row in self.damage:
            writer.writerow([f"{x:.17g}" for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> Belief:
        rows = [list(map(float, r)) for r in csv.reader(io.StringIO(text)) if r]
        return cls(np.array(rows))


@dataclass(frozen=True, eq=False)
class FeatureState:
    """Robot position(s), belief, and the partition index derived from both."""

    robots: tuple[int, ...]
    belief: Belief
    partition_idx: int

    @classmethod
    def create(cls, model: PipelineModel, robots, belief) -> FeatureState:
        robots = tuple(int(p) for p in np.atleast_1d(robots))
        if not isinstance(belief, Belief):
            belief = Belief(belief)
        if len(robots) != model.n_robots:
            raise ValueError(f"expected {model.n_robots} robot position(s), got {robots}")
        if any(not 0 <= p < model.n_locations for p in robots):
            raise ValueError(f"robot position out of bounds: {robots}")
        if belief.damage.shape != (model.n_locations, model.levels):
            raise ValueError("belief shape does not match the model")
        return cls(robots, belief, classify_index(model, robots, belief.damage))

    def key(self) -> tuple:
        return (self.robots, self.belief.key())

    def __eq__(self, other) -> bool:
        return (isinstance(other, FeatureState) and self.robots == other.robots
                and self.belief == other.belief)

    def __hash__(self) -> int:
        return hash(self.key())

    def is_terminal(self) -> bool:
        return self.belief.is_terminal()


def belief_predict(b: Belief, chain: np.ndarray) -> Belief:
    chain = np.asarray(chain, dtype=float)
    validate_chain(chain)
    return Belief(_predict_rows(b.damage, chain))


def _predict_rows(d: np.ndarray, chain: np.ndarray) -> np.ndarray:
    out = np.zeros_like(d)
    for k in range(chain.shape[0]):
        out += d[:, k:k + 1] * chain[k]
    return out


def belief_correct(b: Belief, loc: int, observed_level: int) -> Belief:
    if b.damage[loc, observed_level] <= 0.0:
        raise InconsistentObservation(
            f"observed level {observed_level} at location {loc} has zero probability under the belief")
    d = b.damage.copy()
    d[loc] = 0.0
    d[loc, observed_level] = 1.0
    return Belief(d)


def _post_action(model: PipelineModel, y: FeatureState, u: int):
    topo = model.topology
    legal = topo.legal_actions(y.robots)
    if u not in legal:
        raise ValueError(f"illegal action {u} at robots {y.robots}; legal: {legal}")
    d = y.belief.damage.copy()
    comps = topo.joint[u]
    for p, c in zip(y.robots, comps):
        if c == REPAIR:
            d[p] = 0.0
            d[p, 0] = 1.0
    d = _predict_rows(d, model.chain)
    robots = tuple(int(topo.move[p, c]) for p, c in zip(y.robots, comps))
    return d, robots


def observation_distribution(model: PipelineModel, y: FeatureState, u: int) -> dict:
    """``p(z | b_y, u)`` over observations with positive probability.

    An observation is a tuple of levels, one per location in
    ``model.sensed_locations(next robots)``.
    """
    d, robots = _post_action(model, y, u)
    sensed = model.sensed_locations(robots)
    out = {}
    for z in itertools.product(*(np.flatnonzero(d[s] > 0) for s in sensed)):
        p = 1.0
        for s, level in zip(sensed, z):
            p *= d[s, level]
        out[tuple(int(v) for v in z)] = p
    return out


def feature_estimator(model: PipelineModel, y: FeatureState, u: int, z) -> FeatureState:
    d, robots = _post_action(model, y, u)
    sensed = model.sensed_locations(robots)
    z = (z,) if np.isscalar(z) else tuple(z)
    if len(z) != len(sensed):
        raise ValueError(f"observation {z} does not match sensed locations {sensed}")
    for s, level in zip(sensed, z):
        if not 0 <= level < model.levels or d[s, level] <= 0.0:
            raise InconsistentObservation(
                f"observation level {level} at location {s} has zero predicted probability")
        d[s] = 0.0
        d[s, level] = 1.0
    return FeatureState.create(model, robots, Belief(d))


def successors(model: PipelineModel, y: FeatureState, u: int) -> list[tuple[float, FeatureState]]:
    """``[(p(z | b_y, u), F(y, u, z))]`` over the positive-probability observations."""
    return [(p, feature_estimator(model, y, u, z))
            for z, p in observation_distribution(model, y, u).items()]


def expected_cost(model: PipelineModel, y: FeatureState) -> float:
    """Expected stage cost at ``y``; identical for every action in this problem."""
    d = y.belief.damage
    out = 0.0
    for k in range(model.levels):
        out += float((d[:, k] * model.costs[k]).sum())
    return out
