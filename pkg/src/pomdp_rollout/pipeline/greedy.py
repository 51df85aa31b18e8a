"""The greedy base policy: repair here if damaged, else head for the nearest damage."""

from __future__ import annotations

import numpy as np

from .batch import StateBatch, damaged_mask, uncertain_mask
from .model import REPAIR, PipelineModel

_BIG = np.iinfo(np.int64).max // 4


def greedy_actions(model: PipelineModel, beliefs: np.ndarray, robots: np.ndarray) -> np.ndarray:
    """Greedy joint action for each row of a batch.

    Targets are locations believed damaged (``P(d0) < threshold``); when
    there are none, any location with mass off ``d0``. Robots standing on
    a target repair it and claim it; the others, in robot order, go to the
    nearest unclaimed target (nearest overall if all are claimed). At a
    terminal belief every robot repairs, which costs nothing.
    """
    topo = model.topology
    n = beliefs.shape[0]
    rows = np.arange(n)
    targets = damaged_mask(model, beliefs)
    none = ~targets.any(axis=1)
    if none.any():
        targets[none] = uncertain_mask(beliefs[none])

    comps = np.zeros((n, topo.n_robots), dtype=np.int64)
    claimed = np.zeros_like(targets)
    here = np.zeros((n, topo.n_robots), dtype=bool)
    for r in range(topo.n_robots):
        here[:, r] = targets[rows, robots[:, r]]
        claimed[rows[here[:, r]], robots[here[:, r], r]] = True
    for r in range(topo.n_robots):
        pos = robots[:, r]
        free = targets & ~claimed
        cand = np.where(free.any(axis=1)[:, None], free, targets)
        key = np.where(cand, topo.tie_key[pos], _BIG)
        tgt = key.argmin(axis=1)
        has = cand.any(axis=1) & ~here[:, r]
        comps[:, r] = np.where(has, topo.step_toward[pos, tgt], REPAIR)
        claimed[rows[has], tgt[has]] = True

    n_a = len(topo.robot_actions)
    flat = np.zeros(n, dtype=np.int64)
    for r in range(topo.n_robots):
        flat = flat * n_a + comps[:, r]
    return flat


class GreedyPolicy:
    """Batch-callable wrapper, picklable for worker processes."""

    def __init__(self, model: PipelineModel):
        self.model = model

    def __call__(self, states: StateBatch, rngs=None) -> np.ndarray:
        return greedy_actions(self.model, states.beliefs, states.robots)


def greedy_policy(y, model: PipelineModel) -> int:
    """Greedy action for a single feature state."""
    robots = np.array([y.robots], dtype=np.int64)
    return int(greedy_actions(model, y.belief.damage[None], robots)[0])
