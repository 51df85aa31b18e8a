"""Scalar hidden-state simulator, terminal test, damage densities, trajectory dumps."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import batch
from .model import PipelineModel


@dataclass(frozen=True)
class HiddenState:
    robots: tuple[int, ...]
    levels: tuple[int, ...]

    def is_terminal(self) -> bool:
        return all(v == 0 for v in self.levels)


def sample_hidden(b, robots, rng: np.random.Generator) -> HiddenState:
    """Draw each location's level independently from its belief row."""
    damage = b.damage if hasattr(b, "damage") else np.asarray(b)
    u = rng.random(damage.shape[0])
    levels = batch.sample_levels(damage[None], u[None])[0]
    return HiddenState(tuple(int(p) for p in np.atleast_1d(robots)), tuple(int(v) for v in levels))


def env_step(model: PipelineModel, h: HiddenState, u: int, rng: np.random.Generator):
    """One period: returns ``(next hidden state, observation, stage cost)``.

    The observation is the tuple of true levels at ``model.sensed_locations``
    of the robots' new positions.
    """
    legal = model.topology.legal_actions(h.robots)
    if u not in legal:
        raise ValueError(f"illegal action {model.topology.action_name(u)} at robots {h.robots}")
    levels = np.array([h.levels])
    robots = np.array([h.robots], dtype=np.int64)
    uniforms = rng.random((1, model.n_locations))
    levels, robots, cost = batch.env_step(model, levels, robots, np.array([u]), uniforms)
    h2 = HiddenState(tuple(int(p) for p in robots[0]), tuple(int(v) for v in levels[0]))
    z = tuple(h2.levels[s] for s in model.sensed_locations(h2.robots))
    return h2, z, float(cost[0])


def is_terminal(x) -> bool:
    """All locations at d0 (hidden state) or point mass at d0 (belief / feature state)."""
    if isinstance(x, HiddenState):
        return x.is_terminal()
    damage = x.belief.damage if hasattr(x, "belief") else getattr(x, "damage", x)
    return bool(batch.terminal_mask(np.asarray(damage)[None])[0])


def damage_densities(y, model: PipelineModel) -> tuple[float, float]:
    """``(LD, RD)``: belief-weighted cost mass left / right of the (first) robot."""
    ld, rd = batch.densities(model, y.belief.damage[None], np.array([y.robots], dtype=np.int64))
    return float(ld[0]), float(rd[0])


TRAJECTORY_FIELDS = ("step", "robots", "action", "observation", "stage_cost", "partition")


def write_trajectory(path, rows) -> None:
    """Rows are dicts with the ``TRAJECTORY_FIELDS`` keys; tuples are space-joined."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_FIELDS)
        for r in rows:
            writer.writerow([" ".join(map(str, v)) if isinstance(v, tuple) else v
                             for v in (r[k] for k in TRAJECTORY_FIELDS)])


def simulate_trajectory(model: PipelineModel, policy, y0, rng: np.random.Generator,
                        max_steps: int = 400):
    """Run ``policy`` from feature state ``y0`` with the composite simulator.

    Returns ``(discounted cost, rows)`` where ``rows`` follow ``TRAJECTORY_FIELDS``.
    """
    from ..belief import feature_estimator

    h = sample_hidden(y0.belief, y0.robots, rng)
    y = y0
    total, disc, rows = 0.0, 1.0, []
    for k in range(max_steps):
        if is_terminal(y):
            break
        u = policy(y)
        h, z, cost = env_step(model, h, u, rng)
        rows.append({"step": k, "robots": y.robots, "action": model.topology.action_name(u),
                     "observation": z, "stage_cost": cost, "partition": y.partition_idx})
        total += disc * cost
        disc *= model.discount
        y = feature_estimator(model, y, u, z)
    return total, rows
