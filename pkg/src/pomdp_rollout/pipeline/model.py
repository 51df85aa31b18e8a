"""Pipeline repair problem definition: topologies, damage chain, costs.

Locations are indexed from 0. Grid locations are numbered row-major,
``loc = row * cols + col``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

REPAIR = 0

LINEAR_ACTIONS = ("repair", "left", "right")
GRID_ACTIONS = ("repair", "up", "down", "left", "right")

FIVE_LEVEL_COSTS = (0.0, 0.1, 1.0, 10.0, 100.0)
ROW_TOL = 1e-12


class InstanceError(ValueError):
    """Raised for malformed problem instances."""


def default_chain(levels: int, p_worsen: float = 0.1) -> np.ndarray:
    """Upper-bidiagonal damage chain; d0 and the worst level are absorbing."""
    if levels < 2:
        raise InstanceError("need at least two damage levels")
    chain = np.zeros((levels, levels))
    chain[0, 0] = 1.0
    chain[-1, -1] = 1.0
    for k in range(1, levels - 1):
        chain[k, k] = 1.0 - p_worsen
        chain[k, k + 1] = p_worsen
    return chain


def default_costs(levels: int) -> np.ndarray:
    if levels == len(FIVE_LEVEL_COSTS):
        return np.array(FIVE_LEVEL_COSTS)
    # same ladder as the 5-level vector: 0, 0.1, 1, 10, ...
    return np.array([0.0] + [10.0 ** (k - 2) for k in range(1, levels)])


@dataclass(frozen=True, eq=False)
class Topology:
    """Location graph plus per-robot action kinematics.

    ``move[pos, a]`` is the location reached by a single robot taking
    action ``a`` at ``pos`` (``-1`` when the move leaves the pipeline).
    Joint actions for several robots are flattened mixed-radix indices,
    robot 0 being the most significant digit.
    """

    kind: str
    n_locations: int
    n_robots: int
    robot_actions: tuple[str, ...]
    move: np.ndarray
    dist: np.ndarray
    tie_key: np.ndarray
    step_toward: np.ndarray
    left_of: np.ndarray
    right_of: np.ndarray
    neighbors: np.ndarray
    rows: int = 1
    cols: int = 1
    joint: np.ndarray = field(init=False)

    def __post_init__(self):
        n_a = len(self.robot_actions)
        joint = np.array(list(itertools.product(range(n_a), repeat=self.n_robots)), dtype=np.int64)
        object.__setattr__(self, "joint", joint)
        for arr in (self.move, self.dist, self.tie_key, self.step_toward, self.left_of,
                    self.right_of, self.neighbors, joint):
            arr.setflags(write=False)

    @property
    def n_actions(self) -> int:
        return len(self.joint)

    def action_name(self, a: int) -> str:
        return "+".join(self.robot_actions[c] for c in self.joint[a])

    def action_index(self, *components: int) -> int:
        n_a = len(self.robot_actions)
        idx = 0
        for c in components:
            idx = idx * n_a + c
        return idx

    def legal_actions(self, robots) -> list[int]:
        return [a for a in range(self.n_actions)
                if all(self.move[p, c] >= 0 for p, c in zip(robots, self.joint[a]))]

    def legal_mask(self, robots: np.ndarray) -> np.ndarray:
        """Boolean ``(B, n_actions)`` mask for a batch of robot positions ``(B, R)``."""
        ok = np.ones((robots.shape[0], self.n_actions), dtype=bool)
        for r in range(self.n_robots):
            ok &= self.move[robots[:, r][:, None], self.joint[None, :, r]] >= 0
        return ok

    @classmethod
    def linear(cls, n: int, n_robots: int = 1) -> Topology:
        if n < 1:
            raise InstanceError("linear pipeline needs L >= 1")
        pos = np.arange(n)
        move = np.stack([pos, pos - 1, pos + 1], axis=1)
        move[move >= n] = -1
        dist = np.abs(pos[:, None] - pos[None, :])
        tie_key = 2 * dist + (pos[None, :] > pos[:, None])
        step = np.where(pos[None, :] < pos[:, None], 1, np.where(pos[None, :] > pos[:, None], 2, REPAIR))
        left_of = pos[None, :] < pos[:, None]
        right_of = pos[None, :] > pos[:, None]
        nb = np.stack([pos - 1, pos + 1], axis=1)
        nb[nb >= n] = -1
        kind = "linear" if n_robots == 1 else "two_robot_linear"
        return cls(kind, n, n_robots, LINEAR_ACTIONS, move, dist, tie_key, step,
                   left_of, right_of, nb, rows=1, cols=n)

    @classmethod
    def grid(cls, rows: int, cols: int) -> Topology:
        if rows < 1 or cols < 1:
            raise InstanceError("grid needs rows, cols >= 1")
        n = rows * cols
        loc = np.arange(n)
        r, c = loc // cols, loc % cols
        up = np.where(r > 0, loc - cols, -1)
        down = np.where(r < rows - 1, loc + cols, -1)
        left = np.where(c > 0, loc - 1, -1)
        right = np.where(c < cols - 1, loc + 1, -1)
        move = np.stack([loc, up, down, left, right], axis=1)
        dist = np.abs(r[:, None] - r[None, :]) + np.abs(c[:, None] - c[None, :])
        tie_key = dist * n + loc[None, :]
        # horizontal first, then vertical
        step = np.full((n, n), REPAIR)
        step = np.where(r[None, :] > r[:, None], 2, step)
        step = np.where(r[None, :] < r[:, None], 1, step)
        step = np.where(c[None, :] > c[:, None], 4, step)
        step = np.where(c[None, :] < c[:, None], 3, step)
        left_of = c[None, :] < c[:, None]
        right_of = c[None, :] > c[:, None]
        nb = np.stack([up, down, left, right], axis=1)
        return cls("grid", n, 1, GRID_ACTIONS, move, dist, tie_key, step,
                   left_of, right_of, nb, rows=rows, cols=cols)


@dataclass(frozen=True, eq=False)
class PipelineModel:
    """One pipeline repair POMDP instance.

    ``chain[k, j]`` is the per-period probability that an unrepaired
    location at level ``k`` moves to level ``j``. ``costs[k]`` is the
    per-period cost of a location at level ``k``.
    """

    topology: Topology
    chain: np.ndarray
    costs: np.ndarray
    discount: float = 0.99
    damaged_threshold: float = 0.5
    sense_radius: int = 0
    seed: int = 0

    def __post_init__(self):
        chain = np.array(self.chain, dtype=float)
        costs = np.array(self.costs, dtype=float)
        object.__setattr__(self, "chain", chain)
        object.__setattr__(self, "costs", costs)
        validate_chain(chain)
        if costs.shape != (chain.shape[0],):
            raise InstanceError(f"costs has {costs.size} entries, chain has {chain.shape[0]} levels")
        if costs[0] != 0.0:
            raise InstanceError("costs[0] must be 0")
        if np.any(np.diff(costs) <= 0):
            raise InstanceError("costs must be strictly increasing")
        if not 0.0 < self.discount < 1.0:
            raise InstanceError(f"alpha must lie in (0, 1), got {self.discount}")
        if not 0.0 < self.damaged_threshold <= 1.0:
            raise InstanceError("damaged threshold must lie in (0, 1]")
        if self.sense_radius not in (0, 1):
            raise InstanceError("sense_radius must be 0 or 1")
        cum = np.cumsum(chain, axis=1)
        cum[:, -1] = 1.0
        object.__setattr__(self, "chain_cdf", cum)
        for arr in (chain, costs, cum):
            arr.setflags(write=False)

    # convenience constructors -------------------------------------------------
    @classmethod
    def linear(cls, n: int, levels: int = 5, chain=None, costs=None, **kw) -> PipelineModel:
        return cls(Topology.linear(n), _chain(levels, chain), _costs(levels, costs), **kw)

    @classmethod
    def two_robot_linear(cls, n: int, levels: int = 5, chain=None, costs=None, **kw) -> PipelineModel:
        return cls(Topology.linear(n, n_robots=2), _chain(levels, chain), _costs(levels, costs), **kw)

    @classmethod
    def grid(cls, rows: int, cols: int, levels: int = 5, chain=None, costs=None, **kw) -> PipelineModel:
        return cls(Topology.grid(rows, cols), _chain(levels, chain), _costs(levels, costs), **kw)

    # derived quantities ------------------------------------------------------
    @property
    def n_locations(self) -> int:
        return self.topology.n_locations

    @property
    def n_robots(self) -> int:
        return self.topology.n_robots

    @property
    def levels(self) -> int:
        return self.chain.shape[0]

    @property
    def n_actions(self) -> int:
        return self.topology.n_actions

    @property
    def n_states(self) -> int:
        return self.n_locations ** self.n_robots * self.levels ** self.n_locations

    @property
    def max_stage_cost(self) -> float:
        return self.n_locations * float(self.costs[-1])

    @property
    def value_bound(self) -> float:
        """Upper bound on any discounted cost: ``L * c_max / (1 - alpha)``."""
        return self.max_stage_cost / (1.0 - self.discount)

    def sensed_locations(self, robots) -> tuple[int, ...]:
        """Locations observed after the robots arrive at ``robots``.

        Robot order, duplicates removed; with ``sense_radius=1`` the
        neighbors of each robot follow its own location.
        """
        out: list[int] = []
        for p in robots:
            cand = [int(p)]
            if self.sense_radius:
                cand += [int(q) for q in self.topology.neighbors[p] if q >= 0]
            for q in cand:
                if q not in out:
                    out.append(q)
        return tuple(out)


def _chain(levels, chain):
    return default_chain(levels) if chain is None else np.asarray(chain, dtype=float)


def _costs(levels, costs):
    return default_costs(levels) if costs is None else np.asarray(costs, dtype=float)


def validate_chain(chain: np.ndarray) -> None:
    if chain.ndim != 2 or chain.shape[0] != chain.shape[1]:
        raise InstanceError(f"chain must be square, got shape {chain.shape}")
    if np.any(chain < 0):
        row = int(np.argwhere(chain < 0)[0, 0])
        raise InstanceError(f"chain row {row} has a negative entry")
    sums = chain.sum(axis=1)
    for k, s in enumerate(sums):
        if abs(s - 1.0) > ROW_TOL:
            raise InstanceError(f"chain row {k} sums to {s!r}, expected 1")
    if chain[0, 0] != 1.0:
        raise InstanceError("chain row 0 must be a point mass at level 0 (repaired stays repaired)")
