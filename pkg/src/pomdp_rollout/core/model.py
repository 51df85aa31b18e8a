"""Finite POMDP with explicit transition, cost and observation tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_TOL = 1e-12
BELIEF_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PomdpModel:
    """``trans[u, i, j] = p_ij(u)``, ``stage_cost[u, i, j] = g(i, u, j)``,
    ``obs_probs[u, j, z] = p(z | j, u)``.
    """

    trans: np.ndarray
    stage_cost: np.ndarray
    obs_probs: np.ndarray
    discount: float

    def __post_init__(self):
        trans = np.asarray(self.trans, dtype=float)
        cost = np.broadcast_to(np.asarray(self.stage_cost, dtype=float), trans.shape).copy()
        obs = np.asarray(self.obs_probs, dtype=float)
        if trans.ndim != 3 or trans.shape[1] != trans.shape[2]:
            raise ValueError("trans must have shape (U, n, n)")
        if obs.ndim != 3 or obs.shape[:2] != trans.shape[:2]:
            raise ValueError("obs_probs must have shape (U, n, Z)")
        if np.any(trans < 0) or np.any(obs < 0):
            raise ValueError("negative probabilities")
        bad = np.argwhere(np.abs(trans.sum(axis=2) - 1.0) > NORM_TOL)
        if bad.size:
            u, i = bad[0]
            raise ValueError(f"transition row (u={u}, i={i}) does not sum to 1")
        bad = np.argwhere(np.abs(obs.sum(axis=2) - 1.0) > NORM_TOL)
        if bad.size:
            u, j = bad[0]
            raise ValueError(f"observation distribution (u={u}, j={j}) does not sum to 1")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        for name, arr in (("trans", trans), ("stage_cost", cost), ("obs_probs", obs)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.trans.shape[1]

    @property
    def n_controls(self) -> int:
        return self.trans.shape[0]

    @property
    def n_obs(self) -> int:
        return self.obs_probs.shape[2]


def _check_belief(b) -> np.ndarray:
    b = np.asarray(getattr(b, "belief", b), dtype=float)
    if np.any(b < -BELIEF_TOL) or abs(b.sum() - 1.0) > BELIEF_TOL:
        raise ValueError(f"belief is not a distribution (sum {b.sum()!r})")
    return b


def expected_stage_cost(b, u: int, model: PomdpModel) -> float:
    """``sum_i b(i) sum_j p_ij(u) g(i, u, j)``."""
    b = _check_belief(b)
    return float(b @ (model.trans[u] * model.stage_cost[u]).sum(axis=1))


def obs_likelihood(b, u: int, model: PomdpModel) -> np.ndarray:
    """``p(z | b, u) = sum_i b(i) sum_j p_ij(u) p(z | j, u)``."""
    b = _check_belief(b)
    return (b @ model.trans[u]) @ model.obs_probs[u]


def bayes_update(b, u: int, z: int, model: PomdpModel) -> np.ndarray:
    b = _check_belief(b)
    joint = (b @ model.trans[u]) * model.obs_probs[u][:, z]
    total = joint.sum()
    if total <= 0:
        raise ValueError(f"observation {z} has zero probability")
    return joint / total


class FlatProblem:
    """Feature-graph adapter where the feature state is the belief vector itself."""

    def __init__(self, model: PomdpModel, key_decimals: int = 12):
        self.model = model
        self.discount = model.discount
        self.n_controls = model.n_controls
        self.key_decimals = key_decimals

    def controls(self, b) -> list[int]:
        return list(range(self.model.n_controls))

    def stage_cost(self, b, u) -> float:
        return expected_stage_cost(b, u, self.model)

    def transitions(self, b, u):
        pz = obs_likelihood(b, u, self.model)
        return [(float(pz[z]), bayes_update(b, u, z, self.model))
                for z in np.flatnonzero(pz > 0)]

    def key(self, b):
        return tuple(np.round(np.asarray(b), self.key_decimals).tolist())

    def is_terminal(self, b) -> bool:
        return False
