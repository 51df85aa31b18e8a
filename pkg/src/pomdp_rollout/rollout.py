"""Truncated rollout with terminal cost approximation.

A rollout control at ``y`` minimizes over legal ``u``::

    q(y, u) = g(y) + alpha * sum_z p(z | b_y, u) * V(F(y, u, z))

with the observation branch enumerated exactly. For one-step lookahead
``V`` is the Monte-Carlo estimate of running the base policy from the leaf
for ``m`` steps and adding ``J_hat`` at the truncation point; for deeper
lookahead ``V`` is itself a min over controls, recursively.

Randomness is organized per *owner*: every top-level state owns one
``numpy.random.Generator``. Each simulation step draws one ``(slots, L+2)``
block of uniforms from each active owner, and a simulated trajectory reads
the row of its slot. With common random numbers the slot is the
trajectory index, so trajectory ``t`` sees identical noise under every
control and observation branch.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core.graph import argmin_ties
from .pipeline import batch as K
from .pipeline.batch import StateBatch
from .pipeline.model import PipelineModel


@dataclass
class RolloutConfig:
    """``steps=None`` selects adaptive truncation: a trajectory ends at a
    terminal belief, once ``alpha^k * L * c_max < eps``, or after
    ``max_steps``. ``stop_when`` marks states where the trajectory is
    cut and ``terminal_cost`` is charged (state-dependent truncation).
    """

    base_policy: Callable
    lookahead: int = 1
    steps: int | None = None
    eps: float = 1e-3
    max_steps: int = 400
    trajectories_per_leaf: int = 10
    terminal_cost: Callable | None = None
    stop_when: Callable | None = None
    exact: bool = False
    crn: bool = True
    retain_prob: float = 0.0

    def __post_init__(self):
        if self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")
        if self.trajectories_per_leaf < 1:
            raise ValueError("trajectories_per_leaf must be >= 1")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps is None and self.eps <= 0:
            raise ValueError("adaptive truncation needs eps > 0")
        if self.stop_when is not None and self.terminal_cost is None:
            raise ValueError("stop_when requires a terminal_cost")


@dataclass
class Retained:
    """States seen along simulated trajectories, kept with ``retain_prob``."""

    states: StateBatch
    keys: np.ndarray
    owners: np.ndarray


@dataclass
class RolloutResult:
    actions: np.ndarray
    q: np.ndarray
    retained: Retained | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# Monte-Carlo simulation of the base policy


def simulate(model: PipelineModel, start: StateBatch, owner: np.ndarray, slot: np.ndarray,
             gens, n_slots, cfg: RolloutConfig, collect: bool = False, policy_rngs=None):
    """Discounted truncated return for every start row.

    ``owner[r]`` indexes ``gens``; ``slot[r] < n_slots[owner[r]]`` selects
    the uniform row. ``policy_rngs``, if given, holds one generator per
    row for randomized base policies. Returns ``(values, Retained | None)``.
    """
    n_rows = len(start)
    L = model.n_locations
    alpha = model.discount
    out = np.zeros(n_rows)
    n_slots = np.asarray(n_slots, dtype=np.int64)
    n_owners = len(gens)
    if n_rows == 0:
        return out, None

    offsets = np.zeros(n_owners, dtype=np.int64)

    def draw(active_owner):
        live = np.unique(active_owner)
        blocks = []
        pos = 0
        for o in live:
            offsets[o] = pos
            blocks.append(gens[o].random((n_slots[o], L + 2)))
            pos += n_slots[o]
        return np.concatenate(blocks)

    idx = np.arange(n_rows)
    beliefs = start.beliefs.copy()
    robots = start.robots.copy()
    U = draw(owner)
    u_rows = U[offsets[owner] + slot]
    levels = K.sample_levels(beliefs, u_rows[:, :L])

    kept_b, kept_r, kept_k, kept_o = [], [], [], []
    disc = 1.0
    tail_scale = model.max_stage_cost
    J_hat = cfg.terminal_cost

    def charge(mask):
        if mask.any() and J_hat is not None:
            out[idx[mask]] += disc * J_hat(StateBatch(beliefs[mask], robots[mask]))

    for k in range(cfg.max_steps):
        drop = K.terminal_mask(beliefs)
        if cfg.steps is not None and k == cfg.steps:
            charge(~drop)
            idx = idx[:0]
            break
        if cfg.stop_when is not None:
            stop = ~drop & cfg.stop_when(StateBatch(beliefs, robots))
            charge(stop)
            drop |= stop
        if J_hat is None:
            drop |= np.all(levels == 0, axis=1)
        if cfg.steps is None and disc * tail_scale < cfg.eps:
            charge(~drop)
            idx = idx[:0]
            break
        if drop.any():
            keep = ~drop
            idx, beliefs, robots, levels = idx[keep], beliefs[keep], robots[keep], levels[keep]
        if idx.size == 0:
            break

        states = StateBatch(beliefs, robots)
        rngs = None if policy_rngs is None else [policy_rngs[i] for i in idx]
        actions = cfg.base_policy(states, rngs)
        out[idx] += disc * model.costs[levels].sum(axis=1)

        row_owner = owner[idx]
        U = draw(row_owner)
        u_rows = U[offsets[row_owner] + slot[idx]]
        if collect:
            keep = u_rows[:, L] < cfg.retain_prob
            if keep.any():
                kept_b.append(beliefs[keep])
                kept_r.append(robots[keep])
                kept_k.append(u_rows[keep, L + 1])
                kept_o.append(row_owner[keep])

        beliefs, _ = K.apply_action(model, beliefs, robots, actions)
        levels, robots, _ = K.env_step(model, levels, robots, actions, u_rows[:, :L])
        K.sense(model, beliefs, robots, levels)
        disc *= alpha
    else:
        if idx.size:
            charge(np.ones(idx.size, dtype=bool))

    retained = None
    if collect:
        if kept_b:
            retained = Retained(StateBatch(np.concatenate(kept_b), np.concatenate(kept_r)),
                                np.concatenate(kept_k), np.concatenate(kept_o))
        else:
            retained = Retained(StateBatch.empty(model), np.zeros(0), np.zeros(0, dtype=np.int64))
    return out, retained


# ---------------------------------------------------------------------------
# Observation-branch expansion


def expand(model: PipelineModel, states: StateBatch, only_action: int | None = None):
    """All (state, legal action, observation) children.

    Returns ``(parent, action, prob, children)`` with one entry per
    positive-probability observation.
    """
    topo = model.topology
    legal = topo.legal_mask(states.robots)
    if only_action is not None:
        if not legal[:, only_action].all():
            raise ValueError(f"action {topo.action_name(only_action)} is illegal")
        legal = np.zeros_like(legal)
        legal[:, only_action] = True
    parent, action = np.nonzero(legal)
    pred, new_robots = K.apply_action(model, states.beliefs[parent], states.robots[parent], action)

    table = K.sensed_table(model)
    cols = [table[new_robots[:, r]] for r in range(model.n_robots)]
    sensed = np.concatenate(cols, axis=1)
    # blank out repeated locations so each is observed once
    for j in range(1, sensed.shape[1]):
        dup = (sensed[:, :j] == sensed[:, j:j + 1]).any(axis=1)
        sensed[dup, j] = -1

    n_pairs, S = sensed.shape
    rows = np.arange(n_pairs)
    out_parent, out_action, out_prob, out_beliefs, out_robots = [], [], [], [], []
    for combo in itertools.product(range(model.levels), repeat=S):
        prob = np.ones(n_pairs)
        for j, z in enumerate(combo):
            loc = sensed[:, j]
            valid = loc >= 0
            pz = np.where(valid, pred[rows, np.maximum(loc, 0), z], 1.0 if z == 0 else 0.0)
            prob = prob * pz
        ok = prob > 0
        if not ok.any():
            continue
        child = pred[ok].copy()
        sub = np.flatnonzero(ok)
        for j, z in enumerate(combo):
            loc = sensed[ok, j]
            valid = loc >= 0
            child[valid.nonzero()[0], loc[valid]] = 0.0
            child[valid.nonzero()[0], loc[valid], z] = 1.0
        out_parent.append(parent[sub])
        out_action.append(action[sub])
        out_prob.append(prob[sub])
        out_beliefs.append(child)
        out_robots.append(new_robots[sub])
    order_parent = np.concatenate(out_parent)
    order_action = np.concatenate(out_action)
    # group children by (parent, action) deterministically
    perm = np.lexsort((np.concatenate([np.full(len(p), i) for i, p in enumerate(out_parent)]),
                       order_action, order_parent))
    children = StateBatch(np.concatenate(out_beliefs)[perm], np.concatenate(out_robots)[perm])
    return order_parent[perm], order_action[perm], np.concatenate(out_prob)[perm], children


# ---------------------------------------------------------------------------
# Leaf values


def _leaf_values_mc(model, leaves: StateBatch, leaf_owner, gens, cfg, collect):
    n_traj = cfg.trajectories_per_leaf
    n_leaves = len(leaves)
    term = K.terminal_mask(leaves.beliefs)
    live = np.flatnonzero(~term)
    values = np.zeros(n_leaves)
    rows_leaf = np.repeat(live, n_traj)
    start = leaves.take(rows_leaf)
    owner = leaf_owner[rows_leaf]
    if cfg.crn:
        slot = np.tile(np.arange(n_traj), live.size)
        n_slots = np.full(len(gens), n_traj)
    else:
        # independent sampling: every row of an owner gets its own slot
        slot = np.zeros(len(rows_leaf), dtype=np.int64)
        n_slots = np.zeros(len(gens), dtype=np.int64)
        for o in range(len(gens)):
            m = owner == o
            slot[m] = np.arange(m.sum())
            n_slots[o] = max(int(m.sum()), 1)
    ret, retained = simulate(model, start, owner, slot, gens, n_slots, cfg, collect=collect)
    if live.size:
        values[live] = ret.reshape(live.size, n_traj).mean(axis=1)
    return values, retained


class _ExactEvaluator:
    """Exact expectation of the truncated return by enumerating observations."""

    def __init__(self, model: PipelineModel, cfg: RolloutConfig):
        self.model = model
        self.cfg = cfg
        self.memo: dict = {}

    def value(self, beliefs: np.ndarray, robots: np.ndarray, k: int = 0) -> float:
        key = (tuple(robots.tolist()), tuple(np.round(beliefs, 12).ravel().tolist()), k)
        if key in self.memo:
            return self.memo[key]
        v = self._value(beliefs, robots, k)
        self.memo[key] = v
        return v

    def _jhat(self, b, r):
        if self.cfg.terminal_cost is None:
            return 0.0
        return float(self.cfg.terminal_cost(StateBatch(b[None], r[None]))[0])

    def _value(self, b, r, k):
        cfg, model = self.cfg, self.model
        if K.terminal_mask(b[None])[0]:
            return 0.0
        if cfg.steps is not None and k == cfg.steps:
            return self._jhat(b, r)
        if cfg.stop_when is not None and cfg.stop_when(StateBatch(b[None], r[None]))[0]:
            return self._jhat(b, r)
        if k >= cfg.max_steps or (cfg.steps is None and model.discount ** k * model.max_stage_cost < cfg.eps):
            return self._jhat(b, r)
        state = StateBatch(b[None], r[None])
        u = int(cfg.base_policy(state, None)[0])
        g = float(K.expected_stage_cost(model, b[None])[0])
        _, _, prob, children = expand(model, state, only_action=u)
        cont = sum(p * self.value(children.beliefs[i], children.robots[i], k + 1)
                   for i, p in enumerate(prob))
        return g + model.discount * cont


def _leaf_values_exact(model, leaves: StateBatch, cfg):
    ev = _ExactEvaluator(model, cfg)
    return np.array([ev.value(leaves.beliefs[i], leaves.robots[i]) for i in range(len(leaves))])


# ---------------------------------------------------------------------------
# Lookahead


def _q_matrix(model, states: StateBatch, owner, gens, cfg, depth, collect, only_action=None):
    n = len(states)
    A = model.n_actions
    q = np.full((n, A), np.inf)
    if n == 0:
        return q, []
    parent, action, prob, children = expand(model, states, only_action)
    child_owner = owner[parent]
    retained = []
    if depth == 1:
        if cfg.exact:
            vals = _leaf_values_exact(model, children, cfg)
        else:
            vals, ret = _leaf_values_mc(model, children, child_owner, gens, cfg, collect)
            if ret is not None:
                retained.append(ret)
    else:
        vals = np.zeros(len(children))
        live = np.flatnonzero(~K.terminal_mask(children.beliefs))
        qc, ret = _q_matrix(model, children.take(live), child_owner[live], gens, cfg, depth - 1, collect)
        retained += ret
        if live.size:
            vals[live] = qc[np.arange(live.size), argmin_ties(qc)]
    g = K.expected_stage_cost(model, states.beliefs)
    pair = parent * A + action
    sums = np.zeros(n * A)
    np.add.at(sums, pair, prob * vals)
    legal = np.zeros(n * A, dtype=bool)
    legal[pair] = True
    flat = q.reshape(-1)
    flat[legal] = np.repeat(g, A)[legal] + model.discount * sums[legal]
    return q, retained


def rollout_actions(model: PipelineModel, states: StateBatch, cfg: RolloutConfig, gens,
                    collect: bool = False) -> RolloutResult:
    """Rollout control for every state; ``gens[i]`` is state ``i``'s random stream.

    Terminal states get action 0 (repair, harmless) without simulation.
    """
    n = len(states)
    actions = np.zeros(n, dtype=np.int64)
    q = np.zeros((n, model.n_actions))
    live = np.flatnonzero(~K.terminal_mask(states.beliefs))
    owner = np.arange(n)
    qm, ret = _q_matrix(model, states.take(live), owner[live], gens, cfg, cfg.lookahead,
                        collect and cfg.retain_prob > 0)
    if live.size:
        actions[live] = argmin_ties(qm)
        q[live] = qm
    legal = model.topology.legal_mask(states.robots)
    q[~legal] = np.inf
    retained = None
    if collect:
        parts = [r for r in ret if len(r.states)]
        if parts:
            retained = Retained(StateBatch.concat(r.states for r in parts),
                                np.concatenate([r.keys for r in parts]),
                                np.concatenate([r.owners for r in parts]))
        else:
            retained = Retained(StateBatch.empty(model), np.zeros(0), np.zeros(0, dtype=np.int64))
    return RolloutResult(actions, q, retained)


def _single(y) -> StateBatch:
    return StateBatch(y.belief.damage[None], np.array([y.robots], dtype=np.int64))


def rollout_return(model: PipelineModel, y, cfg: RolloutConfig, rng: np.random.Generator) -> float:
    """Estimated truncated cost of the base policy from ``y`` (no lookahead)."""
    leaves = _single(y)
    if cfg.exact:
        return float(_leaf_values_exact(model, leaves, cfg)[0])
    vals, _ = _leaf_values_mc(model, leaves, np.zeros(1, dtype=np.int64), [rng], cfg, False)
    return float(vals[0])


def q_value(model: PipelineModel, y, u: int, cfg: RolloutConfig, rng: np.random.Generator) -> float:
    q, _ = _q_matrix(model, _single(y), np.zeros(1, dtype=np.int64), [rng], cfg, cfg.lookahead,
                     False, only_action=u)
    return float(q[0, u])


def rollout_action(model: PipelineModel, y, cfg: RolloutConfig, rng: np.random.Generator) -> int:
    return int(rollout_actions(model, _single(y), cfg, [rng]).actions[0])


class RolloutPolicy:
    """The rollout policy as a batch policy.

    ``rngs`` (one generator per row) must be supplied by the caller;
    ``chunk`` bounds the number of states simulated together.
    """

    def __init__(self, model: PipelineModel, cfg: RolloutConfig, chunk: int = 64):
        self.model = model
        self.cfg = cfg
        self.chunk = chunk

    def __call__(self, states: StateBatch, rngs=None) -> np.ndarray:
        if rngs is None:
            raise ValueError("RolloutPolicy needs one generator per state")
        out = np.zeros(len(states), dtype=np.int64)
        for s in range(0, len(states), self.chunk):
            sl = slice(s, s + self.chunk)
            out[sl] = rollout_actions(self.model, states.take(np.arange(len(states))[sl]),
                                      self.cfg, rngs[sl]).actions
        return out
