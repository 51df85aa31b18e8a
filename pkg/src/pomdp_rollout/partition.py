"""Six-subset partition of the feature space and its local networks.

Subsets are numbered 1..6::

    1 startgame-left   2 startgame-balanced   3 startgame-right
    4 endgame-left     5 endgame-balanced     6 endgame-right

A state is in the endgame when fewer than half of the locations are
believed damaged. The density ratio ``LD / (LD + RD)`` decides left
(``> 0.7``), right (``< 0.3``) or balanced (closed interval between);
an empty ratio (``LD + RD = 0``) counts as balanced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from .mlp import Mlp
from .pipeline.batch import StateBatch, damaged_mask, densities, encode, terminal_mask
from .pipeline.greedy import greedy_actions
from .pipeline.model import REPAIR, PipelineModel

PHASES = ("startgame", "endgame")
DENSITIES = ("left", "balanced", "right")
LEFT_RATIO = 0.7
RIGHT_RATIO = 0.3
SUBSETS = tuple(range(1, 7))
STARTGAME = (1, 2, 3)
ENDGAME = (4, 5, 6)


@dataclass(frozen=True)
class PartitionId:
    phase: str
    density: str

    @property
    def index(self) -> int:
        return 1 + 3 * PHASES.index(self.phase) + DENSITIES.index(self.density)

    @classmethod
    def from_index(cls, idx: int) -> PartitionId:
        if idx not in SUBSETS:
            raise ValueError(f"partition index must be in 1..6, got {idx}")
        return cls(PHASES[(idx - 1) // 3], DENSITIES[(idx - 1) % 3])

    def __str__(self) -> str:
        return f"{self.phase}-{self.density}"


def endgame_mask(model: PipelineModel, beliefs: np.ndarray) -> np.ndarray:
    count = damaged_mask(model, beliefs).sum(axis=-1)
    return 2 * count < model.n_locations


def density_class(model: PipelineModel, beliefs: np.ndarray, robots: np.ndarray) -> np.ndarray:
    """0 = left, 1 = balanced, 2 = right."""
    ld, rd = densities(model, beliefs, robots)
    tot = ld + rd
    ratio = np.divide(ld, tot, out=np.full_like(tot, 0.5), where=tot > 0)
    return np.where(ratio > LEFT_RATIO, 0, np.where(ratio < RIGHT_RATIO, 2, 1))


def classify_batch(model: PipelineModel, beliefs: np.ndarray, robots: np.ndarray) -> np.ndarray:
    """Subset index 1..6 for every row."""
    robots = np.asarray(robots, dtype=np.int64)
    if robots.ndim == 1:
        robots = robots[:, None]
    return 1 + 3 * endgame_mask(model, beliefs).astype(np.int64) + density_class(model, beliefs, robots)


def classify_index(model: PipelineModel, robots, damage: np.ndarray) -> int:
    return int(classify_batch(model, damage[None], np.array([robots], dtype=np.int64))[0])


def classify(y, model: PipelineModel) -> PartitionId:
    return PartitionId.from_index(classify_index(model, y.robots, y.belief.damage))


class EndgameStop:
    """Truncation predicate: true on endgame (subsets 4-6) states."""

    def __init__(self, model: PipelineModel):
        self.model = model

    def __call__(self, states: StateBatch) -> np.ndarray:
        return endgame_mask(self.model, states.beliefs)


def noop_repair_mask(model: PipelineModel, beliefs: np.ndarray, robots: np.ndarray) -> np.ndarray:
    """``(B, n_actions)``: true where some robot repairs a location known to be at d0.

    Such a component changes nothing, so a deterministic policy choosing it
    can stay in place forever. Terminal rows are never masked.
    """
    topo = model.topology
    b = np.arange(beliefs.shape[0])
    out = np.zeros((beliefs.shape[0], topo.n_actions), dtype=bool)
    for r in range(topo.n_robots):
        healthy = beliefs[b, robots[:, r], 0] >= 1.0
        out |= healthy[:, None] & (topo.joint[None, :, r] == REPAIR)
    out[terminal_mask(beliefs)] = False
    return out


def _frozen(mapping) -> MappingProxyType:
    return MappingProxyType(dict(mapping or {}))


@dataclass(frozen=True, eq=False)
class PartitionedPolicy:
    """Local softmax networks keyed by subset index; greedy where a subset has none.

    The network argmax runs over legal controls that are not no-op repairs
    (see ``noop_repair_mask``).

    Instances are immutable snapshots; ``with_nets`` returns a new one.
    """

    model: PipelineModel
    local: MappingProxyType = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "local", _frozen(self.local))

    def with_nets(self, nets: dict[int, Mlp]) -> PartitionedPolicy:
        merged = dict(self.local)
        merged.update(nets)
        return PartitionedPolicy(self.model, merged)

    def __getstate__(self):
        return {"model": self.model, "local": dict(self.local)}

    def __setstate__(self, state):
        object.__setattr__(self, "model", state["model"])
        object.__setattr__(self, "local", _frozen(state["local"]))

    def __call__(self, states: StateBatch, rngs=None) -> np.ndarray:
        model = self.model
        beliefs, robots = states.beliefs, states.robots
        actions = greedy_actions(model, beliefs, robots)
        if not self.local or len(states) == 0:
            return actions
        ids = classify_batch(model, beliefs, robots)
        legal = model.topology.legal_mask(robots)
        noop = noop_repair_mask(model, beliefs, robots)
        for idx, net in self.local.items():
            rows = np.flatnonzero(ids == idx)
            if rows.size == 0:
                continue
            x = encode(model, beliefs[rows], robots[rows], dtype=np.float32)
            logits = net.infer_logits(x).astype(float)
            allowed = legal[rows] & ~noop[rows]
            allowed[~allowed.any(axis=1)] = legal[rows][~allowed.any(axis=1)]
            logits[~allowed] = -np.inf
            actions[rows] = logits.argmax(axis=1)
        return actions

    def action(self, y) -> int:
        return int(self(StateBatch(y.belief.damage[None], np.array([y.robots])))[0])


def global_action(p: PartitionedPolicy, y) -> int:
    return p.action(y)


@dataclass(frozen=True, eq=False)
class PartitionedValue:
    """Local linear-head networks composed into a terminal cost approximation.

    Network outputs are multiplied by the per-subset ``scales`` entry
    (targets are standardized for training), forced to 0 at terminal
    beliefs, and clamped to ``[0, L c_max / (1 - alpha)]``. Subsets
    without a network evaluate to 0.
    """

    model: PipelineModel
    local: MappingProxyType = field(default_factory=dict)
    scales: MappingProxyType = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "local", _frozen(self.local))
        object.__setattr__(self, "scales", _frozen(self.scales))

    def with_nets(self, nets: dict[int, Mlp], scales: dict[int, float]) -> PartitionedValue:
        local, sc = dict(self.local), dict(self.scales)
        local.update(nets)
        sc.update(scales)
        return PartitionedValue(self.model, local, sc)

    def __getstate__(self):
        return {"model": self.model, "local": dict(self.local), "scales": dict(self.scales)}

    def __setstate__(self, state):
        object.__setattr__(self, "model", state["model"])
        object.__setattr__(self, "local", _frozen(state["local"]))
        object.__setattr__(self, "scales", _frozen(state["scales"]))

    def __call__(self, states: StateBatch) -> np.ndarray:
        model = self.model
        out = np.zeros(len(states))
        if not self.local or len(states) == 0:
            return out
        beliefs, robots = states.beliefs, states.robots
        ids = classify_batch(model, beliefs, robots)
        ids[terminal_mask(beliefs)] = 0
        for idx, net in self.local.items():
            rows = np.flatnonzero(ids == idx)
            if rows.size == 0:
                continue
            x = encode(model, beliefs[rows], robots[rows], dtype=np.float32)
            out[rows] = net.infer_logits(x)[:, 0].astype(float) * self.scales.get(idx, 1.0)
        return np.clip(out, 0.0, model.value_bound)

    def value(self, y) -> float:
        return float(self(StateBatch(y.belief.damage[None], np.array([y.robots])))[0])


def global_value(v: PartitionedValue, y) -> float:
    return v.value(y)
