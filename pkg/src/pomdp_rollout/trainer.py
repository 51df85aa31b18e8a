"""Partitioned approximate policy iteration.

One iteration labels states of every partition subset with rollout
controls of the current policy, fits one policy network per subset, and
(in truncated mode) fits value networks used as terminal costs.

Every random draw comes from a stream keyed by ``(seed, purpose, ...)``
through ``numpy.random.SeedSequence`` spawn keys, and work is split into
fixed-size chunks, so results do not depend on the number of workers.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import mlp
from .partition import (ENDGAME, STARTGAME, SUBSETS, EndgameStop, PartitionedPolicy,
                        PartitionedValue, PartitionId, classify_batch)
from .pipeline import batch as K
from .pipeline.batch import StateBatch
from .pipeline.model import PipelineModel
from .rollout import Retained, RolloutConfig, RolloutPolicy, rollout_actions, simulate

# stream purposes
FRESH, LABEL, VALUE, EVAL_STATES, EVAL_ENV, EVAL_POLICY, TRAIN, REPLAY = range(1, 9)

RETAIN_PROB = 0.1
MAX_ATTEMPTS_FACTOR = 10_000
EVAL_MAX_STEPS = 1500


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


class SubsetUnreachable(RuntimeError):
    pass


class IterationFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Fresh state generation


@dataclass(frozen=True)
class StateSampler:
    """Random feature states.

    A believed-damaged location gets either a known level (``known_frac``)
    or a random belief with ``P(d0) < threshold``. Other locations are
    known healthy, except a fraction ``uncertain_healthy`` that gets a
    random belief with ``P(d0) >= threshold``; such rows can flip back to
    damaged on observation, so it defaults to 0. Locations under a robot
    are always known.
    """

    known_frac: float = 0.5
    uncertain_healthy: float = 0.0

    def candidates(self, model: PipelineModel, n: int, phase: str, rng) -> StateBatch:
        L, Kl, R = model.n_locations, model.levels, model.n_robots
        thr = model.damaged_threshold
        # endgame: 2*count < L
        hi_end = (L - 1) // 2
        if phase == "startgame":
            counts = rng.integers(hi_end + 1, L + 1, size=n)
        else:
            counts = rng.integers(0 if self.uncertain_healthy > 0 else 1, hi_end + 1, size=n)
        robots = rng.integers(0, L, size=(n, R))
        ranks = np.argsort(rng.random((n, L)), axis=1).argsort(axis=1)
        damaged = ranks < counts[:, None]

        beliefs = np.zeros((n, L, Kl))
        beliefs[:, :, 0] = 1.0
        known = rng.random((n, L)) < self.known_frac
        level = rng.integers(1, Kl, size=(n, L))
        mass = rng.dirichlet(np.ones(Kl - 1), size=(n, L))
        p0 = rng.random((n, L)) * thr
        spread = np.concatenate([p0[..., None], (1 - p0)[..., None] * mass], axis=2)
        rows = damaged & ~known
        beliefs[rows] = spread[rows]
        rows = damaged & known
        beliefs[rows] = 0.0
        beliefs[rows, level[rows]] = 1.0

        if self.uncertain_healthy > 0:
            flip = ~damaged & (rng.random((n, L)) < self.uncertain_healthy)
            q0 = thr + (1 - thr) * rng.random((n, L))
            alt = np.concatenate([q0[..., None], (1 - q0)[..., None] * mass], axis=2)
            beliefs[flip] = alt[flip]

        # robot locations are observed
        b = np.arange(n)
        for r in range(R):
            loc = robots[:, r]
            lv = np.where(damaged[b, loc], level[b, loc], 0)
            beliefs[b, loc] = 0.0
            beliefs[b, loc, lv] = 1.0
        return StateBatch(beliefs, robots)


def fresh_states(model: PipelineModel, subset: int, count: int, rng,
                 sampler: StateSampler = StateSampler()) -> StateBatch:
    """``count`` states that classify to ``subset``, by rejection."""
    phase = PartitionId.from_index(subset).phase
    parts, have, attempts = [], 0, 0
    cap = MAX_ATTEMPTS_FACTOR * count
    batch = max(256, 4 * count)
    while have < count:
        if attempts >= cap:
            raise SubsetUnreachable(
                f"subset {subset} ({PartitionId.from_index(subset)}): {have}/{count} states "
                f"after {attempts} attempts")
        n = min(batch, cap - attempts)
        cand = sampler.candidates(model, n, phase, rng)
        attempts += n
        ok = np.flatnonzero(classify_batch(model, cand.beliefs, cand.robots) == subset)
        ok = ok[:count - have]
        if ok.size:
            parts.append(cand.take(ok))
            have += ok.size
    return StateBatch.concat(parts)


class ReplayBuffer:
    """States retained from simulated trajectories, bounded per subset.

    Each state carries a uniform priority key; a subset keeps its
    ``capacity`` smallest keys, which is a uniform reservoir sample of
    everything offered (ties by insertion order).
    """

    def __init__(self, model: PipelineModel, capacity: int = 50_000):
        self.model = model
        self.capacity = capacity
        self.store: dict[int, tuple[StateBatch, np.ndarray]] = {
            s: (StateBatch.empty(model), np.zeros(0)) for s in SUBSETS}

    def __len__(self) -> int:
        return sum(len(v[0]) for v in self.store.values())

    def count(self, subset: int) -> int:
        return len(self.store[subset][0])

    def add(self, states: StateBatch, keys: np.ndarray) -> None:
        if len(states) == 0:
            return
        ids = classify_batch(self.model, states.beliefs, states.robots)
        live = ~K.terminal_mask(states.beliefs)
        for s in SUBSETS:
            rows = np.flatnonzero((ids == s) & live)
            if rows.size == 0:
                continue
            old, old_keys = self.store[s]
            merged = StateBatch.concat([old, states.take(rows)])
            mkeys = np.concatenate([old_keys, keys[rows]])
            order = np.argsort(mkeys, kind="stable")[:self.capacity]
            self.store[s] = (merged.take(order), mkeys[order])

    def sample(self, subset: int, n: int, rng) -> StateBatch:
        states, _ = self.store[subset]
        if n > len(states):
            raise ValueError(f"buffer holds {len(states)} states of subset {subset}, asked {n}")
        return states.take(np.sort(rng.choice(len(states), size=n, replace=False)))


def _visit_chunk(task):
    lo, hi, beliefs, robots, key = task
    model, cfg, seed = _CTX["model"], _CTX["cfg"], _CTX["seed"]
    n = hi - lo
    gens = [stream(seed, REPLAY, *key, i) for i in range(lo, hi)]
    _, ret = simulate(model, StateBatch(beliefs, robots), np.arange(n), np.zeros(n, dtype=np.int64),
                      gens, np.ones(n, dtype=np.int64), cfg, collect=True)
    return ret.states.beliefs, ret.states.robots, ret.keys


def collect_visited(model: PipelineModel, policy, buffer: ReplayBuffer, n_starts: int, seed: int,
                    key=(0,), eps: float = 1e-3, max_steps: int = 400, workers: int = 1,
                    chunk: int = 256, sampler: StateSampler = StateSampler()) -> int:
    """Run ``policy`` from fresh startgame states and retain visited states.

    Each visited state enters ``buffer`` with probability ``RETAIN_PROB``.
    Returns the number of states offered.
    """
    rng = stream(seed, REPLAY, *key)
    sizes = [n_starts // 3 + (1 if i < n_starts % 3 else 0) for i in range(3)]
    starts = StateBatch.concat([fresh_states(model, s, n, rng, sampler)
                                for s, n in zip(STARTGAME, sizes) if n])
    cfg = RolloutConfig(base_policy=policy, steps=None, eps=eps, max_steps=max_steps,
                        retain_prob=RETAIN_PROB)
    tasks = [(lo, hi, starts.beliefs[lo:hi], starts.robots[lo:hi], tuple(key))
             for lo, hi in _chunks(len(starts), chunk)]
    out = run_chunks(_visit_chunk, {"model": model, "cfg": cfg, "seed": seed}, tasks, workers)
    total = 0
    for b, r, k in out:
        buffer.add(StateBatch(b, r), k)
        total += len(k)
    return total


def generate_states(model: PipelineModel, subset: int, count: int, rng,
                    buffer: ReplayBuffer | None = None, mix: float | None = None,
                    sampler: StateSampler = StateSampler()):
    """Fresh states of ``subset`` blended with buffer replays.

    ``mix`` is the buffer fraction; by default as much as the buffer can
    supply, at most one half. Returns ``(states, from_buffer mask)``.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    avail = buffer.count(subset) if buffer is not None else 0
    if mix is None:
        mix = min(0.5, avail / count)
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    n_buf = min(int(mix * count), avail)
    fresh = fresh_states(model, subset, count - n_buf, rng, sampler) if count > n_buf else None
    parts, tags = [], []
    if fresh is not None:
        parts.append(fresh)
        tags.append(np.zeros(len(fresh), dtype=bool))
    if n_buf:
        parts.append(buffer.sample(subset, n_buf, rng))
        tags.append(np.ones(n_buf, dtype=bool))
    return StateBatch.concat(parts), np.concatenate(tags)


# ---------------------------------------------------------------------------
# Worker pool

_CTX: dict = {}


def _set_ctx(ctx):
    _CTX.clear()
    _CTX.update(ctx)


def run_chunks(fn, ctx: dict, tasks: list, workers: int = 1) -> list:
    """``[fn(task) for task in tasks]`` with ``ctx`` installed as worker context."""
    if workers <= 1 or len(tasks) <= 1:
        saved = dict(_CTX)
        _set_ctx(ctx)
        try:
            return [fn(t) for t in tasks]
        finally:
            _set_ctx(saved)
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks)), initializer=_set_ctx,
                             initargs=(ctx,)) as pool:
        return list(pool.map(fn, tasks))


def _chunks(n: int, size: int):
    return [(s, min(s + size, n)) for s in range(0, n, size)]


# ---------------------------------------------------------------------------
# Labels


@dataclass
class SampleSet:
    states: StateBatch
    labels: np.ndarray
    subsets: np.ndarray
    from_buffer: np.ndarray
    q: np.ndarray | None = field(default=None, repr=False)

    def counts(self) -> dict[int, int]:
        return {s: int((self.subsets == s).sum()) for s in SUBSETS}

    def subset(self, s: int) -> SampleSet:
        rows = np.flatnonzero(self.subsets == s)
        return SampleSet(self.states.take(rows), self.labels[rows], self.subsets[rows],
                         self.from_buffer[rows], None if self.q is None else self.q[rows])


def _label_chunk(task):
    lo, hi, beliefs, robots, key = task
    model, cfg, seed = _CTX["model"], _CTX["cfg"], _CTX["seed"]
    gens = [stream(seed, LABEL, *key, i) for i in range(lo, hi)]
    try:
        res = rollout_actions(model, StateBatch(beliefs, robots), cfg, gens, collect=True)
    except Exception as exc:
        raise RuntimeError(f"labeling states {lo}..{hi - 1} (stream {key}): {exc}") from exc
    ret = res.retained
    return res.actions, res.q, ret.states.beliefs, ret.states.robots, ret.keys


def label_samples(model: PipelineModel, states: StateBatch, cfg: RolloutConfig, seed: int,
                  key=(0,), workers: int = 1, chunk: int = 64, from_buffer=None):
    """Rollout labels for ``states``; returns ``(SampleSet, Retained)``.

    State ``i`` draws from stream ``(seed, LABEL, *key, i)``. Trajectory
    states are retained with ``cfg.retain_prob``.
    """
    tasks = [(lo, hi, states.beliefs[lo:hi], states.robots[lo:hi], tuple(key))
             for lo, hi in _chunks(len(states), chunk)]
    out = run_chunks(_label_chunk, {"model": model, "cfg": cfg, "seed": seed}, tasks, workers)
    n = len(states)
    labels = np.concatenate([o[0] for o in out]) if out else np.zeros(0, dtype=np.int64)
    q = np.concatenate([o[1] for o in out]) if out else np.zeros((0, model.n_actions))
    if out:
        kept = StateBatch(np.concatenate([o[2] for o in out]), np.concatenate([o[3] for o in out]))
        keys = np.concatenate([o[4] for o in out])
    else:
        kept, keys = StateBatch.empty(model), np.zeros(0)
    subsets = classify_batch(model, states.beliefs, states.robots)
    fb = np.zeros(n, dtype=bool) if from_buffer is None else np.asarray(from_buffer, dtype=bool)
    return SampleSet(states, labels, subsets, fb, q), Retained(kept, keys, np.zeros(len(keys), dtype=np.int64))


# ---------------------------------------------------------------------------
# Local networks


def _train_cfg(base: mlp.TrainConfig, seed: int, *key) -> mlp.TrainConfig:
    return replace(base, seed=int(stream(seed, TRAIN, *key).integers(2**63)))


def train_local_policy(model: PipelineModel, samples: SampleSet, cfg: mlp.TrainConfig,
                       seed: int = 0, key=(0,)):
    """Fit a softmax network to one-hot rollout labels; returns ``(net, accuracy, losses)``."""
    if len(samples.labels) == 0:
        raise ValueError("no samples to train on")
    x = K.encode(model, samples.states.beliefs, samples.states.robots)
    y = np.eye(model.n_actions)[samples.labels]
    net = mlp.policy_net(x.shape[1], model.n_actions, stream(seed, TRAIN, *key, 0))
    net, losses = mlp.train(net, x, y, _train_cfg(cfg, seed, *key, 1))
    logits = net.logits(x)
    legal = model.topology.legal_mask(samples.states.robots)
    logits[~legal] = -np.inf
    acc = float((logits.argmax(axis=1) == samples.labels).mean())
    return net, acc, losses


def value_targets(model: PipelineModel, states: StateBatch, policy, seed: int, key=(0,),
                  eps: float = 1e-3, max_steps: int = EVAL_MAX_STEPS, workers: int = 1,
                  chunk: int = 256) -> np.ndarray:
    """One Monte-Carlo discounted return of ``policy`` per state (0 at terminal states)."""
    cfg = RolloutConfig(base_policy=policy, steps=None, eps=eps, max_steps=max_steps)
    tasks = [(lo, hi, states.beliefs[lo:hi], states.robots[lo:hi], tuple(key))
             for lo, hi in _chunks(len(states), chunk)]
    out = run_chunks(_value_chunk, {"model": model, "cfg": cfg, "seed": seed}, tasks, workers)
    return np.concatenate(out) if out else np.zeros(0)


def _value_chunk(task):
    lo, hi, beliefs, robots, key = task
    model, cfg, seed = _CTX["model"], _CTX["cfg"], _CTX["seed"]
    n = hi - lo
    gens = [stream(seed, VALUE, *key, i) for i in range(lo, hi)]
    vals, _ = simulate(model, StateBatch(beliefs, robots), np.arange(n), np.zeros(n, dtype=np.int64),
                       gens, np.ones(n, dtype=np.int64), cfg)
    vals[K.terminal_mask(beliefs)] = 0.0
    return vals


def train_local_value(model: PipelineModel, states: StateBatch, targets: np.ndarray,
                      cfg: mlp.TrainConfig, seed: int = 0, key=(0,)):
    """Fit a linear-head network to standardized returns; returns ``(net, scale, losses)``."""
    if len(states) == 0:
        raise ValueError("no samples to train on")
    scale = float(np.std(targets))
    if not np.isfinite(scale) or scale <= 0:
        scale = max(float(np.abs(targets).max(initial=0.0)), 1.0)
    x = K.encode(model, states.beliefs, states.robots)
    net = mlp.value_net(x.shape[1], stream(seed, TRAIN, *key, 0))
    net, losses = mlp.train(net, x, (targets / scale)[:, None], _train_cfg(cfg, seed, *key, 1))
    return net, scale, losses


def _fit_policy_task(task):
    subset, beliefs, robots, labels, key = task
    model = _CTX["model"]
    s = SampleSet(StateBatch(beliefs, robots), labels, np.full(len(labels), subset),
                  np.zeros(len(labels), dtype=bool))
    return train_local_policy(model, s, _CTX["train"], _CTX["seed"], key)


def _fit_value_task(task):
    subset, beliefs, robots, targets, key = task
    return train_local_value(_CTX["model"], StateBatch(beliefs, robots), targets, _CTX["train"],
                             _CTX["seed"], key)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalResult:
    mean: float
    stderr: float
    costs: np.ndarray

    @property
    def per_state(self) -> np.ndarray:
        return self.costs.mean(axis=1)


def eval_states(model: PipelineModel, count: int, seed: int,
                sampler: StateSampler = StateSampler()) -> StateBatch:
    """Frozen evaluation set: random startgame states spread over subsets 1-3."""
    rng = stream(seed, EVAL_STATES)
    parts = []
    sizes = [count // 3 + (1 if i < count % 3 else 0) for i in range(3)]
    for s, n in zip(STARTGAME, sizes):
        if n:
            parts.append(fresh_states(model, s, n, rng, sampler))
    states = StateBatch.concat(parts)
    return states.take(rng.permutation(len(states)))


def _eval_chunk(task):
    lo, hi, beliefs, robots = task
    model, policy, seed, n_traj = _CTX["model"], _CTX["policy"], _CTX["seed"], _CTX["n_traj"]
    n = hi - lo
    cfg = RolloutConfig(base_policy=policy, steps=None, eps=_CTX["eps"], max_steps=_CTX["max_steps"])
    gens = [stream(seed, EVAL_ENV, i) for i in range(lo, hi)]
    rows = np.repeat(np.arange(n), n_traj)
    slot = np.tile(np.arange(n_traj), n)
    prngs = [stream(seed, EVAL_POLICY, lo + o, t) for o, t in zip(rows, slot)]
    start = StateBatch(beliefs[rows], robots[rows])
    vals, _ = simulate(model, start, rows, slot, gens, np.full(n, n_traj), cfg, policy_rngs=prngs)
    return vals.reshape(n, n_traj)


def evaluate_policy(model: PipelineModel, policy, states: StateBatch, n_traj: int = 1,
                    seed: int = 0, workers: int = 1, chunk: int = 8, eps: float = 1e-3,
                    max_steps: int = EVAL_MAX_STEPS) -> EvalResult:
    """Mean discounted cost from frozen ``states`` with ``n_traj`` trajectories each.

    Environment noise for state ``i`` comes from stream ``(seed, EVAL_ENV, i)``,
    so two policies evaluated with the same seed face the same sampled
    hidden states and transitions (paired comparison). The standard error
    is over per-state means.
    """
    if len(states) == 0:
        return EvalResult(0.0, 0.0, np.zeros((0, n_traj)))
    # policies backed by simulation share chunk size with labeling
    tasks = [(lo, hi, states.beliefs[lo:hi], states.robots[lo:hi])
             for lo, hi in _chunks(len(states), chunk)]
    ctx = {"model": model, "policy": policy, "seed": seed, "n_traj": n_traj, "eps": eps,
           "max_steps": max_steps}
    costs = np.concatenate(run_chunks(_eval_chunk, ctx, tasks, workers))
    per = costs.mean(axis=1)
    se = float(per.std(ddof=1) / np.sqrt(len(per))) if len(per) > 1 else 0.0
    return EvalResult(float(per.mean()), se, costs)


def paired_difference(a: EvalResult, b: EvalResult) -> tuple[float, float]:
    """Mean and standard error of ``a - b`` over shared evaluation states."""
    d = a.per_state - b.per_state
    se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0
    return float(d.mean()), se


# ---------------------------------------------------------------------------
# Iteration


@dataclass
class PapiConfig:
    samples_per_subset: int = 20_000
    value_samples_per_subset: int | None = None
    trajectories_per_leaf: int = 10
    truncation_steps: int = 20
    eps: float = 1e-3
    max_steps: int = 400
    policy_train: mlp.TrainConfig = field(default_factory=mlp.TrainConfig)
    value_train: mlp.TrainConfig = field(default_factory=mlp.TrainConfig)
    sampler: StateSampler = field(default_factory=StateSampler)
    buffer_mix: float | None = None
    seed: int = 0
    chunk: int = 64
    workers: int = 1

    def __post_init__(self):
        if self.samples_per_subset < 1:
            raise ValueError("samples_per_subset must be >= 1")
        if self.truncation_steps < 0:
            raise ValueError("truncation_steps must be >= 0")


@dataclass
class IterationReport:
    iteration: int
    mode: str
    policy_losses: dict = field(default_factory=dict)
    policy_accuracy: dict = field(default_factory=dict)
    value_losses: dict = field(default_factory=dict)
    sample_counts: dict = field(default_factory=dict)
    eval_mean: float = float("nan")
    eval_stderr: float = float("nan")
    timings: dict = field(default_factory=dict)


class _Clock:
    def __init__(self, report: IterationReport):
        self.report = report

    def __call__(self, name):
        clock = self

        class _Phase:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                clock.report.timings[name] = clock.report.timings.get(name, 0.0) + time.perf_counter() - self.t
        return _Phase()


def _label_subsets(model, subsets, cfg_roll: RolloutConfig, pc: PapiConfig, iteration, buffer):
    sets, retained = {}, []
    for s in subsets:
        rng = stream(pc.seed, FRESH, iteration, s)
        states, tags = generate_states(model, s, pc.samples_per_subset, rng, buffer, pc.buffer_mix,
                                       pc.sampler)
        ss, ret = label_samples(model, states, cfg_roll, pc.seed, key=(iteration, s),
                                workers=pc.workers, chunk=pc.chunk, from_buffer=tags)
        sets[s] = ss
        retained.append(ret)
    return sets, retained


def _fit_policies(model, sets, pc: PapiConfig, iteration, report):
    tasks = [(s, ss.states.beliefs, ss.states.robots, ss.labels, (iteration, s, 0))
             for s, ss in sets.items()]
    out = run_chunks(_fit_policy_task, {"model": model, "train": pc.policy_train, "seed": pc.seed},
                     tasks, pc.workers)
    nets = {}
    for (s, *_), (net, acc, losses) in zip(tasks, out):
        nets[s] = net
        report.policy_accuracy[s] = acc
        report.policy_losses[s] = losses[-1] if losses else float("nan")
    return nets


def fit_value_nets(model: PipelineModel, subsets, policy, pc: PapiConfig, iteration: int = 0,
                   buffer: ReplayBuffer | None = None, report: IterationReport | None = None):
    """Value networks for ``policy`` on ``subsets``; returns ``(nets, scales)``."""
    report = report if report is not None else IterationReport(iteration, "T")
    n = pc.value_samples_per_subset or pc.samples_per_subset
    tasks = []
    for s in subsets:
        rng = stream(pc.seed, FRESH, iteration, 100 + s)
        states, _ = generate_states(model, s, n, rng, buffer, pc.buffer_mix, pc.sampler)
        targets = value_targets(model, states, policy, pc.seed, key=(iteration, s), eps=pc.eps,
                                workers=pc.workers)
        tasks.append((s, states.beliefs, states.robots, targets, (iteration, s, 1)))
    out = run_chunks(_fit_value_task, {"model": model, "train": pc.value_train, "seed": pc.seed},
                     tasks, pc.workers)
    nets, scales = {}, {}
    for (s, *_), (net, scale, losses) in zip(tasks, out):
        nets[s] = net
        scales[s] = scale
        report.value_losses[s] = losses[-1] if losses else float("nan")
    return nets, scales


def papi_iteration(model: PipelineModel, current: PartitionedPolicy, mode: str, pc: PapiConfig,
                   iteration: int = 1, value: PartitionedValue | None = None,
                   buffer: ReplayBuffer | None = None, eval_set: StateBatch | None = None,
                   eval_seed: int = 0):
    """One pAPI iteration from ``current``; returns ``(policy, value | None, report)``.

    ``mode`` "NT": labels use the full adaptive horizon and no value
    networks are fitted. ``mode`` "T": endgame subsets are labeled first
    (truncated after ``truncation_steps`` with ``value`` as terminal cost,
    untruncated if ``value`` is None), their policy networks and then value
    networks are fitted, and startgame subsets are labeled with
    trajectories cut on entering the endgame, charged with the fresh
    endgame values. The inputs are never modified; on failure the caller
    keeps its previous snapshot.
    """
    if mode not in ("NT", "T"):
        raise ValueError(f"mode must be NT or T, got {mode!r}")
    report = IterationReport(iteration, mode)
    clock = _Clock(report)
    retain = RETAIN_PROB if buffer is not None else 0.0
    base = RolloutConfig(base_policy=current, steps=None, eps=pc.eps, max_steps=pc.max_steps,
                         trajectories_per_leaf=pc.trajectories_per_leaf, retain_prob=retain)
    retained = []
    try:
        if mode == "NT":
            with clock("label"):
                sets, retained = _label_subsets(model, SUBSETS, base, pc, iteration, buffer)
            with clock("train_policy"):
                nets = _fit_policies(model, sets, pc, iteration, report)
            new_policy, new_value = current.with_nets(nets), None
        else:
            cfg_end = base if value is None else replace(base, steps=pc.truncation_steps,
                                                         terminal_cost=value)
            with clock("label"):
                sets, ret = _label_subsets(model, ENDGAME, cfg_end, pc, iteration, buffer)
            retained += ret
            with clock("train_policy"):
                end_nets = _fit_policies(model, sets, pc, iteration, report)
            interim = current.with_nets(end_nets)
            with clock("train_value"):
                vnets, vscales = fit_value_nets(model, ENDGAME, interim, pc, iteration, buffer, report)
            prev = value if value is not None else PartitionedValue(model)
            end_value = prev.with_nets(vnets, vscales)
            cfg_start = replace(base, terminal_cost=end_value, stop_when=EndgameStop(model))
            with clock("label"):
                sets2, ret = _label_subsets(model, STARTGAME, cfg_start, pc, iteration, buffer)
            retained += ret
            sets.update(sets2)
            with clock("train_policy"):
                start_nets = _fit_policies(model, sets2, pc, iteration, report)
            new_policy = interim.with_nets(start_nets)
            with clock("train_value"):
                vnets2, vscales2 = fit_value_nets(model, STARTGAME, new_policy, pc, iteration, buffer, report)
            new_value = end_value.with_nets(vnets2, vscales2)
    except mlp.TrainingDiverged as exc:
        raise IterationFailed(f"iteration {iteration} ({mode}): {exc}") from exc

    report.sample_counts = {s: int(len(ss.labels)) for s, ss in sorted(sets.items())}
    if buffer is not None:
        for r in retained:
            buffer.add(r.states, r.keys)
    if eval_set is not None:
        with clock("evaluate"):
            res = evaluate_policy(model, new_policy, eval_set, seed=eval_seed, workers=pc.workers,
                                  eps=pc.eps)
        report.eval_mean, report.eval_stderr = res.mean, res.stderr
    return new_policy, new_value, report


def rollout_policy(model: PipelineModel, base, value: PartitionedValue | None = None,
                   truncated: bool = False, trajectories_per_leaf: int = 10, eps: float = 1e-3,
                   max_steps: int = 400, lookahead: int = 1, chunk: int = 64) -> RolloutPolicy:
    """Rollout-NT (full horizon) or rollout-T (cut at endgame, charged with ``value``)."""
    cfg = RolloutConfig(base_policy=base, lookahead=lookahead, steps=None, eps=eps,
                        max_steps=max_steps, trajectories_per_leaf=trajectories_per_leaf)
    if truncated:
        if value is None:
            raise ValueError("truncated rollout needs a value function")
        cfg = replace(cfg, terminal_cost=value, stop_when=EndgameStop(model))
    return RolloutPolicy(model, cfg, chunk=chunk)


def train_papi(model: PipelineModel, mode: str, pc: PapiConfig, iterations: int,
               eval_set: StateBatch | None = None, eval_seed: int = 0, use_buffer: bool = True,
               visit_starts: int = 2000, start: PartitionedPolicy | None = None):
    """Run ``iterations`` pAPI iterations from greedy (or ``start``).

    Before each iteration the current policy is simulated from fresh
    startgame states to feed the replay buffer. Yields
    ``(policy, value, report)`` after every iteration.
    """
    policy = start if start is not None else PartitionedPolicy(model)
    value = None
    buffer = ReplayBuffer(model) if use_buffer else None
    for it in range(1, iterations + 1):
        if buffer is not None and visit_starts:
            collect_visited(model, policy, buffer, visit_starts, pc.seed, key=(it,), eps=pc.eps,
                            max_steps=pc.max_steps, workers=pc.workers, sampler=pc.sampler)
        policy, new_value, report = papi_iteration(model, policy, mode, pc, it, value=value,
                                                   buffer=buffer, eval_set=eval_set,
                                                   eval_seed=eval_seed)
        value = new_value if new_value is not None else value
        yield policy, new_value, report
