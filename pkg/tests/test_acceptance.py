"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances and configurations are pinned below. Criteria 5 and 6 share
one pair of training runs (pAPI-NT and pAPI-T, two iterations each, 20k
samples per subset on the 8-location pipeline); expect about twenty
minutes on a single core.
"""

import sys
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import conftest
from pomdp_rollout.belief import Belief, FeatureState, feature_estimator, observation_distribution
from pomdp_rollout.cli import main as cli_main
from pomdp_rollout.core.adapters import to_flat_pomdp
from pomdp_rollout.core.graph import bellman_apply, bellman_policy_apply
from pomdp_rollout.core.model import bayes_update, obs_likelihood
from pomdp_rollout.mlp import Mlp, TrainConfig, train
from pomdp_rollout.partition import SUBSETS, PartitionedPolicy, classify_batch
from pomdp_rollout.pipeline import PipelineModel, default_chain, default_costs, format_instance
from pomdp_rollout.pipeline import batch as K
from pomdp_rollout.pipeline.greedy import greedy_actions
from pomdp_rollout.trainer import (PapiConfig, StateSampler, eval_states, evaluate_policy,
                                   paired_difference, rollout_policy, train_papi)
from test_mlp import fd_check

# pinned tolerances
FILTER_TOL = 1e-12
FILTER_DEPTH = 6
FILTER_SECONDS = 10.0
BELLMAN_TOL = 1e-10
PROPERTY_EXAMPLES = 100
BOUNDS_SECONDS = 300.0
SE_SLACK = 2.0
ROLLOUT_SECONDS = 600.0
PAPI_SECONDS = 3600.0
TRUNCATION_PENALTY = 1.10
FD_TOL = 1e-4
TOY_ACCURACY = 0.99
N_CLASSIFY = 100_000
N_TRAJECTORIES = 10_000
TRAJECTORY_STEPS = 100
WORKER_COUNTS = (1, 4, 8)

# pinned configuration
L_SCALE = 8
EVAL_STATES = 500
EVAL_SET_SEED = 1
EVAL_SEED = 3
PAPI_SAMPLES = 20_000
PAPI_ITERS = 2


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def scale_model():
    return PipelineModel.linear(L_SCALE)


@pytest.fixture(scope="session")
def frozen_eval(scale_model):
    return eval_states(scale_model, EVAL_STATES, EVAL_SET_SEED)


@pytest.fixture(scope="session")
def greedy_eval(scale_model, frozen_eval):
    return evaluate_policy(scale_model, PartitionedPolicy(scale_model), frozen_eval, seed=EVAL_SEED)


@pytest.fixture(scope="session")
def papi_runs(scale_model, frozen_eval):
    """``{mode: [(eval result, report, seconds), ...]}`` for NT and T."""
    runs = {}
    for mode in ("NT", "T"):
        out, t0 = [], time.perf_counter()
        for policy, _, report in train_papi(scale_model, mode, PapiConfig(samples_per_subset=PAPI_SAMPLES),
                                            PAPI_ITERS):
            res = evaluate_policy(scale_model, policy, frozen_eval, seed=EVAL_SEED)
            out.append((res, report, time.perf_counter() - t0))
        runs[mode] = out
    return runs


# 1 -------------------------------------------------------------------------

def test_criterion_1_filter_exactness():
    model = PipelineModel.linear(3, levels=3, chain=default_chain(3), costs=default_costs(3))
    flat, js = to_flat_pomdp(model)
    prior = np.array([[0.2, 0.5, 0.3], [0.6, 0.3, 0.1], [0.1, 0.1, 0.8]])
    t0 = time.perf_counter()
    worst, visited = 0.0, 0
    seen = set()
    stack = [(FeatureState.create(model, (r,), Belief(prior)), None, 0) for r in range(3)]
    while stack:
        y, b, depth = stack.pop()
        if b is None:
            b = js.belief_vector(y)
        key = (y.key(), np.round(b, 13).tobytes(), depth)
        if key in seen:
            continue
        seen.add(key)
        visited += 1
        robots, marg = js.marginals(b)
        worst = max(worst, float(np.abs(marg - y.belief.damage).max()))
        assert robots == y.robots
        if depth == FILTER_DEPTH:
            continue
        for u in model.topology.legal_actions(y.robots):
            pz = obs_likelihood(b, u, flat)
            dist = observation_distribution(model, y, u)
            new_r = int(model.topology.move[y.robots[0], model.topology.joint[u][0]])
            covered = 0.0
            for z, p in dist.items():
                levels = [0] * 3
                levels[new_r] = z[0]
                code = js.obs_code((new_r,), levels)
                worst = max(worst, abs(p - pz[code]))
                covered += pz[code]
                stack.append((feature_estimator(model, y, u, z), bayes_update(b, u, code, flat),
                              depth + 1))
            worst = max(worst, abs(1.0 - covered))
    elapsed = time.perf_counter() - t0
    record(1, worst <= FILTER_TOL and elapsed < FILTER_SECONDS,
           f"max deviation {worst:.2e} (tol {FILTER_TOL:.0e}) over {visited} distinct nodes, "
           f"{elapsed:.1f}s (limit {FILTER_SECONDS:.0f}s)")


# 2 -------------------------------------------------------------------------

_PROPERTY_FAILURES = []


@settings(max_examples=PROPERTY_EXAMPLES, deadline=None, database=None)
@given(st.integers(0, 2**32 - 1))
def _operator_properties(toy2, seed):
    g = toy2.graph
    rng = np.random.default_rng(seed)
    J = rng.normal(size=g.n_nodes) * 50
    J2 = rng.normal(size=g.n_nodes) * 50
    contr = np.abs(bellman_apply(g, J) - bellman_apply(g, J2)).max()
    if contr > g.discount * np.abs(J - J2).max() + 1e-9:
        _PROPERTY_FAILURES.append(("contraction", seed))
    lo, hi = np.minimum(J, J2), np.maximum(J, J2)
    for op in (lambda v: bellman_apply(g, v), lambda v: bellman_policy_apply(g, toy2.base, v)):
        if np.any(op(lo) > op(hi) + 1e-9):
            _PROPERTY_FAILURES.append(("monotonicity", seed))


def test_criterion_2_bellman_oracle(toy2):
    residual = float(np.abs(bellman_apply(toy2.graph, toy2.J_star) - toy2.J_star).max())
    _PROPERTY_FAILURES.clear()
    _operator_properties(toy2)
    ok = residual <= BELLMAN_TOL and not _PROPERTY_FAILURES and toy2.graph.n_nodes <= 10_000
    record(2, ok, f"residual {residual:.2e} (tol {BELLMAN_TOL:.0e}) on {toy2.graph.n_nodes} nodes; "
                  f"{PROPERTY_EXAMPLES} random pairs, {len(_PROPERTY_FAILURES)} property failures")


# 3 -------------------------------------------------------------------------

def test_criterion_3_bounds(tmp_path, capsys):
    import csv
    inst = tmp_path / "toy.txt"
    inst.write_text(format_instance(conftest.toy_model(2, 2)))
    t0 = time.perf_counter()
    code = cli_main(["verify-bounds", "--config", str(inst), "--seed", "0", "--out",
                     str(tmp_path / "vb")])
    elapsed = time.perf_counter() - t0
    with open(tmp_path / "vb" / "bounds.csv") as fh:
        rows = list(csv.DictReader(fh))
    violations = sum(r["a_ok"] != "1" or r["b_ok"] != "1" for r in rows)
    improve = all(r["improves"] == "1" for r in rows if r["terminal"] == "J_mu")
    ok = code == 0 and violations == 0 and improve and len(rows) == 24 and elapsed < BOUNDS_SECONDS
    record(3, ok, f"{len(rows)} grid cells, {violations} violations, J_rollout <= J_base at every "
                  f"node: {improve}, exit {code}, {elapsed:.1f}s (limit {BOUNDS_SECONDS:.0f}s)")


# 4 -------------------------------------------------------------------------

def test_criterion_4_rollout_improves(scale_model, frozen_eval, greedy_eval):
    t0 = time.perf_counter()
    res = evaluate_policy(scale_model, rollout_policy(scale_model, PartitionedPolicy(scale_model)),
                          frozen_eval, seed=EVAL_SEED)
    elapsed = time.perf_counter() - t0
    d, se = paired_difference(res, greedy_eval)
    ok = d <= SE_SLACK * se and elapsed < ROLLOUT_SECONDS
    record(4, ok, f"rollout-NT {res.mean:.2f} vs greedy {greedy_eval.mean:.2f}: paired diff "
                  f"{d:.2f} +- {se:.2f} (need <= {SE_SLACK:g} se), {elapsed:.0f}s "
                  f"(limit {ROLLOUT_SECONDS:.0f}s)")


# 5 -------------------------------------------------------------------------

def test_criterion_5_papi_trend(papi_runs, greedy_eval):
    (r1, _, _), (r2, _, t2) = papi_runs["NT"]
    d1, se1 = paired_difference(r1, greedy_eval)
    d2, se2 = paired_difference(r2, r1)
    ok = d1 <= SE_SLACK * se1 and d2 <= SE_SLACK * se2 and t2 < PAPI_SECONDS
    record(5, ok, f"greedy {greedy_eval.mean:.2f} -> iter1 {r1.mean:.2f} (diff {d1:.2f} +- {se1:.2f}) "
                  f"-> iter2 {r2.mean:.2f} (diff {d2:.2f} +- {se2:.2f}); {t2:.0f}s "
                  f"(limit {PAPI_SECONDS:.0f}s)")


# 6 -------------------------------------------------------------------------

def test_criterion_6_truncation_tradeoff(papi_runs):
    label = {m: sum(rep.timings["label"] for _, rep, _ in papi_runs[m]) for m in ("NT", "T")}
    nt, t = papi_runs["NT"][-1][0], papi_runs["T"][-1][0]
    ratio = t.mean / nt.mean
    ok = label["T"] < label["NT"] and ratio <= TRUNCATION_PENALTY
    record(6, ok, f"labeling {label['T']:.0f}s (T) vs {label['NT']:.0f}s (NT); final cost "
                  f"{t.mean:.2f} (T) vs {nt.mean:.2f} (NT), ratio {ratio:.3f} "
                  f"(limit {TRUNCATION_PENALTY:.2f})")


# 7 -------------------------------------------------------------------------

def test_criterion_7_mlp():
    rng = np.random.default_rng(7)
    errs = []
    for head, loss, out in (("softmax", "l2", 4), ("linear", "l2", 1)):
        net = Mlp.init([5, 8, 6, out], head, rng)
        x = rng.normal(size=(16, 5))
        t = np.eye(out)[rng.integers(out, size=16)] if head == "softmax" else rng.normal(size=(16, 1))
        errs.append(fd_check(net, x, t, loss, 100, rng))
    x = rng.normal(size=(200, 2))
    y = (x @ np.array([1.0, -2.0]) > 0).astype(int)
    net0 = Mlp.init([2, 16, 2], "softmax", np.random.default_rng(0))
    cfg = TrainConfig(epochs=200, batch_size=16, seed=1)
    a, ca = train(net0, x, np.eye(2)[y], cfg)
    b, cb = train(net0, x, np.eye(2)[y], cfg)
    reproducible = ca == cb and a.to_bytes() == b.to_bytes()
    acc = float((a.forward(x).argmax(axis=1) == y).mean())
    ok = max(errs) < FD_TOL and reproducible and acc >= TOY_ACCURACY
    record(7, ok, f"max finite-difference rel. error {max(errs):.2e} (tol {FD_TOL:.0e}); "
                  f"bit-reproducible {reproducible}; toy accuracy {acc:.3f} (need {TOY_ACCURACY})")


# 8 -------------------------------------------------------------------------

def _reference_subsets(model, beliefs, robots):
    """Membership indicators of the six subsets, computed straight from the definitions."""
    L = model.n_locations
    p0 = beliefs[:, :, 0]
    endgame = 2 * (p0 < model.damaged_threshold).sum(axis=1) < L
    per_loc = np.einsum("blk,k->bl", beliefs, model.costs)
    idx = np.arange(L)[None, :]
    ld = np.where(idx < robots, per_loc, 0.0).sum(axis=1)
    rd = np.where(idx > robots, per_loc, 0.0).sum(axis=1)
    tot = ld + rd
    r = np.where(tot > 0, ld / np.where(tot > 0, tot, 1.0), 0.5)
    dens = [r > 0.7, (r >= 0.3) & (r <= 0.7), r < 0.3]
    phases = [~endgame, endgame]
    return np.stack([ph & d for ph in phases for d in dens], axis=1)


def test_criterion_8_partition(scale_model):
    m = scale_model
    rng = np.random.default_rng(8)
    n = N_CLASSIFY
    conc = rng.choice([0.05, 0.3, 1.0, 5.0], size=n)
    beliefs = rng.gamma(np.repeat(conc, m.n_locations * m.levels).reshape(n, m.n_locations, m.levels))
    beliefs /= beliefs.sum(axis=2, keepdims=True)
    healthy = rng.random((n, m.n_locations)) < 0.4
    beliefs[healthy] = [1, 0, 0, 0, 0]
    robots = rng.integers(0, m.n_locations, size=(n, 1))
    ids = classify_batch(m, beliefs, robots)
    member = _reference_subsets(m, beliefs, robots)
    exactly_one = bool(np.all(member.sum(axis=1) == 1))
    agree = bool(np.all(member.argmax(axis=1) + 1 == ids)) and set(np.unique(ids)) <= set(SUBSETS)

    # trajectories from generated states, half random legal, half greedy
    sampler = StateSampler()
    half = N_TRAJECTORIES // 2
    start = [sampler.candidates(m, half, phase, rng) for phase in ("startgame", "endgame")]
    b = np.concatenate([s.beliefs for s in start])
    r = np.concatenate([s.robots for s in start])
    levels = K.sample_levels(b, rng.random(b.shape[:2]))
    greedy_rows = np.arange(len(b)) % 2 == 0
    reversals = 0
    endgame = classify_batch(m, b, r) >= 4
    for _ in range(TRAJECTORY_STEPS):
        legal = m.topology.legal_mask(r)
        rand = np.argmax(np.where(legal, rng.random(legal.shape), -1.0), axis=1)
        u = np.where(greedy_rows, greedy_actions(m, b, r), rand)
        levels, r2, _ = K.env_step(m, levels, r, u, rng.random(levels.shape))
        b, _ = K.apply_action(m, b, r, u)
        K.sense(m, b, r2, levels)
        r = r2
        now = classify_batch(m, b, r) >= 4
        reversals += int(np.sum(endgame & ~now))
        endgame = now
    ok = exactly_one and agree and reversals == 0
    record(8, ok, f"{n} states: exactly one subset each {exactly_one}, matches reference {agree}; "
                  f"{len(b)} trajectories x {TRAJECTORY_STEPS} steps: {reversals} endgame->startgame")


# 9 -------------------------------------------------------------------------

def test_criterion_9_parallel_determinism():
    m = PipelineModel.linear(6)
    pc = dict(samples_per_subset=32, trajectories_per_leaf=2, truncation_steps=3, chunk=8, seed=11,
              policy_train=TrainConfig(epochs=2, batch_size=16),
              value_train=TrainConfig(epochs=2, batch_size=16))
    digests = {}
    for w in WORKER_COUNTS:
        blobs = []
        for mode in ("NT", "T"):
            for policy, value, _ in train_papi(m, mode, PapiConfig(workers=w, **pc), 2, visit_starts=40):
                blobs += [policy.local[s].to_bytes() for s in sorted(policy.local)]
                if value is not None:
                    blobs += [value.local[s].to_bytes() for s in sorted(value.local)]
                    blobs += [repr(value.scales[s]).encode() for s in sorted(value.scales)]
        digests[w] = blobs
    same = all(digests[w] == digests[WORKER_COUNTS[0]] for w in WORKER_COUNTS)
    record(9, same, f"checkpoints for workers {WORKER_COUNTS}: "
                    f"{'identical' if same else 'differ'} ({len(digests[1])} blobs each)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
