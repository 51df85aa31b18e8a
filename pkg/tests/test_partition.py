import pickle

import numpy as np
import pytest

from conftest import state
from pomdp_rollout.belief import Belief, FeatureState, feature_estimator
from pomdp_rollout.mlp import Mlp, TrainConfig
from pomdp_rollout.partition import (ENDGAME, STARTGAME, SUBSETS, EndgameStop, PartitionedPolicy,
                                     PartitionedValue, PartitionId, classify, classify_batch,
                                     global_action, global_value, noop_repair_mask)
from pomdp_rollout.pipeline import (REPAIR, PipelineModel, StateBatch, greedy_policy,
                                    sample_hidden)
from pomdp_rollout.pipeline.env import env_step
from pomdp_rollout.trainer import train_local_value

D0 = [1, 0, 0, 0, 0]


def point(level):
    row = [0.0] * 5
    row[level] = 1.0
    return row


def constant_net(model, logits, head="softmax"):
    n_in = model.n_robots * model.n_locations + model.n_locations * model.levels
    return Mlp([np.zeros((n_in, len(logits)))], [np.array(logits, dtype=float)], head)


def test_partition_ids():
    ids = [PartitionId.from_index(i) for i in SUBSETS]
    assert len({(p.phase, p.density) for p in ids}) == 6
    assert all(p.index == i for p, i in zip(ids, SUBSETS))
    assert str(PartitionId.from_index(4)) == "endgame-left"
    assert STARTGAME == (1, 2, 3) and ENDGAME == (4, 5, 6)
    with pytest.raises(ValueError):
        PartitionId.from_index(7)


def test_classify_left():
    m = PipelineModel.linear(4)
    # LD = 10, RD = 1
    y = state(m, [2], [point(3), D0, D0, point(2)])
    p = classify(y, m)
    assert p.density == "left"


def test_classify_ratio_example():
    m = PipelineModel.linear(3, costs=[0, 1, 8, 9, 10])
    y = state(m, [1], [point(2), D0, point(1)])
    assert classify(y, m).density == "left"


def test_classify_balanced_and_right():
    m = PipelineModel.linear(3)
    assert classify(state(m, [1], [point(2), D0, point(2)]), m).density == "balanced"
    assert classify(state(m, [1], [point(1), D0, point(3)]), m).density == "right"
    # empty ratio
    assert classify(state(m, [1], [D0, point(2), D0]), m).density == "balanced"


def test_ratio_boundary_is_balanced():
    m = PipelineModel.linear(3, costs=[0, 3, 7, 8, 9])
    y = state(m, [1], [point(2), D0, point(1)])  # 7 / 10 = 0.7
    assert classify(y, m).density == "balanced"
    y = state(m, [1], [point(1), D0, point(2)])  # 0.3
    assert classify(y, m).density == "balanced"


def test_endgame_threshold():
    m = PipelineModel.linear(20)
    rows = [point(1)] * 9 + [D0] * 11
    assert classify(state(m, [19], rows), m).phase == "endgame"
    rows = [point(1)] * 10 + [D0] * 10
    assert classify(state(m, [19], rows), m).phase == "startgame"
    rows = [[0.49, 0.51, 0, 0, 0]] * 10 + [[0.5, 0.5, 0, 0, 0]] * 9 + [D0]
    assert classify(state(m, [19], rows), m).phase == "startgame"


def test_classify_totality_random():
    m = PipelineModel.linear(8)
    rng = np.random.default_rng(0)
    b = rng.dirichlet(np.ones(5) * 0.3, size=(20000, 8))
    r = rng.integers(0, 8, size=(20000, 1))
    ids = classify_batch(m, b, r)
    assert set(np.unique(ids)) <= set(SUBSETS)
    assert len(ids) == 20000


def test_feature_state_carries_partition():
    m = PipelineModel.linear(4)
    y = state(m, [0], [D0, point(2), point(2), point(2)])
    assert y.partition_idx == classify(y, m).index == 3


def test_endgame_stop():
    m = PipelineModel.linear(4)
    batch = StateBatch.from_states([state(m, [0], [D0, point(2), point(2), D0]),
                                    state(m, [0], [D0, point(2), D0, D0])])
    assert EndgameStop(m)(batch).tolist() == [False, True]


def test_untrained_policy_is_greedy():
    m = PipelineModel.linear(6)
    rng = np.random.default_rng(1)
    p = PartitionedPolicy(m)
    for _ in range(50):
        rows = rng.dirichlet(np.ones(5), size=6)
        y = FeatureState.create(m, (int(rng.integers(6)),), Belief(rows))
        assert global_action(p, y) == greedy_policy(y, m)


def test_constant_logit_net_picks_lowest_legal():
    m = PipelineModel.linear(4)
    nets = {i: constant_net(m, [0.0, 0.0, 0.0]) for i in SUBSETS}
    p = PartitionedPolicy(m, nets)
    # damaged current location: repair (index 0) is legal and useful
    assert global_action(p, state(m, [0], [point(2), point(1), point(1), D0])) == REPAIR
    # robot on a known-healthy node at the left end: repair masked, left illegal
    y = state(m, [0], [D0, point(1), point(1), point(1)])
    assert global_action(p, y) == m.topology.action_index(2)


def test_illegal_logits_masked():
    m = PipelineModel.linear(4)
    p = PartitionedPolicy(m, {i: constant_net(m, [-5.0, 10.0, 0.0]) for i in SUBSETS})
    # left has the largest logit but is off the boundary
    y = state(m, [0], [point(1), point(1), point(1), D0])
    assert global_action(p, y) == m.topology.action_index(2)


def test_boundary_state_consults_balanced_net():
    m = PipelineModel.linear(3, costs=[0, 3, 7, 8, 9])
    y = state(m, [1], [point(2), point(2), point(1)])
    assert classify(y, m).index == 2
    nets = {i: constant_net(m, [5.0, 0.0, 0.0]) for i in SUBSETS}
    nets[2] = constant_net(m, [0.0, 0.0, 5.0])
    assert global_action(PartitionedPolicy(m, nets), y) == m.topology.action_index(2)


def test_noop_repair_mask():
    m = PipelineModel.linear(3)
    beliefs = np.array([[D0, point(1), D0], [point(1), D0, D0], [D0, D0, D0]], dtype=float)
    robots = np.array([[0], [0], [1]])
    mask = noop_repair_mask(m, beliefs, robots)
    assert mask.tolist() == [[True, False, False], [False, False, False], [False, False, False]]
    two = PipelineModel.two_robot_linear(3)
    mask = noop_repair_mask(two, beliefs[:1], np.array([[0, 1]]))
    comps = two.topology.joint
    assert np.array_equal(mask[0], (comps[:, 0] == REPAIR))


def test_fully_masked_row_falls_back_to_legal():
    m = PipelineModel.linear(1)
    y = state(m, [0], [D0])
    y = FeatureState(y.robots, y.belief, 4)
    p = PartitionedPolicy(m, {i: constant_net(m, [0.0, 1.0, 1.0]) for i in SUBSETS})
    assert global_action(p, y) == REPAIR


def test_dispatch_purity_and_snapshots():
    m = PipelineModel.linear(5)
    rng = np.random.default_rng(2)
    nets = {i: Mlp.init([5 + 25, 8, 3], "softmax", rng) for i in SUBSETS}
    p = PartitionedPolicy(m, nets)
    b = rng.dirichlet(np.ones(5), size=(40, 5))
    batch = StateBatch(b, rng.integers(0, 5, size=(40, 1)))
    first = p(batch)
    assert np.array_equal(first, p(batch))
    q = p.with_nets({1: constant_net(m, [1.0, 0.0, 0.0])})
    assert p.local[1] is nets[1] and q.local[1] is not nets[1]
    with pytest.raises(TypeError):
        p.local[1] = None
    clone = pickle.loads(pickle.dumps(p))
    assert np.array_equal(clone(batch), first)


def test_value_terminal_zero_and_clamp():
    m = PipelineModel.linear(3)
    v = PartitionedValue(m, {i: constant_net(m, [-5.0], "linear") for i in SUBSETS},
                         {i: 1.0 for i in SUBSETS})
    assert global_value(v, state(m, [0], [D0, D0, D0])) == 0.0
    assert global_value(v, state(m, [0], [D0, point(2), D0])) == 0.0
    v = PartitionedValue(m, {i: constant_net(m, [1e9], "linear") for i in SUBSETS})
    assert global_value(v, state(m, [0], [D0, point(2), D0])) == m.value_bound
    v = PartitionedValue(m, {5: constant_net(m, [2.0], "linear")}, {5: 3.0})
    y = state(m, [1], [D0, point(2), D0])
    assert classify(y, m).index == 5
    assert global_value(v, y) == 6.0
    assert PartitionedValue(m)(StateBatch.from_states([y])).tolist() == [0.0]
    clone = pickle.loads(pickle.dumps(v))
    assert clone.value(y) == 6.0


def test_value_net_fits_exact_costs(toy3):
    model = toy3.model
    nodes = toy3.graph.nodes
    live = np.flatnonzero(toy3.live)
    batch = StateBatch.from_states([nodes[i] for i in live])
    ids = classify_batch(model, batch.beliefs, batch.robots)
    nets, scales = {}, {}
    cfg = TrainConfig(epochs=400, batch_size=16)
    for s in np.unique(ids):
        rows = np.flatnonzero(ids == s)
        nets[int(s)], scales[int(s)], _ = train_local_value(
            model, batch.take(rows), toy3.J_star[live][rows], cfg, seed=0, key=(int(s),))
    v = PartitionedValue(model, nets, scales)
    all_nodes = StateBatch.from_states(nodes)
    err = np.abs(v(all_nodes) - toy3.J_star)
    spread = toy3.J_star.max() - toy3.J_star.min()
    assert err.mean() < 0.1 * spread


def test_phase_monotone_along_trajectories():
    from pomdp_rollout.trainer import StateSampler
    m = PipelineModel.linear(8)
    rng = np.random.default_rng(3)
    starts = StateSampler().candidates(m, 150, "endgame", rng).feature_states(m)
    for y in starts:
        h = sample_hidden(y.belief, y.robots, rng)
        for _ in range(60):
            u = int(rng.choice(m.topology.legal_actions(y.robots)))
            h, z, _ = env_step(m, h, u, rng)
            y = feature_estimator(m, y, u, z)
            assert classify(y, m).phase == "endgame"
