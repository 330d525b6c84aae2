import math

import numpy as np
import pytest

from tablutzero import mcts
from tablutzero.mcts import Node, SearchConfig, SearchError

from tictactoe import GAME, action_values, minimax, minimax_evaluator, random_positions, uniform_evaluator


def make_node(logits, value=0.0, visits=None, q=None):
    logits = np.asarray(logits, dtype=float)
    node = Node(None, 1, value, np.arange(len(logits)), logits)
    if visits is not None:
        node.visits[:] = visits
        node.value_sum[:] = np.asarray(q, dtype=float) * node.visits
    return node


class CountingEvaluator:
    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def __call__(self, state):
        self.calls += 1
        return self.inner(state)


class OneMove:
    """A game with a single legal action that goes on forever."""

    num_actions = 3

    def legal_actions(self, state):
        return np.array([1])

    def apply(self, state, action):
        return state + 1

    def terminal_value(self, state):
        return None

    def to_play(self, state):
        return state % 2


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(simulations=1)
    with pytest.raises(ValueError):
        SearchConfig(max_considered=1)
    cfg = SearchConfig()
    assert (cfg.simulations, cfg.max_considered, cfg.c_visit, cfg.c_scale) == (128, 16, 50.0, 1.0)


def test_sigma_examples():
    cfg = SearchConfig()
    assert mcts.sigma(0.0, 37, cfg) == 0
    assert mcts.sigma(1.0, 0, cfg) == 50.0
    q = np.linspace(0, 1, 11)
    assert np.all(np.diff(mcts.sigma(q, 5, cfg)) > 0)


def test_argmax_invariant_to_q_shift():
    rng = np.random.default_rng(0)
    cfg = SearchConfig()
    for _ in range(200):
        n = rng.integers(2, 10)
        logits = rng.normal(size=n)
        visits = rng.integers(0, 5, size=n)
        q = rng.uniform(-1, 1, size=n)
        v = rng.uniform(-1, 1)
        c = rng.uniform(-3, 3)
        a = make_node(logits, v, visits, q)
        b = make_node(logits, v + c, visits, q + c)
        sa = logits + mcts.sigma(mcts.completed_q(a), visits.max(), cfg)
        sb = logits + mcts.sigma(mcts.completed_q(b), visits.max(), cfg)
        np.testing.assert_allclose(sa, sb, atol=1e-9)
        assert np.argmax(sa) == np.argmax(sb)


def test_completed_q_unvisited():
    node = make_node([0.1, 0.5, -1.0], value=0.3)
    cq = mcts.completed_q(node)
    assert np.all(cq == cq[0])
    assert mcts.mixed_value(node) == 0.3


def test_completed_q_one_visited_above_value():
    node = make_node([0.0, 0.0, 0.0], value=0.1, visits=[0, 3, 0], q=[0, 0.8, 0])
    cq = mcts.completed_q(node)
    assert cq[1] == 1.0
    assert 0 < cq[0] < 1 and 0 < cq[2] < 1
    # mixed value by hand: (0.1 + 3 * 0.8) / 4
    assert mcts.mixed_value(node) == pytest.approx((0.1 + 3 * 0.8) / 4)


def test_mixed_value_by_hand():
    logits = np.log([0.5, 0.3, 0.2])
    node = make_node(logits, value=-0.2, visits=[2, 1, 0], q=[0.4, -0.6, 0])
    weighted = (0.5 * 0.4 + 0.3 * -0.6) / 0.8
    assert mcts.mixed_value(node) == pytest.approx((-0.2 + 3 * weighted) / 4)


def test_completed_q_properties():
    rng = np.random.default_rng(1)
    for _ in range(500):
        n = rng.integers(1, 12)
        visits = rng.integers(0, 6, size=n) * (rng.random(n) < 0.7)
        q = rng.uniform(-1, 1, size=n)
        node = make_node(rng.normal(size=n), rng.uniform(-1, 1), visits, q)
        cq = mcts.completed_q(node)
        assert np.all((cq >= 0) & (cq <= 1))
        vis = np.flatnonzero(visits)
        for i in vis:
            for j in vis:
                if q[i] < q[j]:
                    assert cq[i] <= cq[j]


def test_interior_fresh_node_picks_policy_argmax():
    cfg = SearchConfig()
    node = make_node([0.2, 1.5, -0.3, 1.5])
    assert mcts.select_child_interior(node, cfg) == 1


def test_interior_prefers_unvisited_on_tie():
    cfg = SearchConfig()
    # equal logits and the visited child has q equal to the value, so pi' stays equal
    node = make_node([0.0, 0.0], value=0.0, visits=[1, 0], q=[0.0, 0.0])
    pi = mcts.improved_policy(node, cfg)
    assert pi[0] == pytest.approx(pi[1])
    assert mcts.select_child_interior(node, cfg) == 1


def test_interior_visit_shares_track_policy():
    cfg = SearchConfig()
    rng = np.random.default_rng(3)
    q = rng.uniform(-0.3, 0.3, size=6)
    node = make_node(rng.normal(size=6), value=0.0)
    for _ in range(1000):
        i = mcts.select_child_interior(node, cfg)
        node.visits[i] += 1
        node.value_sum[i] += q[i]
    shares = node.visits / node.visits.sum()
    assert np.abs(shares - mcts.improved_policy(node, cfg)).max() < 0.05


def test_backup_signs():
    root = make_node([0.0, 0.0])
    child = Node(None, -1, 0.0, np.arange(2), np.zeros(2))
    # leaf whose mover is the root's opponent lost: it is a win for the root mover
    mcts.backup([(root, 0), (child, 1)], -1.0, -1)
    assert root.value_sum[0] == 1.0 and child.value_sum[1] == -1.0
    mcts.backup([(root, 0), (child, 1)], 0.0, 1)
    assert root.value_sum[0] == 1.0 and child.value_sum[1] == -1.0
    assert root.visits[0] == 2 and child.visits[1] == 2


@pytest.mark.parametrize("n,m,expected", [
    (128, 16, [(16, 2), (8, 4), (4, 8), (2, 16)]),
    (256, 9, [(9, 7), (5, 12), (3, 21), (2, 32), (1, 6)]),
    (2, 1, [(1, 2)]),
    (4, 2, [(2, 2)]),
])
def test_halving_schedule_examples(n, m, expected):
    assert mcts.halving_schedule(n, m) == expected


def test_halving_schedule_properties():
    for n in range(2, 300, 7):
        for m in range(1, min(n, 40) + 1):
            plan = mcts.halving_schedule(n, m)
            assert sum(k * v for k, v in plan) == n
            assert plan[0][0] == m
            for (k0, _), (k1, _) in zip(plan, plan[1:]):
                assert k1 in (k0, math.ceil(k0 / 2), 1)
                assert k1 <= k0


def test_single_legal_action():
    result = mcts.run_search(0, OneMove(), lambda s: (np.zeros(3), 0.0), SearchConfig(simulations=2, max_considered=2))
    assert result.chosen_action == 1
    assert list(result.policy) == [0.0, 1.0, 0.0]


def test_terminal_root_rejected():
    state = ((1, 1, 1, -1, -1, 0, 0, 0, 0), -1)
    with pytest.raises(SearchError):
        mcts.run_search(state, GAME, uniform_evaluator, SearchConfig())


def test_non_finite_evaluator_rejected():
    with pytest.raises(SearchError):
        mcts.run_search(GAME.initial(), GAME, lambda s: (np.full(9, np.nan), 0.0), SearchConfig())
    with pytest.raises(SearchError):
        mcts.run_search(GAME.initial(), GAME, lambda s: (np.zeros(9), float("inf")), SearchConfig())


def test_budget_and_legality():
    for i, s in enumerate(random_positions(30, seed=5)):
        counter = CountingEvaluator(uniform_evaluator)
        cfg = SearchConfig(simulations=40, seed=i)
        r = mcts.run_search(s, GAME, counter, cfg)
        assert sum(r.root_stats["visits"]) == 40
        assert 1 <= counter.calls <= 41
        legal = set(GAME.legal_actions(s).tolist())
        assert r.chosen_action in legal
        assert set(np.flatnonzero(r.policy).tolist()) <= legal
        assert r.policy.sum() == pytest.approx(1.0)


def test_fewer_simulations_than_considered():
    r = mcts.run_search(GAME.initial(), GAME, uniform_evaluator, SearchConfig(simulations=3, max_considered=16))
    assert sum(r.root_stats["visits"]) == 3


def test_determinism():
    s = random_positions(1, seed=9)[0]
    a = mcts.run_search(s, GAME, uniform_evaluator, SearchConfig(simulations=64, seed=4))
    b = mcts.run_search(s, GAME, uniform_evaluator, SearchConfig(simulations=64, seed=4))
    assert a.chosen_action == b.chosen_action
    assert np.array_equal(a.policy, b.policy)
    assert a.root_stats == b.root_stats


def test_chosen_action_invariant_to_logit_shift():
    for i, s in enumerate(random_positions(20, seed=2)):
        logits = np.random.default_rng(i).normal(size=9)
        a = mcts.run_search(s, GAME, minimax_evaluator(logits), SearchConfig(simulations=32, seed=i))
        b = mcts.run_search(s, GAME, minimax_evaluator(logits + 7.5), SearchConfig(simulations=32, seed=i))
        assert a.chosen_action == b.chosen_action


def test_batched_matches_single():
    states = random_positions(6, seed=8)
    cfgs = [SearchConfig(simulations=24, seed=i) for i in range(6)]

    def batch_eval(batch):
        return np.zeros((len(batch), 9)), np.zeros(len(batch))

    batched = mcts.run_searches(states, GAME, [batch_eval] * 6, cfgs)
    for s, c, r in zip(states, cfgs, batched):
        single = mcts.run_search(s, GAME, uniform_evaluator, c)
        assert r.chosen_action == single.chosen_action
        assert np.array_equal(r.policy, single.policy)


def test_winning_move_has_higher_q_than_losing_move():
    def mixed(s):
        vals = action_values(s).values()
        return max(vals) == 1 and min(vals) == -1
    for i, s in enumerate(random_positions(20, seed=13, predicate=mixed)):
        r = mcts.run_search(s, GAME, uniform_evaluator, SearchConfig(simulations=512, seed=i))
        vals = action_values(s)
        q = dict(zip(r.root_stats["actions"], r.root_stats["q"]))
        best_win = max(q[a] for a, v in vals.items() if v == 1)
        worst_loss = min(q[a] for a, v in vals.items() if v == -1)
        assert worst_loss <= best_win


def test_root_entropy_bounded():
    s = random_positions(1, seed=1)[0]
    logits = np.random.default_rng(0).normal(size=9)
    r = mcts.run_search(s, GAME, minimax_evaluator(logits), SearchConfig(simulations=16))
    assert 0 <= r.root_entropy <= math.log(len(GAME.legal_actions(s))) + 1e-12
    assert minimax(s) in (-1.0, 0.0, 1.0)
