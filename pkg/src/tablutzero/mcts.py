"""Gumbel-style Monte Carlo tree search with sequential halving at the root.

The search is written as a generator: it yields every state it needs
evaluated and expects ``(logits, value)`` to be sent back.  That lets a
caller run many searches side by side and batch their leaf evaluations
(see :func:`run_searches`), while :func:`run_search` drives a single one.

Values are always stored from the point of view of the player to move at
the node that owns the edge.  Any game can be searched as long as it
provides the :class:`Game` methods; terminal values are reported from the
point of view of the player to move in the terminal state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Optional, Protocol, Sequence

import numpy as np


class SearchError(RuntimeError):
    pass


class Game(Protocol):
    num_actions: int

    def legal_actions(self, state) -> np.ndarray: ...

    def apply(self, state, action: int): ...

    def terminal_value(self, state) -> Optional[float]: ...

    def to_play(self, state) -> int: ...


@dataclass(frozen=True)
class SearchConfig:
    simulations: int = 128
    max_considered: int = 16
    c_visit: float = 50.0
    c_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.simulations < 2:
            raise ValueError("simulations must be at least 2")
        if self.max_considered < 2:
            raise ValueError("max_considered must be at least 2")


@dataclass
class SearchResult:
    chosen_action: int
    policy: np.ndarray  # improved policy over the full action space
    root_value: float
    root_entropy: float  # entropy of the network prior over legal actions
    root_stats: dict = field(default_factory=dict)


class Node:
    __slots__ = ("state", "player", "actions", "logits", "prior", "value", "visits", "value_sum",
                 "children", "terminal")

    def __init__(self, state, player, value, actions=None, logits=None, terminal=False):
        self.state = state
        self.player = player
        self.value = float(value)
        self.terminal = terminal
        self.children: dict[int, Node] = {}
        if terminal:
            self.actions = np.zeros(0, dtype=np.int64)
            self.logits = self.prior = np.zeros(0)
        else:
            self.actions = actions
            self.logits = logits
            self.prior = _softmax(logits)
        self.visits = np.zeros(len(self.actions), dtype=np.int64)
        self.value_sum = np.zeros(len(self.actions))

    def q(self) -> np.ndarray:
        return np.where(self.visits > 0, self.value_sum / np.maximum(self.visits, 1), 0.0)


def _softmax(x):
    z = np.exp(x - x.max())
    return z / z.sum()


def sigma(q, max_visit: int, cfg: SearchConfig):
    """Monotone transform of normalised Q values."""
    return (cfg.c_visit + max_visit) * cfg.c_scale * np.asarray(q)


def mixed_value(node: Node) -> float:
    total = node.visits.sum()
    if total == 0:
        return node.value
    visited = node.visits > 0
    probs = node.prior[visited]
    weighted = float((probs * node.q()[visited]).sum() / max(probs.sum(), np.finfo(float).tiny))
    return (node.value + total * weighted) / (1 + total)


def completed_q(node: Node) -> np.ndarray:
    """Visited actions keep their Q, unvisited ones get the mixed value; min-max scaled to [0, 1]."""
    visited = node.visits > 0
    q = node.q()
    completed = np.where(visited, q, mixed_value(node))
    lo, hi = node.value, node.value
    if visited.any():
        lo = min(lo, q[visited].min())
        hi = max(hi, q[visited].max())
    return np.clip((completed - lo) / max(hi - lo, 1e-8), 0.0, 1.0)


def improved_policy(node: Node, cfg: SearchConfig) -> np.ndarray:
    max_visit = int(node.visits.max()) if len(node.visits) else 0
    return _softmax(node.logits + sigma(completed_q(node), max_visit, cfg))


def select_child_interior(node: Node, cfg: SearchConfig) -> int:
    """Index (into node.actions) maximising pi'(a) - N(a) / (1 + sum N); ties go to the lowest action."""
    pi = improved_policy(node, cfg)
    score = pi - node.visits / (1.0 + node.visits.sum())
    return int(np.argmax(score))


def backup(path: Sequence[tuple[Node, int]], leaf_value: float, leaf_player) -> None:
    for node, i in path:
        v = leaf_value if node.player == leaf_player else -leaf_value
        node.visits[i] += 1
        node.value_sum[i] += v


def halving_schedule(simulations: int, considered: int) -> list[tuple[int, int]]:
    """Phases of sequential halving as (survivors, visits per survivor).

    Each phase spends ``max(1, n // (phases * survivors))`` visits per
    survivor; whatever budget is left after the last halving goes to a final
    single-survivor phase, so the visits always sum to ``simulations``.
    """
    if considered < 1 or simulations < considered:
        raise ValueError("need at least one simulation per considered action")
    plan = []
    used = 0
    k = considered
    phases = math.ceil(math.log2(considered)) if considered > 1 else 0
    for _ in range(phases):
        per = max(1, simulations // (phases * k))
        per = min(per, (simulations - used) // k)
        if per == 0:
            break
        plan.append((k, per))
        used += k * per
        k = math.ceil(k / 2)
    if used < simulations:
        if plan and plan[-1][0] == 1:
            plan[-1] = (1, plan[-1][1] + simulations - used)
        elif k == 1 or not plan:
            plan.append((1, simulations - used))
        else:
            # budget ran out before the halving finished; top up the current leaders
            rest = simulations - used
            last_k = plan[-1][0]
            if rest >= last_k:
                plan.append((last_k, rest // last_k))
                rest -= (rest // last_k) * last_k
            if rest:
                plan.append((1, rest))
    return plan


def _expand(state, game: Game, logits, value) -> Node:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (game.num_actions,) or not np.all(np.isfinite(logits)) or not np.isfinite(value):
        raise SearchError("evaluator returned malformed or non-finite output")
    actions = np.asarray(game.legal_actions(state), dtype=np.int64)
    if len(actions) == 0:
        raise SearchError("non-terminal state without legal actions")
    return Node(state, game.to_play(state), value, actions, logits[actions])


def _simulate(root: Node, index: int, game: Game, cfg: SearchConfig):
    node, i = root, index
    path = []
    while True:
        path.append((node, i))
        child = node.children.get(i)
        if child is None:
            state = game.apply(node.state, int(node.actions[i]))
            terminal = game.terminal_value(state)
            if terminal is not None:
                child = Node(state, game.to_play(state), terminal, terminal=True)
            else:
                logits, value = yield state
                child = _expand(state, game, logits, value)
            node.children[i] = child
            break
        if child.terminal:
            break
        node = child
        i = select_child_interior(node, cfg)
    backup(path, child.value, child.player)


def search(root_state, game: Game, cfg: SearchConfig) -> Generator[Any, tuple, SearchResult]:
    """Generator form of the search; see the module docstring."""
    if game.terminal_value(root_state) is not None:
        raise SearchError("cannot search from a terminal state")
    logits, value = yield root_state
    root = _expand(root_state, game, logits, value)
    rng = np.random.default_rng(cfg.seed)
    gumbel = rng.gumbel(size=len(root.actions))
    base = gumbel + root.logits
    m = min(cfg.max_considered, len(root.actions), cfg.simulations)
    survivors = np.argsort(-base, kind="stable")[:m]

    def scores(idx):
        return base[idx] + sigma(completed_q(root)[idx], int(root.visits.max()), cfg)

    for k, visits in halving_schedule(cfg.simulations, m):
        survivors = survivors[np.argsort(-scores(survivors), kind="stable")[:k]]
        for _ in range(visits):
            for i in survivors:
                yield from _simulate(root, int(i), game, cfg)

    chosen = int(survivors[np.argmax(scores(survivors))])
    pi = improved_policy(root, cfg)
    policy = np.zeros(game.num_actions)
    policy[root.actions] = pi
    entropy = -float(np.sum(root.prior * np.log(np.maximum(root.prior, 1e-300))))
    stats = {
        "actions": root.actions.tolist(),
        "visits": root.visits.tolist(),
        "q": root.q().tolist(),
        "gumbel": gumbel.tolist(),
        "prior": root.prior.tolist(),
        "improved_policy": pi.tolist(),
        "chosen_action": int(root.actions[chosen]),
        "network_value": root.value,
    }
    return SearchResult(int(root.actions[chosen]), policy, mixed_value(root), entropy, stats)


def run_search(root_state, game: Game, evaluate: Callable, cfg: SearchConfig) -> SearchResult:
    """Run one search; ``evaluate(state) -> (logits, value)``."""
    gen = search(root_state, game, cfg)
    try:
        request = next(gen)
        while True:
            request = gen.send(evaluate(request))
    except StopIteration as stop:
        return stop.value


def run_searches(roots: Sequence, game: Game, evaluators: Sequence[Callable], cfgs: Sequence[SearchConfig]):
    """Run several searches in lockstep, batching leaf requests per evaluator.

    ``evaluators[i](states) -> (logits (n, A), values (n,))`` handles search i;
    searches sharing the same evaluator object are evaluated together.
    """
    gens = [search(r, game, c) for r, c in zip(roots, cfgs)]
    results: list[Optional[SearchResult]] = [None] * len(gens)
    pending = {}
    for i, g in enumerate(gens):
        pending[i] = next(g)
    while pending:
        groups: dict[int, list[int]] = {}
        for i in pending:
            groups.setdefault(id(evaluators[i]), []).append(i)
        replies = {}
        for members in groups.values():
            logits, values = evaluators[members[0]]([pending[i] for i in members])
            for j, i in enumerate(members):
                replies[i] = (logits[j], float(values[j]))
        nxt = {}
        for i, reply in replies.items():
            try:
                nxt[i] = gens[i].send(reply)
            except StopIteration as stop:
                results[i] = stop.value
        pending = nxt
    return results
