"""Tablut adapter for the search, network evaluators, and a batched arena."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import encoding as enc
from . import mcts
from . import network as net
from .rules import GameState, Move, Outcome, Side, apply_move, game_record, initial_state

History = tuple  # GameStates, most recent first, at most enc.HISTORY long


class TablutGame:
    """Search states are history windows so leaves can be encoded directly."""

    num_actions = enc.NUM_ACTIONS

    def legal_actions(self, h: History) -> np.ndarray:
        return enc.legal_actions(h[0])

    def apply(self, h: History, action: int) -> History:
        return (apply_move(h[0], enc.action_to_move(action)),) + h[:enc.HISTORY - 1]

    def terminal_value(self, h: History) -> Optional[float]:
        return outcome_value(h[0].outcome, h[0].to_move)

    def to_play(self, h: History) -> Side:
        return h[0].to_move


TABLUT = TablutGame()


def outcome_value(outcome: Optional[Outcome], side: Side) -> Optional[float]:
    """+1 / 0 / -1 from ``side``'s point of view, None while the game is running."""
    if outcome is None:
        return None
    if outcome.winner is None:
        return 0.0
    return 1.0 if outcome.winner == side else -1.0


class NetEvaluator:
    """Batched evaluator: list of histories -> (logits, values) from the mover's head."""

    def __init__(self, params: dict):
        self.params = params

    def __call__(self, histories: Sequence[History]):
        x = enc.encode_batch(histories)
        out = net.forward(self.params, x)
        sides = np.fromiter((h[0].to_move for h in histories), dtype=np.int64, count=len(histories))
        logits, values = net.select_head(out, sides)
        return logits, values

    def single(self, h: History):
        logits, values = self([h])
        return logits[0], float(values[0])


@dataclass
class SearchAgent:
    agent_id: str
    params: dict
    search: mcts.SearchConfig

    def __post_init__(self):
        self.evaluator = NetEvaluator(self.params)


@dataclass
class RandomAgent:
    """Uniformly random legal moves, no network."""

    agent_id: str = "random"


Agent = SearchAgent | RandomAgent


@dataclass
class GameResult:
    attacker: str
    defender: str
    outcome: Outcome
    moves: list
    final: GameState

    def record(self) -> dict:
        rec = game_record(self.moves, self.final)
        rec.update(attacker=self.attacker, defender=self.defender)
        return rec


def choose_moves(agents: Sequence[Agent], histories: Sequence[History], rngs: Sequence[np.random.Generator],
                 search_fn: Callable = mcts.run_searches):
    """One move per position; search agents are batched together.

    Returns (actions, search results or None per position).
    """
    actions = [0] * len(histories)
    results: list[Optional[mcts.SearchResult]] = [None] * len(histories)
    searched = []
    for i, (agent, h) in enumerate(zip(agents, histories)):
        if isinstance(agent, RandomAgent):
            legal = enc.legal_actions(h[0])
            actions[i] = int(legal[rngs[i].integers(len(legal))])
        else:
            searched.append(i)
    if searched:
        cfgs = [replace(agents[i].search, seed=int(rngs[i].integers(2**63))) for i in searched]
        out = search_fn([histories[i] for i in searched], TABLUT, [agents[i].evaluator for i in searched], cfgs)
        for i, r in zip(searched, out):
            actions[i] = r.chosen_action
            results[i] = r
    return actions, results


def play_games(pairings: Sequence[tuple[Agent, Agent]], seed: int,
               search_fn: Callable = mcts.run_searches) -> list[GameResult]:
    """Play one game per (attacker, defender) pairing, all games advancing in lockstep."""
    rngs = [np.random.default_rng([seed, i]) for i in range(len(pairings))]
    hist: list[History] = [(initial_state(),) for _ in pairings]
    moves: list[list[Move]] = [[] for _ in pairings]
    done: list[Optional[GameResult]] = [None] * len(pairings)
    active = list(range(len(pairings)))
    while active:
        agents = [pairings[i][int(hist[i][0].to_move)] for i in active]
        actions, _ = choose_moves(agents, [hist[i] for i in active], [rngs[i] for i in active], search_fn)
        still = []
        for i, a in zip(active, actions):
            hist[i] = TABLUT.apply(hist[i], a)
            moves[i].append(enc.action_to_move(a))
            final = hist[i][0]
            if final.is_terminal:
                att, dfd = pairings[i]
                done[i] = GameResult(att.agent_id, dfd.agent_id, final.outcome, moves[i], final)
            else:
                still.append(i)
        active = still
    return done
