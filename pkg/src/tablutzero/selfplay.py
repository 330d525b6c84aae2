"""Self-play game generation, the replay buffer and the past-opponent pool."""

from __future__ import annotations

import threading
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import encoding as enc
from . import mcts
from . import network as net
from .agents import TABLUT, History, SearchAgent, choose_moves, outcome_value
from .rules import GameState, Outcome, Result, Side, game_record, initial_state

DEFAULT_CAPACITY = 16 * 1024 * 256
MAX_LEGAL = 256  # 16 attackers with at most 16 destinations each
BINARY_PLANES = enc.COLOR_PLANE + 1


class BufferNotReady(RuntimeError):
    pass


class SelfPlayError(RuntimeError):
    pass


@dataclass
class Sample:
    planes: np.ndarray  # (9, 9, 43) float32
    policy: np.ndarray  # (2592,) float32, zero off the legal actions
    value: float
    side: Side
    iteration_born: int
    legal_mask: np.ndarray  # (2592,) bool


class Ply(NamedTuple):
    planes: np.ndarray
    policy: np.ndarray
    legal_mask: np.ndarray
    side: Side


def finalize_game(trajectory: Sequence[Ply], outcome: Outcome, iteration: int = 0) -> list[Sample]:
    """Attach the final result, seen from each ply's mover, to the stored plies."""
    return [Sample(p.planes, p.policy, outcome_value(outcome, p.side), p.side, iteration, p.legal_mask)
            for p in trajectory]


class ReplayBuffer:
    """FIFO ring of samples stored in packed form.

    The 41 binary planes and the legal mask are bit-packed, the two scalar
    planes are kept as one float each, and the policy is kept only over the
    legal actions (in sorted action order).  Storage grows on demand up to
    ``capacity``.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.size = 0
        self._head = 0  # next slot to write
        self._lock = threading.Lock()
        self._alloc(min(capacity, 1024))

    def _alloc(self, n):
        old = getattr(self, "_planes", None)
        fields = {
            "_planes": ((n, (81 * BINARY_PLANES + 7) // 8), np.uint8),
            "_scalars": ((n, 2), np.float32),
            "_mask": ((n, enc.NUM_ACTIONS // 8), np.uint8),
            "_policy": ((n, MAX_LEGAL), np.float32),
            "_value": ((n,), np.int8),
            "_side": ((n,), np.int8),
            "_born": ((n,), np.int32),
        }
        for name, (shape, dtype) in fields.items():
            arr = np.zeros(shape, dtype=dtype)
            if old is not None:
                prev = getattr(self, name)
                arr[:len(prev)] = prev
            setattr(self, name, arr)

    def __len__(self):
        return self.size

    def add(self, samples: Sequence[Sample]) -> None:
        with self._lock:
            for s in samples:
                slot = self._head
                if slot >= len(self._value):
                    self._alloc(min(self.capacity, 2 * len(self._value)))
                self._write(slot, s)
                self._head = (slot + 1) % self.capacity
                self.size = min(self.size + 1, self.capacity)

    def _write(self, slot, s: Sample):
        self._planes[slot] = np.packbits(s.planes[:, :, :BINARY_PLANES].astype(bool).ravel())
        self._scalars[slot] = s.planes[0, 0, enc.PLY_PLANE], s.planes[0, 0, enc.HALFMOVE_PLANE]
        self._mask[slot] = np.packbits(s.legal_mask)
        legal = np.flatnonzero(s.legal_mask)
        if len(legal) > MAX_LEGAL:
            raise ValueError(f"{len(legal)} legal actions exceed the buffer limit")
        self._policy[slot] = 0.0
        self._policy[slot, :len(legal)] = s.policy[legal]
        self._value[slot] = s.value
        self._side[slot] = s.side
        self._born[slot] = s.iteration_born

    def _decode(self, slots):
        n = len(slots)
        planes = np.zeros((n, 9, 9, enc.NUM_PLANES), dtype=np.float32)
        bits = np.unpackbits(self._planes[slots], axis=1, count=81 * BINARY_PLANES)
        planes[..., :BINARY_PLANES] = bits.reshape(n, 9, 9, BINARY_PLANES)
        planes[..., enc.PLY_PLANE] = self._scalars[slots, 0, None, None]
        planes[..., enc.HALFMOVE_PLANE] = self._scalars[slots, 1, None, None]
        masks = np.unpackbits(self._mask[slots], axis=1).astype(bool)
        policy = np.zeros((n, enc.NUM_ACTIONS), dtype=np.float32)
        for j in range(n):
            legal = np.flatnonzero(masks[j])
            policy[j, legal] = self._policy[slots[j], :len(legal)]
        return planes, policy, masks

    def _slot(self, i):
        return (self._head - self.size + i) % self.capacity

    def get(self, i: int) -> Sample:
        """The i-th stored sample, oldest first."""
        with self._lock:
            if not 0 <= i < self.size:
                raise IndexError(i)
            slot = self._slot(i)
            planes, policy, masks = self._decode(np.array([slot]))
            return Sample(planes[0], policy[0], float(self._value[slot]), Side(int(self._side[slot])),
                          int(self._born[slot]), masks[0])

    def sample(self, batch_size: int, rng: np.random.Generator, augment: bool = True) -> net.TrainBatch:
        """Uniform draw with replacement, each sample under its own random quarter turn."""
        with self._lock:
            if self.size < batch_size:
                raise BufferNotReady(f"buffer holds {self.size} samples, need {batch_size}")
            slots = np.array([self._slot(i) for i in rng.integers(0, self.size, batch_size)])
            planes, policy, masks = self._decode(slots)
            values = self._value[slots].astype(np.float32)
            sides = self._side[slots].astype(np.int64)
        if augment:
            for j, k in enumerate(rng.integers(0, 4, batch_size)):
                if k:
                    planes[j] = enc.rotate_planes(planes[j], k)
                    policy[j] = enc.rotate_policy(policy[j], k)
                    masks[j] = enc.rotate_policy(masks[j], k)
        return net.TrainBatch(planes, policy, values, sides, masks)


class OpponentPool:
    """Anchor checkpoint plus up to ``cap`` recent checkpoints, stored as paths."""

    def __init__(self, anchor: tuple[int, str], cap: int = 10):
        self.anchor = (int(anchor[0]), str(anchor[1]))
        self.cap = cap
        self.entries: list[tuple[int, str]] = []
        self._cache: dict[str, net.Checkpoint] = {}

    def add(self, iteration: int, path) -> None:
        self.entries.append((int(iteration), str(path)))
        del self.entries[:-self.cap]

    def members(self) -> list[tuple[int, str]]:
        return [self.anchor] + [e for e in self.entries if e != self.anchor]

    def sample(self, rng: np.random.Generator) -> tuple[int, str]:
        m = self.members()
        return m[int(rng.integers(len(m)))]

    def load(self, path: str) -> net.Checkpoint:
        if path not in self._cache:
            try:
                self._cache[path] = net.load_checkpoint(path)
            except net.CheckpointError as e:
                raise SelfPlayError(f"cannot load opponent checkpoint: {e}") from e
        return self._cache[path]

    def to_dict(self) -> dict:
        return {"anchor": list(self.anchor), "cap": self.cap, "entries": [list(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "OpponentPool":
        pool = cls(tuple(d["anchor"]), d.get("cap", 10))
        for it, path in d["entries"]:
            pool.add(it, path)
        return pool


@dataclass(frozen=True)
class SelfPlayConfig:
    parallel_games: int = 1024
    steps_per_iteration: int = 256
    simulations: int = 128
    past_opponent_fraction: float = 0.25
    max_considered: int = 16
    c_visit: float = 50.0
    c_scale: float = 1.0

    def search_config(self) -> mcts.SearchConfig:
        return mcts.SearchConfig(self.simulations, self.max_considered, self.c_visit, self.c_scale)


@dataclass
class Env:
    index: int
    rng: np.random.Generator
    history: Optional[History] = None
    moves: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)
    opponent: Optional[tuple[int, str]] = None
    opponent_side: Optional[Side] = None
    assignments: int = 0


class SelfPlayState:
    """Environments that persist across iterations (games straddle boundaries)."""

    def __init__(self, n: int, seed: int):
        self.envs = [Env(i, np.random.default_rng([seed, i])) for i in range(n)]


@dataclass
class IterationStats:
    iteration: int
    games: int = 0
    attacker_wins: int = 0
    defender_wins: int = 0
    draws: int = 0
    mean_pieces_remaining: float = 0.0
    mean_root_entropy: float = 0.0
    buffer_size: int = 0

    def row(self) -> dict:
        return asdict(self)


def _reset(env: Env, pool: Optional[OpponentPool], fraction: float) -> None:
    env.history = (initial_state(),)
    env.moves = []
    env.trajectory = []
    env.opponent = env.opponent_side = None
    if pool is not None and env.rng.random() < fraction:
        env.opponent = pool.sample(env.rng)
        current_side = Side((env.index + env.assignments) % 2)
        env.opponent_side = current_side.opponent
        env.assignments += 1


def run_selfplay_iteration(current: dict, pool: Optional[OpponentPool], cfg: SelfPlayConfig,
                           buffer: ReplayBuffer, state: SelfPlayState, iteration: int = 0,
                           search_fn: Callable = mcts.run_searches,
                           game_log: Optional[Callable[[dict], None]] = None) -> IterationStats:
    """Advance every environment by ``cfg.steps_per_iteration`` plies with ``current`` params.

    Finished games are flushed to ``buffer`` (current-model plies only) and
    restarted at once; unfinished games carry over to the next call.
    """
    search_cfg = cfg.search_config()
    me = SearchAgent(f"iter{iteration}", current, search_cfg)
    opponents: dict[str, SearchAgent] = {}

    def opponent_agent(entry):
        it, path = entry
        if path not in opponents:
            opponents[path] = SearchAgent(f"iter{it}", pool.load(path).params, search_cfg)
        return opponents[path]

    stats = IterationStats(iteration)
    pieces, entropies = [], []
    for env in state.envs:
        if env.history is None:
            _reset(env, pool, cfg.past_opponent_fraction)
    for _ in range(cfg.steps_per_iteration):
        envs = state.envs
        agents = []
        for env in envs:
            if env.opponent is not None and env.history[0].to_move == env.opponent_side:
                agents.append(opponent_agent(env.opponent))
            else:
                agents.append(me)
        actions, results = choose_moves(agents, [e.history for e in envs], [e.rng for e in envs], search_fn)
        for env, agent, a, r in zip(envs, agents, actions, results):
            cur = env.history[0]
            if agent is me:
                planes = enc.encode_state(env.history)
                env.trajectory.append(Ply(planes, np.asarray(r.policy, dtype=np.float32),
                                          enc.legal_action_mask(cur), cur.to_move))
                entropies.append(r.root_entropy)
            env.history = TABLUT.apply(env.history, a)
            env.moves.append(enc.action_to_move(a))
            final: GameState = env.history[0]
            if final.is_terminal:
                buffer.add(finalize_game(env.trajectory, final.outcome, iteration))
                stats.games += 1
                if final.outcome.result is Result.ATTACKER_WIN:
                    stats.attacker_wins += 1
                elif final.outcome.result is Result.DEFENDER_WIN:
                    stats.defender_wins += 1
                else:
                    stats.draws += 1
                pieces.append(final.board.piece_count())
                if game_log is not None:
                    rec = game_record(env.moves, final)
                    rec.update(iteration=iteration, env=env.index,
                               opponent=None if env.opponent is None else f"iter{env.opponent[0]}",
                               opponent_side=None if env.opponent_side is None else env.opponent_side.name.lower())
                    game_log(rec)
                _reset(env, pool, cfg.past_opponent_fraction)
    stats.mean_pieces_remaining = float(np.mean(pieces)) if pieces else 0.0
    stats.mean_root_entropy = float(np.mean(entropies)) if entropies else 0.0
    stats.buffer_size = len(buffer)
    return stats
