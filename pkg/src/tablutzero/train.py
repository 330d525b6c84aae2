"""The training loop and evaluation matches that tie the modules together."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import mcts
from . import network as net
from . import rating
from . import selfplay as sp
from .agents import GameResult, RandomAgent, SearchAgent, play_games
from .config import RunConfig, save_config
from .rules import Result

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "iteration", "policy_loss", "value_loss", "total_loss", "policy_entropy", "root_policy_entropy",
    "mean_pieces_remaining", "attacker_winrate", "defender_winrate", "draw_rate", "games",
    "buffer_size", "optimizer_steps", "learning_rate", "elo_estimate",
]
SELFPLAY_COLUMNS = ["iteration", "games", "attacker_wins", "defender_wins", "draws",
                    "mean_pieces_remaining", "mean_root_entropy", "buffer_size"]
CKPT_RE = re.compile(r"ckpt_(\d{4,})\.bin$")


class TrainingError(RuntimeError):
    pass


def checkpoint_path(out: Path, iteration: int) -> Path:
    return out / "checkpoints" / f"ckpt_{iteration:04d}.bin"


def latest_checkpoint(out: Path) -> Optional[Path]:
    found = []
    for p in (out / "checkpoints").glob("ckpt_*.bin"):
        m = CKPT_RE.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return max(found)[1] if found else None


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return v


def append_csv(path: Path, columns: Sequence[str], row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        if new:
            w.writeheader()
        w.writerow({c: _fmt(row.get(c)) for c in columns})


def append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def match_record(game: GameResult) -> rating.MatchRecord:
    result = {Result.ATTACKER_WIN: rating.MatchResult.FIRST_WIN,
              Result.DEFENDER_WIN: rating.MatchResult.SECOND_WIN,
              Result.DRAW: rating.MatchResult.DRAW}[game.outcome.result]
    return rating.MatchRecord(game.attacker, game.defender, result)


def role_balanced_games(candidate, opponent, games: int, seed: int,
                        search_fn=mcts.run_searches) -> list[GameResult]:
    """Half the games with the candidate attacking, half defending."""
    if games % 2:
        raise ValueError("role-balanced evaluation needs an even number of games")
    pairings = [(candidate, opponent)] * (games // 2) + [(opponent, candidate)] * (games // 2)
    return play_games(pairings, seed, search_fn)


def train_batch_steps(params, opt, buffer: sp.ReplayBuffer, cfg: RunConfig, rng, iteration: int):
    """Run the iteration's optimizer steps; returns params, opt and mean loss terms."""
    sums = {"total": 0.0, "policy_ce": 0.0, "value_mse": 0.0, "entropy_metric": 0.0}
    steps = cfg.steps_per_iteration_opt
    if len(buffer) < cfg.batch_size or steps == 0:
        return params, opt, None, 0
    for _ in range(steps):
        batch = buffer.sample(cfg.batch_size, rng, augment=cfg.augmentation)
        total, terms, grads = net.loss_and_gradients(params, batch)
        if not math.isfinite(total):
            raise net.TrainingDivergence(f"non-finite loss in iteration {iteration}")
        try:
            params, opt = net.adamw_update(params, grads, opt)
        except net.TrainingDivergence as e:
            raise net.TrainingDivergence(f"iteration {iteration}: {e}") from e
        sums["total"] += total
        for k in ("policy_ce", "value_mse", "entropy_metric"):
            sums[k] += terms[k]
    return params, opt, {k: v / steps for k, v in sums.items()}, steps


class Trainer:
    def __init__(self, cfg: RunConfig, out: Path, search_fn=mcts.run_searches):
        self.cfg = cfg.validate()
        self.out = Path(out)
        self.search_fn = search_fn
        self.metrics_path = self.out / "metrics.csv"
        self.selfplay_path = self.out / "selfplay.csv"
        self.matches_path = self.out / "matches.jsonl"
        self.games_path = self.out / "games.jsonl"
        self.pool_path = self.out / "pool.json"

    def _setup(self):
        (self.out / "checkpoints").mkdir(parents=True, exist_ok=True)
        cfg_path = self.out / "config.json"
        if cfg_path.exists():
            stored = json.loads(cfg_path.read_text())
            if stored != self.cfg.to_dict():
                raise TrainingError(f"{cfg_path} differs from the requested config; use a fresh --out")
        else:
            save_config(cfg_path, self.cfg)
        latest = latest_checkpoint(self.out)
        if latest is None:
            params = net.init_params(self.cfg.net_config(), self.cfg.seed)
            opt = net.init_opt_state(params, self.cfg.optim_config())
            anchor = net.Checkpoint(params, self.cfg.net_config(), 0, opt, {"seed": self.cfg.seed})
            net.save_checkpoint(checkpoint_path(self.out, 0), anchor)
            return params, opt, 1, False
        ckpt = net.load_checkpoint(latest)
        if ckpt.opt_state is None:
            raise TrainingError(f"{latest} has no optimizer state and cannot be resumed")
        # drop any metrics written after the checkpoint, e.g. by a run killed mid-iteration
        self._truncate_csv(self.metrics_path, ckpt.iteration)
        self._truncate_csv(self.selfplay_path, ckpt.iteration)
        log.info("resuming from %s (iteration %d)", latest, ckpt.iteration)
        return ckpt.params, ckpt.opt_state, ckpt.iteration + 1, True

    @staticmethod
    def _truncate_csv(path: Path, last_iteration: int):
        if not path.exists():
            return
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= last_iteration]
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(keep)

    def _pool(self) -> sp.OpponentPool:
        if self.pool_path.exists():
            return sp.OpponentPool.from_dict(json.loads(self.pool_path.read_text()))
        return sp.OpponentPool((0, str(checkpoint_path(self.out, 0))), self.cfg.pool_cap)

    def run(self) -> Path:
        cfg = self.cfg
        params, opt, start, resumed = self._setup()
        pool = self._pool()
        buffer = sp.ReplayBuffer(cfg.buffer_capacity)
        sp_cfg = cfg.selfplay_config()
        # fresh environments per (seed, starting iteration) so a resume does not replay old games
        env_seed = int(np.random.SeedSequence([cfg.seed, start]).generate_state(1)[0])
        state = sp.SelfPlayState(cfg.parallel_games, seed=env_seed)
        games_log = lambda rec: append_jsonl(self.games_path, rec)  # noqa: E731
        use_pool = pool if cfg.past_self_play else None

        if resumed and start <= cfg.iterations:
            # the buffer is not persisted: refill it before optimizing again
            for _ in range(cfg.buffer_iterations):
                if len(buffer) >= cfg.batch_size:
                    break
                sp.run_selfplay_iteration(params, use_pool, sp_cfg, buffer, state, start - 1, self.search_fn)

        last = checkpoint_path(self.out, start - 1)
        for it in range(start, cfg.iterations + 1):
            t0 = time.time()
            stats = sp.run_selfplay_iteration(params, use_pool, sp_cfg, buffer, state, it, self.search_fn, games_log)
            t1 = time.time()
            rng = np.random.default_rng([cfg.seed, it, 1])
            params, opt, losses, steps = train_batch_steps(params, opt, buffer, cfg, rng, it)
            t2 = time.time()
            last = checkpoint_path(self.out, it)
            elo = self._evaluate(it, params, pool, np.random.default_rng([cfg.seed, it, 2]))
            if elo is not None:
                pool.add(it, last)
            # rows first, checkpoint last: a resume truncates rows newer than the checkpoint
            append_csv(self.selfplay_path, SELFPLAY_COLUMNS, stats.row())
            append_csv(self.metrics_path, METRIC_COLUMNS, self._metrics(it, stats, losses, steps, opt, elo))
            self.pool_path.write_text(json.dumps(pool.to_dict(), indent=1))
            net.save_checkpoint(last, net.Checkpoint(params, cfg.net_config(), it, opt, {"seed": cfg.seed}))
            log.info("iteration %d: %d games, buffer %d, self-play %.0fs, training %.0fs (%d steps)%s",
                     it, stats.games, len(buffer), t1 - t0, t2 - t1, steps,
                     "" if losses is None else f", loss {losses['total']:.4f}")
        return last

    def _metrics(self, it, stats: sp.IterationStats, losses, steps, opt, elo) -> dict:
        g = stats.games
        row = {
            "iteration": it, "games": g, "buffer_size": stats.buffer_size, "optimizer_steps": steps,
            "root_policy_entropy": stats.mean_root_entropy,
            "mean_pieces_remaining": stats.mean_pieces_remaining if g else None,
            "attacker_winrate": stats.attacker_wins / g if g else None,
            "defender_winrate": stats.defender_wins / g if g else None,
            "draw_rate": stats.draws / g if g else None,
            "learning_rate": net.lr_at(opt.step, opt.config),
            "elo_estimate": elo,
        }
        if losses is not None:
            row.update(policy_loss=losses["policy_ce"], value_loss=losses["value_mse"],
                       total_loss=losses["total"], policy_entropy=losses["entropy_metric"])
        return row

    def _evaluate(self, it, params, pool: sp.OpponentPool, rng) -> Optional[float]:
        cfg = self.cfg
        sched = cfg.eval_schedule()
        if not rating.is_eval_iteration(it, sched):
            return None
        search = mcts.SearchConfig(cfg.simulations, cfg.max_considered, cfg.c_visit, cfg.c_scale)
        me = SearchAgent(f"iter{it}", params, search)
        opponents = [m for m in pool.members() if m[0] != it]
        records = []
        for pairing in rating.schedule_evaluations(it, opponents, sched, rng):
            o_it, path = pairing.opponent
            opp = SearchAgent(f"iter{o_it}", pool.load(path).params, search)
            seed = int(rng.integers(2**63))
            for game in role_balanced_games(me, opp, pairing.games, seed, self.search_fn):
                records.append(match_record(game))
        rating.append_matches(self.matches_path, records)
        all_matches = rating.read_matches([self.matches_path])
        model = rating.fit(all_matches, anchor="iter0")
        return model.ratings.get(me.agent_id)


def train(cfg: RunConfig, out, search_fn=mcts.run_searches) -> Path:
    return Trainer(cfg, Path(out), search_fn).run()


# -- standalone evaluation -------------------------------------------------------

def load_agent(spec: str, simulations: int, used_ids: set, max_considered: int = 16):
    """(agent, net config or None) for 'random' or a checkpoint path.

    Agent ids are made unique with a #n suffix, so a checkpoint can play itself.
    """
    if spec == "random":
        agent = RandomAgent("random")
        cfg = None
    else:
        ckpt = net.load_checkpoint(spec)
        agent = SearchAgent(ckpt.agent_id, ckpt.params, mcts.SearchConfig(simulations, max_considered))
        cfg = ckpt.net_config
    base, n = agent.agent_id, 1
    while agent.agent_id in used_ids:
        n += 1
        agent.agent_id = f"{base}#{n}"
    used_ids.add(agent.agent_id)
    return agent, cfg


def evaluate(candidate: str, opponents: Sequence[str], games: int, simulations: int, seed: int,
             search_fn=mcts.run_searches) -> tuple[list[rating.MatchRecord], list[GameResult]]:
    used: set = set()
    me, my_cfg = load_agent(candidate, simulations, used)
    records, results = [], []
    for k, spec in enumerate(opponents):
        opp, cfg = load_agent(spec, simulations, used)
        if my_cfg is not None and cfg is not None and cfg != my_cfg:
            raise net.CheckpointError(f"{spec}: network config {cfg} is incompatible with {candidate} ({my_cfg})")
        played = role_balanced_games(me, opp, games, seed + k, search_fn)
        results += played
        records += [match_record(g) for g in played]
    return records, results


def win_rate(results: Sequence[GameResult], agent_id: str) -> float:
    wins = 0
    for g in results:
        w = g.outcome.winner
        if w is not None and (g.attacker if w == 0 else g.defender) == agent_id:
            wins += 1
    return wins / len(results) if results else 0.0
