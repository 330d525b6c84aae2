"""Maximum-likelihood Elo ratings with a first-mover advantage and a draw parameter.

For a game where the first mover is rated ``d`` Elo above the second:

    p_first  = f(d + adv - draw)
    p_second = f(-d - adv - draw)
    p_draw   = 1 - p_first - p_second,    f(x) = 1 / (1 + 10^(-x / 400))

The first mover is always the attacker.  Ratings are fitted by coordinate
ascent (golden-section line search per parameter) with the anchor agent held
at 0.  Agents that never lose or draw have no finite estimate; their rating
is capped at +-RATING_CAP and flagged as saturated.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

RATING_CAP = 1200.0
ELO_SCALE = math.log(10) / 400
GOLDEN = (math.sqrt(5) - 1) / 2


class RatingError(ValueError):
    pass


class InvalidParameterError(RatingError):
    pass


class UnidentifiableError(RatingError):
    pass


class MatchResult(Enum):
    FIRST_WIN = "first_win"
    SECOND_WIN = "second_win"
    DRAW = "draw"


RESULT_COLUMN = {MatchResult.FIRST_WIN: 0, MatchResult.DRAW: 1, MatchResult.SECOND_WIN: 2}


@dataclass(frozen=True)
class MatchRecord:
    first: str  # plays the attacker
    second: str
    result: MatchResult

    def __post_init__(self):
        if self.first == self.second:
            raise RatingError(f"agent {self.first!r} cannot play itself")

    def to_json(self) -> str:
        return json.dumps({"first": self.first, "second": self.second, "result": self.result.value})

    @classmethod
    def from_dict(cls, d: dict) -> "MatchRecord":
        return cls(d["first"], d["second"], MatchResult(d["result"]))


@dataclass
class RatingModel:
    ratings: dict[str, float]
    advantage: float = 0.0
    draw: float = 0.0
    anchor: Optional[str] = None
    saturated: set = field(default_factory=set)
    sweeps: int = 0


def _f(x):
    return 1.0 / (1.0 + np.power(10.0, -np.asarray(x, dtype=float) / 400.0))


def game_probabilities(d: float, adv: float, draw: float) -> tuple[float, float, float]:
    """(p_first, p_draw, p_second) for a first mover rated ``d`` above the second."""
    if draw < 0 or not all(map(math.isfinite, (d, adv, draw))):
        raise InvalidParameterError(f"invalid parameters d={d} adv={adv} draw={draw}")
    p_first = float(_f(d + adv - draw))
    p_second = float(_f(-d - adv - draw))
    return p_first, max(0.0, 1.0 - p_first - p_second), p_second


class _Tables:
    """Match counts aggregated per ordered pair, agents in sorted order."""

    def __init__(self, matches: Iterable[MatchRecord]):
        counts: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0, 0])
        for m in matches:
            counts[(m.first, m.second)][RESULT_COLUMN[m.result]] += 1
        self.agents = sorted({a for pair in counts for a in pair})
        index = {a: i for i, a in enumerate(self.agents)}
        pairs = sorted(counts)
        self.first = np.array([index[p[0]] for p in pairs], dtype=np.int64)
        self.second = np.array([index[p[1]] for p in pairs], dtype=np.int64)
        self.counts = np.array([counts[p] for p in pairs], dtype=float).reshape(-1, 3)
        self.index = index

    def games(self) -> dict[str, int]:
        out = {a: 0 for a in self.agents}
        for i, j, c in zip(self.first, self.second, self.counts):
            out[self.agents[i]] += int(c.sum())
            out[self.agents[j]] += int(c.sum())
        return out

    def loglik(self, r: np.ndarray, adv: float, draw: float) -> float:
        d = r[self.first] - r[self.second]
        pf = _f(d + adv - draw)
        ps = _f(-d - adv - draw)
        pd = 1.0 - pf - ps
        probs = np.stack([pf, pd, ps], axis=1)
        used = self.counts > 0
        if np.any(probs[used] <= 0):
            return -math.inf
        return float(np.sum(self.counts[used] * np.log(probs[used])))


def _vector(model: RatingModel, tables: _Tables) -> np.ndarray:
    missing = [a for a in tables.agents if a not in model.ratings]
    if missing:
        raise RatingError(f"agents missing from the model: {missing}")
    return np.array([model.ratings[a] for a in tables.agents], dtype=float)


def log_likelihood(model: RatingModel, matches: Iterable[MatchRecord]) -> float:
    tables = _Tables(matches)
    if not len(tables.counts):
        return 0.0
    if model.draw < 0:
        raise InvalidParameterError("draw parameter must be non-negative")
    ll = tables.loglik(_vector(model, tables), model.advantage, model.draw)
    if ll == -math.inf:
        log.warning("an observed result has probability zero under the model")
    return ll


def log_likelihood_gradient(model: RatingModel, matches: Iterable[MatchRecord]):
    """Analytic gradient: ({agent: d/d rating}, d/d advantage, d/d draw)."""
    tables = _Tables(matches)
    r = _vector(model, tables)
    d = r[tables.first] - r[tables.second]
    pf = _f(d + model.advantage - model.draw)
    ps = _f(-d - model.advantage - model.draw)
    pd = 1.0 - pf - ps
    wf, wd, ws = tables.counts.T
    c = ELO_SCALE
    # derivative of each log-probability with respect to d (equal to that w.r.t. adv) and draw
    dd = wf * c * (1 - pf) - ws * c * (1 - ps) - wd * c * (pf * (1 - pf) - ps * (1 - ps)) / pd
    ddraw = -wf * c * (1 - pf) - ws * c * (1 - ps) + wd * c * (pf * (1 - pf) + ps * (1 - ps)) / pd
    grad = np.zeros(len(r))
    np.add.at(grad, tables.first, dd)
    np.add.at(grad, tables.second, -dd)
    return dict(zip(tables.agents, grad.tolist())), float(dd.sum()), float(ddraw.sum())


def _check_connected(tables: _Tables, anchor: str) -> None:
    if anchor not in tables.index:
        raise UnidentifiableError(f"anchor {anchor!r} has no games")
    nbrs = defaultdict(set)
    for i, j in zip(tables.first, tables.second):
        nbrs[i].add(j)
        nbrs[j].add(i)
    seen = {tables.index[anchor]}
    queue = deque(seen)
    while queue:
        for j in nbrs[queue.popleft()]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    for i, a in enumerate(tables.agents):
        if i not in seen:
            raise UnidentifiableError(f"agent {a!r} is not connected to the anchor {anchor!r}")


def _golden_max(fn, lo, hi, tol=1e-4):
    a, b = lo, hi
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1, f2 = fn(x1), fn(x2)
    while b - a > tol:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = fn(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = fn(x1)
    x = (a + b) / 2
    # keep the endpoint when the optimum sits on the boundary
    best = max((fn(lo), lo), (fn(x), x), (fn(hi), hi))
    return best[1]


def fit(matches: Sequence[MatchRecord], anchor: str = "iter0", max_sweeps: int = 10_000,
        tol: float = 0.01, init: Optional[RatingModel] = None) -> RatingModel:
    """Maximum-likelihood ratings with ``anchor`` fixed at 0."""
    tables = _Tables(matches)
    _check_connected(tables, anchor)
    a0 = tables.index[anchor]
    n = len(tables.agents)
    if init is not None:
        r = np.array([init.ratings.get(a, 0.0) for a in tables.agents])
        r -= r[a0]
        adv, draw = init.advantage, init.draw
    else:
        r = np.zeros(n)
        adv = 0.0
        draw = 100.0 if tables.counts[:, 1].sum() > 0 else 0.0
    free = [i for i in range(n) if i != a0]
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        change = 0.0
        for i in free:
            def ll_r(x, i=i):
                old = r[i]
                r[i] = x
                v = tables.loglik(r, adv, draw)
                r[i] = old
                return v
            new = _golden_max(ll_r, -RATING_CAP, RATING_CAP)
            change = max(change, abs(new - r[i]))
            r[i] = new
        new = _golden_max(lambda x: tables.loglik(r, x, draw), -RATING_CAP, RATING_CAP)
        change, adv = max(change, abs(new - adv)), new
        new = _golden_max(lambda x: tables.loglik(r, adv, x), 0.0, RATING_CAP)
        change, draw = max(change, abs(new - draw)), new
        if change < tol:
            break
    saturated = {tables.agents[i] for i in free if abs(r[i]) >= RATING_CAP - 0.01}
    for a in saturated:
        log.warning("rating of %s saturates at the %.0f cap", a, RATING_CAP)
    return RatingModel(dict(zip(tables.agents, r.tolist())), adv, draw, anchor, saturated, sweeps)


# -- evaluation schedule -------------------------------------------------------

@dataclass(frozen=True)
class EvalSchedule:
    start_iteration: int = 20
    period: int = 5
    opponents_per_eval: int = 4
    pool_cap: int = 10
    games_per_pairing: int = 8

    def __post_init__(self):
        if self.games_per_pairing < 2 or self.games_per_pairing % 2:
            raise ValueError("games_per_pairing must be a positive even number")
        if self.period < 1 or self.opponents_per_eval < 1:
            raise ValueError("period and opponents_per_eval must be positive")


@dataclass(frozen=True)
class Pairing:
    opponent: object
    games: int  # half with the candidate as attacker, half as defender


def is_eval_iteration(iteration: int, sched: EvalSchedule) -> bool:
    return iteration >= sched.start_iteration and (iteration - sched.start_iteration) % sched.period == 0


def schedule_evaluations(iteration: int, opponents: Sequence, sched: EvalSchedule,
                         rng: np.random.Generator) -> list[Pairing]:
    """Pairings for ``iteration``; ``opponents`` is the pool including the anchor."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if not is_eval_iteration(iteration, sched) or not opponents:
        return []
    k = min(sched.opponents_per_eval, len(opponents))
    picks = sorted(rng.choice(len(opponents), size=k, replace=False).tolist())
    return [Pairing(opponents[i], sched.games_per_pairing) for i in picks]


# -- files ---------------------------------------------------------------------

def read_matches(paths: Iterable) -> list[MatchRecord]:
    out = []
    for path in paths:
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        out.append(MatchRecord.from_dict(json.loads(line)))
                    except (KeyError, ValueError) as e:
                        raise RatingError(f"{path}:{n}: bad match record: {e}") from e
    return out


def append_matches(path, records: Iterable[MatchRecord]) -> None:
    with open(path, "a") as fh:
        for m in records:
            fh.write(m.to_json() + "\n")


def rating_rows(model: RatingModel, matches: Sequence[MatchRecord]) -> list[dict]:
    games = _Tables(matches).games()
    order = sorted(model.ratings, key=lambda a: (-model.ratings[a], a))
    return [{"agent": a, "elo": round(model.ratings[a], 2), "games": games.get(a, 0)} for a in order]


def write_ratings_csv(path_or_file, model: RatingModel, matches: Sequence[MatchRecord]) -> None:
    rows = rating_rows(model, matches)
    if isinstance(path_or_file, (str, Path)):
        with open(path_or_file, "w", newline="") as fh:
            _write(fh, rows)
    else:
        _write(path_or_file, rows)


def _write(fh, rows):
    w = csv.DictWriter(fh, fieldnames=["agent", "elo", "games"])
    w.writeheader()
    w.writerows(rows)
