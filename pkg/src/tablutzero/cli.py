"""Command line entry point: train, eval, rate, play, export-metrics."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import encoding as enc
from . import mcts
from . import network as net
from . import rating
from .agents import TABLUT, NetEvaluator
from .config import PRESETS, ConfigError, load_config
from .rules import IllegalMoveError, Side, initial_state, legal_moves, parse_move, render
from .train import METRIC_COLUMNS, TrainingError, evaluate, train, win_rate

DEFAULT_OUT = "tablutzero_run"


class UsageError(Exception):
    pass


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get("TABLUTZERO_OUT") or DEFAULT_OUT)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.preset, args.seed)
    out = _out_dir(args)
    last = train(cfg, out)
    print(f"final checkpoint: {last}")
    return 0


def cmd_eval(args) -> int:
    if args.games < 2 or args.games % 2:
        raise UsageError("--games must be a positive even number")
    records, results = evaluate(args.candidate, args.opponent, args.games, args.simulations, args.seed or 0)
    out = Path(args.matches) if args.matches else _out_dir(args) / "matches.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    rating.append_matches(out, records)
    ids = sorted({g.attacker for g in results} | {g.defender for g in results})
    for agent_id in ids:
        played = [g for g in results if agent_id in (g.attacker, g.defender)]
        print(f"{agent_id}: {len(played)} games, win rate {win_rate(played, agent_id):.3f}")
    print(f"{len(records)} match records appended to {out}")
    return 0


def cmd_rate(args) -> int:
    matches = rating.read_matches(args.files)
    if not matches:
        raise UsageError("no match records in the given files")
    model = rating.fit(matches, anchor=args.anchor)
    rating.write_ratings_csv(sys.stdout, model, matches)
    if args.csv:
        rating.write_ratings_csv(args.csv, model, matches)
    print(f"# advantage {model.advantage:.1f}  draw {model.draw:.1f}", file=sys.stderr)
    if model.saturated:
        print(f"# saturated at +-{rating.RATING_CAP:.0f}: {', '.join(sorted(model.saturated))}", file=sys.stderr)
    return 0


def cmd_export_metrics(args) -> int:
    path = Path(args.run_dir) / "metrics.csv"
    writer = csv.writer(sys.stdout, lineterminator="\n")
    if not path.exists():
        writer.writerow(METRIC_COLUMNS)
        return 0
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            writer.writerow(row)
    return 0


def agent_move(history, evaluator: NetEvaluator, simulations: int, rng):
    """(action, root dump); a forced move is played without searching."""
    legal = legal_moves(history[0])
    if len(legal) == 1:
        action = enc.move_to_action(legal[0])
        return action, {"actions": [action], "chosen_action": action, "forced": True}
    cfg = mcts.SearchConfig(simulations, seed=int(rng.integers(2**63)))
    result = mcts.run_search(history, TABLUT, evaluator.single, cfg)
    return result.chosen_action, result.root_stats


def cmd_play(args, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    ckpt = net.load_checkpoint(args.checkpoint)
    evaluator = NetEvaluator(ckpt.params)
    human = Side.ATTACKER if args.side == "attacker" else Side.DEFENDER
    rng = np.random.default_rng(args.seed or 0)
    history = (initial_state(),)
    last_dump = None

    def say(*parts):
        print(*parts, file=stdout, flush=True)

    say(f"You play the {human.name.lower()}. Moves look like e3-e5; 'moves', 'dump' and 'quit' also work.")
    while not history[0].is_terminal:
        state = history[0]
        say(render(state))
        if state.to_move != human:
            action, last_dump = agent_move(history, evaluator, args.simulations, rng)
            say(f"agent plays {enc.action_to_move(action)}")
            history = TABLUT.apply(history, action)
            continue
        stdout.write("your move> ")
        stdout.flush()
        line = stdin.readline()
        if not line:
            say("")
            return 0
        text = line.strip()
        if text in ("quit", "exit"):
            return 0
        if text == "dump":
            say(json.dumps(last_dump))
            continue
        if text == "moves":
            say(" ".join(str(m) for m in legal_moves(state)))
            continue
        try:
            move = parse_move(text)
        except ValueError:
            say("could not parse that; use the form e3-e5")
            continue
        if move not in legal_moves(state):
            say(f"illegal move {text}; legal moves: {' '.join(str(m) for m in legal_moves(state)[:20])} ...")
            continue
        history = TABLUT.apply(history, enc.move_to_action(move))
    final = history[0]
    say(render(final))
    say(f"game over: {final.outcome.result.value} ({final.outcome.reason.value})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory (default $TABLUTZERO_OUT or ./tablutzero_run)")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads; 1 gives reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tablutzero", description="Self-play reinforcement learning for Tablut.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="run the self-play training loop (resumes if possible)")
    t.add_argument("--config", default=None, help="JSON run config")
    t.add_argument("--preset", choices=sorted(PRESETS), default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="play role-balanced games and record matches")
    e.add_argument("candidate", help="checkpoint path")
    e.add_argument("--opponent", action="append", required=True, help="checkpoint path or 'random' (repeatable)")
    e.add_argument("--games", type=int, default=8, help="games per opponent, half per role")
    e.add_argument("--simulations", type=int, default=128)
    e.add_argument("--matches", default=None, help="JSONL file to append to (default OUT/matches.jsonl)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rate", parents=[common], help="fit Elo ratings to match files")
    r.add_argument("files", nargs="+")
    r.add_argument("--anchor", default="iter0")
    r.add_argument("--csv", default=None, help="also write the table here")
    r.set_defaults(func=cmd_rate)

    pl = sub.add_parser("play", parents=[common], help="play against a checkpoint in the terminal")
    pl.add_argument("checkpoint")
    pl.add_argument("--side", choices=["attacker", "defender"], default="defender", help="your side")
    pl.add_argument("--simulations", type=int, default=128)
    pl.set_defaults(func=cmd_play)

    x = sub.add_parser("export-metrics", parents=[common], help="print a run's metrics CSV")
    x.add_argument("run_dir")
    x.set_defaults(func=cmd_export_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(message)s")
    limits = contextlib.nullcontext()
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limits = threadpool_limits(args.threads)
    try:
        with limits:
            return args.func(args)
    except (UsageError, ConfigError) as e:
        parser.error(str(e))
    except (rating.RatingError, net.CheckpointError, TrainingError, IllegalMoveError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except net.TrainingDivergence as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
