import csv
import io
import json
import shutil
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import pytest

from tablutzero import cli
from tablutzero import network as net
from tablutzero import selfplay as sp
from tablutzero.agents import TABLUT, NetEvaluator
from tablutzero.config import PRESETS, ConfigError, RunConfig, load_config
from tablutzero.rules import GameState, Side, board_from_text, legal_moves
from tablutzero.train import METRIC_COLUMNS, checkpoint_path, train

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SMOKE = CONFIGS / "smoke.json"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert cli.main(["train", "--config", str(SMOKE), "--out", str(out), "--threads", "1"]) == 0
    return out


# -- config --------------------------------------------------------------------

def test_defaults_are_full_scale():
    c = RunConfig()
    assert (c.iterations, c.parallel_games, c.steps_per_iteration, c.simulations) == (100, 1024, 256, 128)
    assert (c.batch_size, c.total_training_steps, c.steps_per_iteration_opt) == (512, 102_400, 1024)
    assert (c.blocks, c.filters, c.peak_lr, c.min_lr, c.warmup_steps) == (8, 128, 0.002, 1e-5, 500)
    assert c.buffer_capacity == 16 * 1024 * 256
    assert c.past_opponent_fraction == 0.25
    assert (c.eval_start, c.eval_period, c.eval_opponents, c.pool_cap) == (20, 5, 4, 10)


def test_presets_only_touch_the_three_toggles():
    toggles = {"augmentation", "buffer_iterations", "past_self_play"}
    full = asdict(load_config(preset="full"))
    assert full == asdict(RunConfig())
    for name in PRESETS:
        changed = {k for k, v in asdict(load_config(preset=name)).items() if v != full[k]}
        assert changed <= toggles
    base = load_config(preset="baseline")
    assert (base.augmentation, base.buffer_iterations, base.past_self_play) == (False, 8, False)
    assert base.selfplay_config().past_opponent_fraction == 0.0
    mid = load_config(preset="aug_buffer")
    assert (mid.augmentation, mid.buffer_iterations, mid.past_self_play) == (True, 16, False)


@pytest.mark.parametrize("bad", [
    {"batch_size": 10**9},
    {"games_per_pairing": 7},
    {"simulations": 1},
])
def test_validation_rejects(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_config_file_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema_version": 1, "iteratons": 3}))
    with pytest.raises(ConfigError, match="iteratons"):
        load_config(p)
    p.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(ConfigError, match="schema"):
        load_config(p)
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(p)


def test_config_round_trip():
    c = load_config(CONFIGS / "desk_scale.json", preset="baseline", seed=7)
    assert RunConfig.from_dict(c.to_dict()) == c
    assert c.seed == 7 and not c.augmentation
    assert {f.name for f in fields(RunConfig)} | {"schema_version"} == set(c.to_dict())


def test_bad_preset_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--preset", "nope"])
    assert e.value.code == 2


# -- train ---------------------------------------------------------------------

def test_smoke_run_outputs(smoke_run):
    ckpts = sorted(p.name for p in (smoke_run / "checkpoints").iterdir())
    # ckpt_0000 is the untrained rating anchor
    assert ckpts == ["ckpt_0000.bin", "ckpt_0001.bin", "ckpt_0002.bin"]
    rows = read_csv(smoke_run / "metrics.csv")
    assert [r["iteration"] for r in rows] == ["1", "2"]
    assert list(rows[0]) == METRIC_COLUMNS
    for r in rows:
        assert float(r["root_policy_entropy"]) >= 0
        if r["games"] != "0":
            rates = [float(r[k]) for k in ("attacker_winrate", "defender_winrate", "draw_rate")]
            assert all(0 <= x <= 1 for x in rates) and sum(rates) == pytest.approx(1)
        if r["policy_entropy"]:
            assert float(r["policy_entropy"]) >= 0
    # smoke config evaluates at iteration 2 against the anchor
    assert rows[1]["elo_estimate"] != ""
    assert (smoke_run / "matches.jsonl").stat().st_size > 0
    assert net.load_checkpoint(smoke_run / "checkpoints" / "ckpt_0002.bin").iteration == 2


def test_resume_continues_from_checkpoint(smoke_run, tmp_path, monkeypatch):
    out = tmp_path / "run"
    shutil.copytree(smoke_run, out)
    # a kill after the iteration-2 rows were written but before its checkpoint
    (out / "checkpoints" / "ckpt_0002.bin").unlink()
    seen = []
    real = sp.run_selfplay_iteration

    def spy(params, pool, cfg, buffer, state, iteration=0, *a, **kw):
        seen.append((iteration, {k: v.copy() for k, v in params.items()}))
        return real(params, pool, cfg, buffer, state, iteration, *a, **kw)

    monkeypatch.setattr(sp, "run_selfplay_iteration", spy)
    train(load_config(SMOKE), out)
    ckpt = net.load_checkpoint(checkpoint_path(out, 1))
    first_params = seen[0][1]
    assert seen[-1][0] == 2
    assert sorted(first_params) == sorted(ckpt.params)
    for k in ckpt.params:
        assert first_params[k].tobytes() == ckpt.params[k].tobytes()
    assert [r["iteration"] for r in read_csv(out / "metrics.csv")] == ["1", "2"]
    assert checkpoint_path(out, 2).exists()


def test_finished_run_is_not_replayed(smoke_run, tmp_path, monkeypatch):
    out = tmp_path / "run"
    shutil.copytree(smoke_run, out)

    def boom(*a, **kw):
        raise AssertionError("self-play ran on a finished run")

    monkeypatch.setattr(sp, "run_selfplay_iteration", boom)
    assert train(load_config(SMOKE), out) == checkpoint_path(out, 2)


def test_resume_refuses_a_different_config(smoke_run, tmp_path):
    out = tmp_path / "run"
    shutil.copytree(smoke_run, out)
    with pytest.raises(Exception, match="differs"):
        train(replace(load_config(SMOKE), seed=5), out)


def test_export_metrics(smoke_run, tmp_path, capsys):
    assert cli.main(["export-metrics", str(smoke_run)]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == METRIC_COLUMNS
    assert len(rows) == 3
    assert "policy_entropy" in rows[0] and "mean_pieces_remaining" in rows[0]
    assert cli.main(["export-metrics", str(tmp_path)]) == 0
    assert capsys.readouterr().out.strip() == ",".join(METRIC_COLUMNS)


# -- eval and rate -------------------------------------------------------------

def test_eval_against_itself_and_rate(smoke_run, tmp_path, capsys):
    ckpt = str(smoke_run / "checkpoints" / "ckpt_0002.bin")
    matches = tmp_path / "m.jsonl"
    args = ["eval", ckpt, "--opponent", ckpt, "--games", "4", "--simulations", "4", "--matches", str(matches)]
    assert cli.main(args) == 0
    recs = [json.loads(line) for line in matches.read_text().splitlines()]
    assert len(recs) == 4
    assert {r["first"] for r in recs} | {r["second"] for r in recs} == {"iter2", "iter2#2"}
    assert all(r["first"] != r["second"] for r in recs)
    capsys.readouterr()
    assert cli.main(["rate", str(matches), "--anchor", "iter2", "--csv", str(tmp_path / "r.csv")]) == 0
    table = read_csv(tmp_path / "r.csv")
    assert {r["agent"] for r in table} == {"iter2", "iter2#2"}
    assert capsys.readouterr().out.startswith("agent,elo,games")


def test_eval_against_random(smoke_run, tmp_path):
    ckpt = str(smoke_run / "checkpoints" / "ckpt_0001.bin")
    matches = tmp_path / "m.jsonl"
    assert cli.main(["eval", ckpt, "--opponent", "random", "--games", "2", "--simulations", "4",
                     "--matches", str(matches)]) == 0
    recs = [json.loads(line) for line in matches.read_text().splitlines()]
    assert [(r["first"], r["second"]) for r in recs] == [("iter1", "random"), ("random", "iter1")]


def test_eval_rejects_mismatched_networks(smoke_run, tmp_path, capsys):
    other = tmp_path / "other.bin"
    cfg = net.NetConfig(1, 8, 8)
    params = net.init_params(cfg, 0)
    net.save_checkpoint(other, net.Checkpoint(params, cfg, 3, None, {}))
    ckpt = str(smoke_run / "checkpoints" / "ckpt_0001.bin")
    assert cli.main(["eval", ckpt, "--opponent", str(other), "--games", "2", "--matches",
                     str(tmp_path / "m.jsonl")]) == 1
    assert "incompatible" in capsys.readouterr().err


def test_rate_symmetric_file(tmp_path, capsys):
    path = tmp_path / "m.jsonl"
    lines = []
    for first, second in (("iter0", "x"), ("x", "iter0")):
        for result in ("first_win", "second_win", "draw"):
            lines.append(json.dumps({"first": first, "second": second, "result": result}))
    path.write_text("\n".join(lines) + "\n")
    assert cli.main(["rate", str(path)]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    elo = {r["agent"]: float(r["elo"]) for r in rows}
    assert abs(elo["x"] - elo["iter0"]) < 0.5


def test_rate_errors(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(SystemExit) as e:
        cli.main(["rate", str(empty)])
    assert e.value.code == 2
    split = tmp_path / "split.jsonl"
    split.write_text('{"first": "iter0", "second": "a", "result": "draw"}\n'
                     '{"first": "b", "second": "c", "result": "draw"}\n')
    assert cli.main(["rate", str(split)]) == 1
    assert "not connected" in capsys.readouterr().err


# -- play ----------------------------------------------------------------------

def play(ckpt, side, text):
    args = cli.build_parser().parse_args(["play", str(ckpt), "--side", side, "--simulations", "4"])
    out = io.StringIO()
    code = cli.cmd_play(args, stdin=io.StringIO(text), stdout=out)
    return code, out.getvalue()


def test_play_rejects_illegal_move_and_exits_on_eof(smoke_run):
    ckpt = smoke_run / "checkpoints" / "ckpt_0001.bin"
    code, out = play(ckpt, "attacker", "e5-e6\nnonsense\n")
    assert code == 0
    assert "illegal move e5-e6; legal moves:" in out
    assert "could not parse" in out


def test_play_dump_is_search_json(smoke_run):
    ckpt = smoke_run / "checkpoints" / "ckpt_0001.bin"
    code, out = play(ckpt, "defender", "dump\nquit\n")
    assert code == 0
    line = next(x for x in out.splitlines() if "{" in x)
    dump = json.loads(line[line.index("{"):])
    keys = {"actions", "visits", "q", "gumbel", "prior", "improved_policy", "chosen_action", "network_value"}
    assert keys <= set(dump)
    assert "agent plays" in out


def test_forced_move_is_played_without_search():
    board = board_from_text("""
        .AD......
        .........
        .D.......
        .........
        .........
        .........
        ......K..
        .........
        .........""")
    state = GameState.from_board(board, Side.ATTACKER)
    assert [str(m) for m in legal_moves(state)] == ["b9-b8"]

    def no_search(*a):
        raise AssertionError("searched a forced move")

    ev = NetEvaluator(net.init_params(net.NetConfig(1, 4, 4), 0))
    ev.single = no_search
    action, dump = cli.agent_move((state,), ev, 8, np.random.default_rng(0))
    assert dump["forced"] and TABLUT.legal_actions((state,)).tolist() == [action]
