from __future__ import annotations

import csv
import io
import json
import subprocess
import sys

import pytest

from sga.cli import EXIT_DATA, EXIT_FILE, EXIT_USAGE, main
from sga.config import ConfigError, resolve


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """discover -> extract on 5 seeded 2-hop chains."""
    d = tmp_path_factory.mktemp("pipe")
    assert main(["discover", "--env", "chain", "--hops", "2", "--distractors", "2", "--count", "5",
                 "--seed", "100", "--backend", "mock", "--checkpoint", str(d / "ckpt.json"),
                 "--trajectories", str(d / "traj")]) == 0
    assert main(["extract", "--trajectories", str(d / "traj"), "--schemas", str(d / "traj" / "tools.json"),
                 "--out", str(d / "store.jsonl")]) == 0
    return d


def test_discover_smoke(tmp_path, capsys):
    code, out, _ = run(["discover", "--env", "chain", "--hops", "2", "--backend", "mock", "--seed", "1",
                        "--checkpoint", tmp_path / "c.json"], capsys)
    assert code == 0
    data = json.loads((tmp_path / "c.json").read_text())
    assert data["v"] == 1 and len(data["trees"]) == 1
    assert json.loads(out.splitlines()[0])["best_reward"] == pytest.approx(0.9 + 0.1 / 3)


def test_store_query_missing_file(tmp_path, capsys):
    code, _, err = run(["store", "query", "--store", tmp_path / "nope.jsonl", "--text", "x"], capsys)
    assert code == EXIT_FILE and json.loads(err)["error"] == "file"


def test_usage_errors(capsys):
    code, _, err = run(["bogus"], capsys)
    assert code == EXIT_USAGE and json.loads(err.strip().splitlines()[-1])["error"] == "usage"
    assert run([], capsys)[0] == EXIT_USAGE


def test_bad_config_is_data_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"mcts": {"nope": 1}}')
    code, _, _ = run(["discover", "--config", cfg, "--checkpoint", tmp_path / "c.json"], capsys)
    assert code == EXIT_DATA


def test_extract_and_query(pipeline, capsys):
    lines = (pipeline / "store.jsonl").read_text().splitlines()
    assert len(lines) == 2 and all(json.loads(l)["v"] == 1 for l in lines)
    code, out, _ = run(["store", "query", "--store", pipeline / "store.jsonl", "--text", "find the author",
                        "--slots", "<WORK_ID>", "--k", "1"], capsys)
    assert code == 0 and len(out.splitlines()) == 1


def test_eval_two_cohorts(pipeline, tmp_path, capsys):
    code, out, _ = run(["eval", "--env", "chain", "--hops", "2", "--distractors", "2", "--count", "6",
                        "--seed", "300", "--store", pipeline / "store.jsonl", "--episodes", tmp_path / "ep.csv"], capsys)
    assert code == 0
    rows = {r["cohort"]: r for r in csv.DictReader(io.StringIO(out))}
    assert set(rows) == {"with-store", "empty-store"}
    assert float(rows["with-store"]["success_rate"]) == 1.0
    assert float(rows["empty-store"]["success_rate"]) == 0.0
    assert len((tmp_path / "ep.csv").read_text().splitlines()) == 13


def test_run_writes_log(pipeline, tmp_path, capsys):
    task = tmp_path / "task.json"
    task.write_text(json.dumps({"seed": 42, "hops": 2, "distractors": 2}))
    code, out, _ = run(["run", "--task", task, "--store", pipeline / "store.jsonl", "--log", tmp_path / "log.jsonl"],
                       capsys)
    assert code == 0
    (row,) = csv.DictReader(io.StringIO(out))
    assert row["success"] == "1" and row["tool_steps"] == "2"
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 3


def test_stats_and_familiarity(pipeline, capsys):
    code, out, _ = run(["stats", "--tree", pipeline / "ckpt.json"], capsys)
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == 5
    assert all(int(r["node_count"]) < int(r["expanded_edges"]) + 1 for r in rows)
    tools = pipeline / "traj" / "tools.json"
    code, out, _ = run(["familiarity", "--src", tools, "--tgt", tools], capsys)
    last = list(csv.DictReader(io.StringIO(out)))[-1]
    assert code == 0 and last["tool"] == "__mean__" and float(last["cosine"]) == pytest.approx(1.0)


def test_store_build_from_plain_atoms(pipeline, tmp_path, capsys):
    code, _, _ = run(["extract", "--trajectories", pipeline / "traj", "--schemas", pipeline / "traj" / "tools.json",
                      "--out", tmp_path / "atoms.jsonl", "--no-embed"], capsys)
    assert code == 0
    code, out, _ = run(["store", "build", "--atoms", tmp_path / "atoms.jsonl", "--out", tmp_path / "s.jsonl"], capsys)
    assert code == 0 and json.loads(out) == {"atoms": 2}
    assert (tmp_path / "s.jsonl").read_text() == (pipeline / "store.jsonl").read_text()


def test_config_precedence(tmp_path):
    assert resolve().mcts.exploration_c == 1.41 and resolve().store.beta == 0.3
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mcts": {"c": 2.0, "iterations": 7}, "store": {"beta": 0.5}}))
    r = resolve(cfg, {"mcts.c": 3.0, "mcts.iterations": None})
    assert r.mcts.exploration_c == 3.0 and r.mcts.max_iterations == 7 and r.store.beta == 0.5
    assert r.mcts.max_depth == 10 and r.mcts.reward.lam == 0.1 and r.store.top_k == 3
    assert r.sampling.temperature == 0.6 and r.sampling.top_p == 0.95 and r.sampling.top_k == 20
    with pytest.raises(ConfigError):
        resolve(overrides={"store.gamma": 1})


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "sga.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("sga ")
