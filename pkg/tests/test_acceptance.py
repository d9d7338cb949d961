"""Acceptance gate: one test per criterion, each checked against its runtime bound.

Run with pytest (a summary block lists PASS/FAIL per criterion) or directly:
``python3 tests/test_acceptance.py``.
"""
from __future__ import annotations

import contextlib
import csv
import io
import json
import math
import random
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import diamond_env, discovered_store, synthetic_corpus  # noqa: E402
from sga.cli import main  # noqa: E402
from sga.core import ToolCall, ToolSchema, canonical_call, canonical_json  # noqa: E402
from sga.env import brute_force_solve, generate_chain_env  # noqa: E402
from sga.extraction import (  # noqa: E402
    Provenance, SgaAtom, compression_ratio, distill, extract_atoms, instantiate_template,
)
from sga.llm.critic import rule_based_verdict  # noqa: E402
from sga.mcts import MctsConfig, best_trajectories, run_search  # noqa: E402
from sga.metrics import tool_familiarity  # noqa: E402
from sga.policy import ScriptedPolicy  # noqa: E402
from sga.reward import RewardConfig, trajectory_reward  # noqa: E402
from sga.store import ExperienceStore, HashingEmbedder, RetrievalQuery, StoreConfig, embed_atoms, hybrid_score  # noqa: E402

RESULTS: dict[str, tuple[bool, str]] = {}


@contextlib.contextmanager
def criterion(name: str, limit_s: float):
    """Record pass/fail and wall time; a run over ``limit_s`` fails the criterion."""
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        RESULTS[name] = (False, f"{time.perf_counter() - start:.2f}s  {type(exc).__name__}: {exc}"[:300])
        raise
    elapsed = time.perf_counter() - start
    ok = elapsed < limit_s
    RESULTS[name] = (ok, f"{elapsed:.2f}s (limit {limit_s:g}s)")
    assert ok, f"{name} took {elapsed:.2f}s, limit {limit_s}s"


# ---------------------------------------------------------------------------


def _reward_oracle(success: bool, n: int, lam: float) -> float:
    # Exact rational evaluation, rounded once.
    if not success:
        return 0.0
    lam_q = Fraction(lam)
    return float((1 - lam_q) + lam_q / (1 + n))


def test_01_gated_reward_exactness():
    with criterion("1. gated reward exactness", 1.0):
        rng = random.Random(1)
        worst = 0.0
        for _ in range(10_000):
            success, n, lam = rng.random() < 0.5, rng.randint(0, 200), rng.random()
            got = trajectory_reward(success, n, RewardConfig(lam))
            worst = max(worst, abs(got - _reward_oracle(success, n, lam)))
            if not success:
                assert got == 0.0
        assert worst < 1e-12, worst
        assert trajectory_reward(True, 0, RewardConfig(0.1)) == 1.0
        assert trajectory_reward(False, 5, RewardConfig(0.7)) == 0


def _hybrid_oracle(qv, ev, avail, req, beta, eps) -> float:
    dot = math.fsum(a * b for a, b in zip(qv, ev))
    nq = math.sqrt(math.fsum(a * a for a in qv))
    ne = math.sqrt(math.fsum(b * b for b in ev))
    cos = 0.0 if nq == 0 or ne == 0 else dot / (nq * ne)
    overlap = sum(1 for s in req if s in avail)
    return (1 - beta) * cos + beta * overlap / (len(req) + eps)


def test_02_hybrid_score_exactness():
    with criterion("2. hybrid score exactness", 1.0):
        rng = random.Random(2)
        pool = [f"<S{i}>" for i in range(6)]
        worst, degenerate = 0.0, {"empty": 0, "beta0": 0, "beta1": 0}
        for i in range(1000):
            dim = rng.randint(2, 16)
            qv = [rng.uniform(-1, 1) for _ in range(dim)]
            ev = [rng.uniform(-1, 1) for _ in range(dim)]
            req = [] if i % 10 == 0 else rng.sample(pool, rng.randint(1, 4))
            avail = set(rng.sample(pool, rng.randint(0, 6)))
            beta = (0.0, 1.0, rng.random())[i % 3]
            cfg = StoreConfig(beta=beta, epsilon=1e-5)
            atom = SgaAtom("a", "s", frozenset(req), "g",
                           {"tool_name": "f", "argument_template": {f"p{j}": s for j, s in enumerate(req)}},
                           Provenance("t", 0, 1.0), tuple(ev))
            got = hybrid_score(RetrievalQuery("q", np.array(qv), frozenset(avail)), atom, cfg)
            worst = max(worst, abs(got - _hybrid_oracle(qv, ev, avail, req, beta, 1e-5)))
            degenerate["empty"] += not req
            degenerate["beta0"] += beta == 0.0
            degenerate["beta1"] += beta == 1.0
        assert worst < 1e-9, worst
        assert all(v > 0 for v in degenerate.values())


def test_03_feasibility_gate_ablation():
    with criterion("3. feasibility-gate ablation", 1.0):
        emb = HashingEmbedder()
        text = "task: find the city of the author | known: <AUTHOR_ID> || Obtain <CITY_ID> from <AUTHOR_ID>"
        close = SgaAtom("a_close_infeasible", text.replace("<AUTHOR_ID>", "<PERSON_ID>"),
                        frozenset({"<PERSON_ID>"}), "Obtain <CITY_ID> from <PERSON_ID>",
                        {"tool_name": "get_city", "argument_template": {"person_id": "<PERSON_ID>"}},
                        Provenance("t", 1, 0.9))
        far = SgaAtom("b_far_feasible", "look up where an author lives", frozenset({"<AUTHOR_ID>"}),
                      "author home city",
                      {"tool_name": "get_city", "argument_template": {"author_id": "<AUTHOR_ID>"}},
                      Provenance("t", 1, 0.9))
        store = ExperienceStore(embed_atoms([close, far], emb))
        q = RetrievalQuery.build(text, emb, {"<AUTHOR_ID>"})
        sem = {a.sga_id: s for a, s in store.retrieve(q, k=2, beta=0.0)}
        assert sem["a_close_infeasible"] > sem["b_far_feasible"]
        assert store.retrieve(q, k=1, beta=0.0)[0][0].sga_id == "a_close_infeasible"
        assert store.retrieve(q, k=1, beta=0.3)[0][0].sga_id == "b_far_feasible"


def test_04_mcts_discovery():
    with criterion("4. MCTS discovery on a 4-hop chain", 30.0):
        env, task = generate_chain_env(7, 4, 6)
        tree = run_search(task, env, ScriptedPolicy(), MctsConfig(1.41, 50, 10), seed=0)
        best = best_trajectories(tree)
        assert best and best[0].reward >= 0.9
        assert best[0].reward == pytest.approx(0.92, abs=1e-12)
        assert all(t.reward <= best[0].reward for t in best)
        solved = brute_force_solve(env, task, 4)
        assert solved.min_length == 4 and solved.paths_at_min == 1
        assert list(best[0].tool_calls) == solved.witness


def test_05_dedup_topology():
    with criterion("5. transposition dedup topology", 5.0):
        env, task = diamond_env()
        tree = run_search(task, env, ScriptedPolicy(), MctsConfig(), seed=0)
        assert len(tree.nodes) < tree.expanded_edges
        incoming: dict[str, list[tuple[str, str, int]]] = {}
        for node in tree.nodes.values():
            for akey, child in node.edges.items():
                incoming.setdefault(child, []).append((node.key, akey, node.edge_visits[akey]))
        for key, edges in incoming.items():
            assert tree.nodes[key].visits == sum(v for _, _, v in edges)
        merges = []
        for key, edges in incoming.items():
            names = {json.loads(a)["tool_name"] for _, a, _ in edges if json.loads(a)["type"] == "tool_call"}
            parents = {p for p, _, _ in edges}
            node = tree.nodes[key]
            if names == {"get_x", "get_y"} and len(parents) == 2 and {"<X_ID>", "<Y_ID>"} <= set(node.state.known):
                merges.append(key)
        assert merges, "no node reached via both orderings"
        for key in merges:
            per_parent = [v for _, _, v in incoming[key]]
            assert all(v > 0 for v in per_parent) and tree.nodes[key].visits == sum(per_parent)


def _entities(traj) -> set[str]:
    vals = set()
    for step in traj.steps:
        vals |= set(step.state.known.values())
        if step.action.kind == "tool_call":
            vals |= {str(v) for v in step.action.args.values()}
    return vals - {"desc", "short"}


def test_06_compression():
    with criterion("6. compression to 8 atoms", 10.0):
        corpus = synthetic_corpus(100, seed=6)
        schemas = list({s.name: s for _, tools in corpus for s in tools}.values())
        atoms = distill([t for t, _ in corpus], schemas)
        assert len(atoms) == 8
        explored = sum(len(t) for t, _ in corpus)
        assert compression_ratio(explored, len(atoms)) == 50.0
        entities = set().union(*(_entities(t) for t, _ in corpus))
        for atom in atoms:
            blob = atom.state_description + atom.goal + canonical_json(dict(atom.action_template))
            assert not any(v in blob for v in entities), atom.sga_id


def test_07_regrounding_round_trip():
    with criterion("7. re-grounding round trip", 5.0):
        corpus = synthetic_corpus(100, seed=7)
        checked = 0
        for traj, tools in corpus:
            for atom in extract_atoms(traj, tools):
                step = traj.steps[atom.provenance.step_index]
                grounded = instantiate_template(atom.argument_template, step.state.known)
                assert canonical_json(grounded) == canonical_json(step.action.args)
                assert canonical_call(ToolCall.of(atom.tool_name, grounded)) == canonical_call(step.action)
                checked += 1
        assert checked == 400


def test_08_grounding_critic_scenarios():
    with criterion("8. grounding critic scenarios", 1.0):
        from test_llm import SCENARIO_A, SCENARIO_B, SCENARIO_C

        a, b, c = (rule_based_verdict(t) for t in (SCENARIO_A, SCENARIO_B, SCENARIO_C))
        assert (a.grounded, b.grounded, c.grounded) == (True, False, False)
        assert a.score > b.score and c.score == 0.0


def test_09_end_to_end_lift(tmp_path):
    with criterion("9. end-to-end lift", 60.0):
        store, _ = discovered_store(range(100, 105), hops=2, distractors=2)
        store.save(tmp_path / "store.jsonl")
        out = io.StringIO()
        with contextlib.redirect_stdout(out):
            code = main(["eval", "--env", "chain", "--hops", "2", "--distractors", "2", "--count", "20",
                         "--seed", "500", "--store", str(tmp_path / "store.jsonl"), "--backend", "mock",
                         "--episodes", str(tmp_path / "episodes.csv")])
        assert code == 0
        cohorts = {r["cohort"]: r for r in csv.DictReader(io.StringIO(out.getvalue()))}
        assert int(cohorts["with-store"]["count"]) == 20 and int(cohorts["empty-store"]["count"]) == 20
        assert float(cohorts["with-store"]["success_rate"]) >= 0.9
        assert float(cohorts["empty-store"]["success_rate"]) <= 0.1
        for row in csv.DictReader(open(tmp_path / "episodes.csv")):
            if row["label"] == "with-store":
                assert int(row["llm_calls"]) <= 2 * int(row["steps"]) + int(row["reprompts"])


def test_10_familiarity():
    with criterion("10. tool familiarity", 1.0):
        emb = HashingEmbedder()
        rng = random.Random(10)
        words = "get find search weather city film author translate stock news time price rate list".split()

        def toolset(n, base):
            return [ToolSchema(f"t{base + i}_{rng.choice(words)}", " ".join(rng.choices(words, k=5)))
                    for i in range(n)]

        for _ in range(10):
            ts = toolset(rng.randint(1, 6), 0)
            assert abs(tool_familiarity(ts, ts, emb).score - 1.0) <= 1e-6
        for _ in range(100):
            src, extra, tgt = toolset(rng.randint(1, 4), 0), toolset(rng.randint(1, 3), 10), toolset(3, 20)
            assert tool_familiarity(src + extra, tgt, emb).score >= tool_familiarity(src, tgt, emb).score - 1e-12


def _quiet_main(argv) -> tuple[int, str]:
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = main([str(a) for a in argv])
    return code, out.getvalue()


def test_11_determinism(tmp_path):
    with criterion("11. determinism", 30.0):
        argv = ["discover", "--env", "chain", "--hops", "4", "--distractors", "6", "--count", "3", "--seed", "11",
                "--backend", "mock"]
        assert _quiet_main(argv + ["--checkpoint", tmp_path / "a.json"])[0] == 0
        assert _quiet_main(argv + ["--checkpoint", tmp_path / "b.json"])[0] == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

        store, _ = discovered_store(range(100, 104), hops=3, distractors=2)
        store.save(tmp_path / "s.jsonl")
        lines = (tmp_path / "s.jsonl").read_text().splitlines()
        query = ["store", "query", "--text", "task: follow the links | known: <WORK_ID> || Obtain <AUTHOR_ID>",
                 "--slots", "<WORK_ID>", "--k", "5"]
        base = _quiet_main(query + ["--store", tmp_path / "s.jsonl"])
        assert base[0] == 0 and base[1].strip()
        rng = random.Random(11)
        for i in range(5):
            rng.shuffle(lines)
            (tmp_path / f"p{i}.jsonl").write_text("\n".join(lines) + "\n")
            assert _quiet_main(query + ["--store", tmp_path / f"p{i}.jsonl"]) == base


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
