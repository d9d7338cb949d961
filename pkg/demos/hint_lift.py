"""Compare online episodes with and without a distilled atom store.

Atoms come from searching a handful of training chains. Evaluation runs
on chains with unseen seeds against the mock agent, which only finds the
right tool when a hint tells it which one to use.

    python3 demos/hint_lift.py
"""
from __future__ import annotations

from sga.env import generate_chain_env
from sga.executor import run_episode
from sga.extraction import distill
from sga.llm.backends import MockBackend
from sga.llm.mock_agents import agent_handlers
from sga.mcts import MctsConfig, best_trajectories, run_search
from sga.metrics import efficiency_report, report_csv
from sga.policy import ScriptedPolicy
from sga.store import HashingEmbedder, build_store


def main() -> None:
    trajectories, schemas = [], {}
    for seed in range(100, 106):
        env, task = generate_chain_env(seed, 3, 2)
        schemas.update({t.name: t for t in env.list_tools()})
        trajectories.extend(best_trajectories(run_search(task, env, ScriptedPolicy(), MctsConfig(), seed=seed))[:1])
    embedder = HashingEmbedder()
    store = build_store(distill(trajectories, list(schemas.values())), embedder)
    print(f"store built from {len(trajectories)} trajectories: {len(store)} atoms\n")

    results = []
    for seed in range(500, 510):
        env, task = generate_chain_env(seed, 3, 2)
        backend = MockBackend(handlers=agent_handlers(env.list_tools()))
        for label, s in (("with-store", store), ("empty-store", None)):
            results.append(run_episode(task, env, s, backend, embedder, label=label))
    print(report_csv(efficiency_report(results)))


if __name__ == "__main__":
    main()
