"""Walk through offline discovery on a synthetic identifier chain.

Search a 4-hop chain with the scripted policy, print the winning
trajectory, then distill it into de-lexicalized atoms.

    python3 demos/discover_and_distill.py
"""
from __future__ import annotations

from sga.core import canonical_json
from sga.env import brute_force_solve, generate_chain_env
from sga.extraction import compression_ratio, distill
from sga.mcts import MctsConfig, best_trajectories, run_search, tree_stats
from sga.policy import ScriptedPolicy


def main() -> None:
    env, task = generate_chain_env(seed=7, d=4, distractors=6)
    print(f"question: {task.question}")
    print(f"tools on offer: {len(env.list_tools())} (4 on the chain, the rest distractors)\n")

    tree = run_search(task, env, ScriptedPolicy(), MctsConfig(exploration_c=1.41, max_iterations=50, max_depth=10), seed=0)
    stats = tree_stats(tree)
    print(f"tree: {stats.node_count} nodes, {tree.expanded_edges} edges, "
          f"branching {stats.branching_factor:.2f}, mean depth {stats.avg_depth:.2f}")

    best = best_trajectories(tree)
    top = best[0]
    print(f"successful paths: {len(best)}, best reward {top.reward:.3f}")
    for i, step in enumerate(top.steps):
        action = step.action.to_dict()
        if action["type"] == "plan":
            print(f"  {i}. plan: {action['priority_focus']}")
        else:
            action.pop("type")
            print(f"  {i}. {canonical_json(action)}")

    oracle = brute_force_solve(env, task, 4)
    print(f"\nexhaustive solver agrees: {list(top.tool_calls) == oracle.witness}")

    atoms = distill(best[:1], env.list_tools())
    print(f"\n{len(atoms)} atoms distilled "
          f"(compression {compression_ratio(tree.expanded_edges, len(atoms)):.1f}x):")
    for atom in atoms:
        slots = ", ".join(sorted(atom.required_slots))
        print(f"  [{atom.sga_id}] needs {slots} -> {atom.action_template['tool_name']}"
              f"{dict(atom.action_template['argument_template'])}")


if __name__ == "__main__":
    main()
