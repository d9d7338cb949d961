"""Offline discovery: UCT search with meta-cognitive expansion over a transposition table.

Nodes are keyed by :func:`sga.core.state_key`, so two action orderings that
reach the same (abstract state, sub-goal) share one node and its visit
statistics. Every executed step becomes a node: the rollout after an
expansion is recorded in the tree rather than thrown away, because each
step costs a real tool or model call.
"""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterator

from .core import (
    AgentAction,
    FinalAnswer,
    Observation,
    Plan,
    Reflect,
    StructuredState,
    ToolCall,
    Trajectory,
    TrajectoryStep,
    action_from_dict,
    action_key,
    canonical_json,
    state_key,
)
from .env import Task, ToolEnvironment
from .llm.backends import BackendError
from .policy import PolicyError, SearchPolicy
from .reward import RewardConfig, trajectory_reward

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MctsConfig:
    exploration_c: float = 1.41
    max_iterations: int = 50
    max_depth: int = 10
    reward: RewardConfig = RewardConfig()
    expansion_width: int = 3
    temperature: float = 0.6

    def __post_init__(self) -> None:
        if self.exploration_c <= 0:
            raise ValueError("exploration_c must be > 0")
        if self.max_iterations < 1 or self.max_depth < 1 or self.expansion_width < 1:
            raise ValueError("max_iterations, max_depth and expansion_width must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def to_dict(self) -> dict:
        return {
            "exploration_c": self.exploration_c,
            "max_iterations": self.max_iterations,
            "max_depth": self.max_depth,
            "lambda": self.reward.lam,
            "expansion_width": self.expansion_width,
            "temperature": self.temperature,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MctsConfig":
        return cls(d["exploration_c"], d["max_iterations"], d["max_depth"], RewardConfig(d["lambda"]),
                   d.get("expansion_width", 3), d.get("temperature", 0.6))


@dataclass
class SearchNode:
    key: str
    state: StructuredState
    depth: int
    visits: int = 0
    total_value: float = 0.0
    terminal: bool = False
    success: bool = False
    # action_key -> child key, in insertion order
    edges: dict[str, str] = field(default_factory=dict)
    edge_visits: dict[str, int] = field(default_factory=dict)
    edge_obs: dict[str, Observation] = field(default_factory=dict)
    # sampled queue of actions to try here; None until first expansion
    candidates: list[AgentAction] | None = None
    plan_allow: dict[str, list[str]] = field(default_factory=dict)
    pivot: Reflect | None = None
    policy_failures: int = 0

    @property
    def q(self) -> float:
        if self.visits == 0:
            raise ZeroDivisionError("Q undefined for an unvisited node")
        return self.total_value / self.visits

    def untried(self) -> list[AgentAction]:
        out: list[AgentAction] = []
        if self.pivot is not None and action_key(self.pivot) not in self.edges:
            out.append(self.pivot)
        for a in self.candidates or ():
            if action_key(a) not in self.edges:
                out.append(a)
        return out

    def has_untried(self) -> bool:
        return self.candidates is None or bool(self.untried())

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "state": self.state.to_dict(),
            "depth": self.depth,
            "visits": self.visits,
            "total_value": self.total_value,
            "terminal": self.terminal,
            "success": self.success,
            "edges": [
                {"action": json.loads(k), "child": c, "visits": self.edge_visits.get(k, 0),
                 "observation": self.edge_obs[k].to_dict()}
                for k, c in self.edges.items()
            ],
            "candidates": None if self.candidates is None else [a.to_dict() for a in self.candidates],
            "plan_allow": self.plan_allow,
            "pivot": None if self.pivot is None else self.pivot.to_dict(),
            "policy_failures": self.policy_failures,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchNode":
        node = cls(d["key"], StructuredState.from_dict(d["state"]), d["depth"], d["visits"],
                   d["total_value"], d["terminal"], d["success"])
        for e in d["edges"]:
            k = canonical_json(e["action"])
            node.edges[k] = e["child"]
            node.edge_visits[k] = e["visits"]
            node.edge_obs[k] = Observation.from_dict(e["observation"])
        if d.get("candidates") is not None:
            node.candidates = [action_from_dict(a) for a in d["candidates"]]
        node.plan_allow = dict(d.get("plan_allow", {}))
        node.pivot = action_from_dict(d["pivot"]) if d.get("pivot") else None
        node.policy_failures = d.get("policy_failures", 0)
        return node


@dataclass
class SearchTree:
    root: str
    config: MctsConfig
    nodes: dict[str, SearchNode] = field(default_factory=dict)
    task_id: str = ""
    iterations: int = 0
    backpropagations: int = 0

    @classmethod
    def new(cls, root_state: StructuredState, config: MctsConfig = MctsConfig(), task_id: str = "") -> "SearchTree":
        key = state_key(root_state)
        tree = cls(key, config, task_id=task_id)
        tree.nodes[key] = SearchNode(key, root_state, len(root_state.history))
        return tree

    def __getitem__(self, key: str) -> SearchNode:
        return self.nodes[key]

    def add_child(self, parent_key: str, action: AgentAction, obs: Observation) -> tuple[str, bool]:
        """Apply ``action`` at ``parent_key``; link to an existing node when the key is already known.

        Returns ``(child_key, created)``.
        """
        parent = self.nodes[parent_key]
        child_state = parent.state.after(action, obs)
        ckey = state_key(child_state)
        created = ckey not in self.nodes
        if created:
            self.nodes[ckey] = SearchNode(ckey, child_state, parent.depth + 1)
        akey = action_key(action)
        parent.edges[akey] = ckey
        parent.edge_visits.setdefault(akey, 0)
        parent.edge_obs[akey] = obs
        return ckey, created

    @property
    def expanded_edges(self) -> int:
        return sum(len(n.edges) for n in self.nodes.values())

    def to_dict(self) -> dict:
        return {
            "v": CHECKPOINT_VERSION,
            "task_id": self.task_id,
            "root": self.root,
            "config": self.config.to_dict(),
            "iterations": self.iterations,
            "backpropagations": self.backpropagations,
            "nodes": [n.to_dict() for n in self.nodes.values()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchTree":
        if d.get("v") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('v')!r}")
        tree = cls(d["root"], MctsConfig.from_dict(d["config"]), task_id=d.get("task_id", ""),
                   iterations=d.get("iterations", 0), backpropagations=d.get("backpropagations", 0))
        for nd in d["nodes"]:
            node = SearchNode.from_dict(nd)
            tree.nodes[node.key] = node
        return tree


# ---------------------------------------------------------------------------
# Selection and backpropagation


def ucb_score(parent_n: int, child_n: int, child_q: float, c: float) -> float:
    if parent_n < 1:
        raise ValueError("parent visit count must be >= 1")
    if child_n == 0:
        return math.inf
    return child_q + c * math.sqrt(math.log(parent_n) / child_n)


def best_child(tree: SearchTree, key: str) -> tuple[str, str]:
    """Edge ``(action_key, child_key)`` maximizing UCB; ties go to the lowest action key."""
    node = tree.nodes[key]
    parent_n = max(node.visits, 1)

    def score(item: tuple[str, str]) -> tuple[float, str]:
        child = tree.nodes[item[1]]
        q = child.q if child.visits else 0.0
        return ucb_score(parent_n, child.visits, q, tree.config.exploration_c), item[0]

    return min(node.edges.items(), key=lambda it: (-score(it)[0], it[0]))


Path = list[tuple[str, "AgentAction | None"]]


def select(tree: SearchTree, start: str | None = None) -> Path:
    """Descend by UCB until a node with an untried action, a terminal, or the depth bound."""
    key = start or tree.root
    path: Path = []
    while True:
        node = tree.nodes[key]
        if node.terminal or node.depth >= tree.config.max_depth or node.has_untried() or not node.edges:
            path.append((key, None))
            return path
        akey, child = best_child(tree, key)
        path.append((key, action_from_dict(json.loads(akey))))
        key = child


def backpropagate(tree: SearchTree, path: Path, reward: float) -> None:
    if path and path[0][0] != tree.root:
        raise ValueError("path must start at the root")
    for key, action in path:
        node = tree.nodes[key]
        node.visits += 1
        node.total_value += reward
        if action is not None:
            akey = action_key(action)
            node.edge_visits[akey] = node.edge_visits.get(akey, 0) + 1
    tree.backpropagations += 1


# ---------------------------------------------------------------------------
# Expansion


def _allowed_tools(state: StructuredState, env: ToolEnvironment):
    tools = env.list_tools()
    for action, obs in reversed(state.history):
        if isinstance(action, Plan):
            try:
                names = set(json.loads(obs.payload).get("allowed_tools", []))
            except (json.JSONDecodeError, AttributeError):
                names = set()
            if not names:
                log.warning("plan returned an empty tool allow-list; using the full registry")
                return tools
            return [t for t in tools if t.name in names]
    return tools


def needs_plan(state: StructuredState, env: ToolEnvironment, policy: SearchPolicy) -> bool:
    """Initial state, or the last tool call succeeded and the tracker moved on to a new goal."""
    if not state.history:
        return True
    action, obs = state.history[-1]
    if not isinstance(action, ToolCall) or obs.status != "ok":
        return False
    return policy.next_goal(state, env.list_tools()) != state.sub_goal


def _sample_order(weighted: list[tuple[AgentAction, float]], k: int, temperature: float,
                  rng: random.Random) -> list[AgentAction]:
    """Draw ``k`` distinct actions without replacement (Gumbel top-k on weights^(1/T))."""
    scored = []
    for action, w in weighted:
        if w <= 0:
            continue
        u = rng.random()
        noise = 0.0 if temperature == 0 else -math.log(-math.log(max(u, 1e-300))) * temperature
        scored.append((math.log(w) + noise, action_key(action), action))
    scored.sort(key=lambda t: (-t[0], t[1]))
    seen, out = set(), []
    for _, akey, action in scored:
        if akey not in seen:
            seen.add(akey)
            out.append(action)
        if len(out) == k:
            break
    return out


def _ensure_candidates(tree: SearchTree, node: SearchNode, env: ToolEnvironment,
                       policy: SearchPolicy, rng: random.Random) -> None:
    if node.candidates is not None:
        return
    state = node.state
    if needs_plan(state, env, policy):
        plan, allowed = policy.plan(state, env.list_tools())
        node.plan_allow[action_key(plan)] = list(allowed)
        node.candidates = [plan]
        return
    proposals = policy.propose(state, _allowed_tools(state, env))
    node.candidates = _sample_order(proposals, tree.config.expansion_width, tree.config.temperature, rng)


Verifier = Callable[[str, StructuredState], bool]


def _apply(tree: SearchTree, key: str, action: AgentAction, env: ToolEnvironment,
           policy: SearchPolicy, verifier: Verifier) -> str:
    node = tree.nodes[key]
    if isinstance(action, ToolCall):
        if env.tool(action.tool_name) is None:
            obs = Observation.error("unknown_tool", f"no tool named {action.tool_name}")
        else:
            obs = env.execute(action)
    elif isinstance(action, Plan):
        obs = Observation.ok(json.dumps({"allowed_tools": node.plan_allow.get(action_key(action), [])}))
    else:
        obs = Observation.ok("")
    if isinstance(action, Reflect):
        node.pivot = None
    ckey, created = tree.add_child(key, action, obs)
    child = tree.nodes[ckey]
    if isinstance(action, ToolCall) and obs.status == "error":
        if created:
            child.terminal = True
        try:
            node.pivot = policy.reflect(node.state, action, obs)
        except (PolicyError, BackendError) as exc:
            log.warning("reflect failed: %s", exc)
    elif isinstance(action, FinalAnswer) and created:
        child.terminal = True
        child.success = verifier(action.text, child.state)
    return ckey


def _expand(tree: SearchTree, key: str, env: ToolEnvironment, policy: SearchPolicy,
            rng: random.Random, verifier: Verifier) -> tuple[AgentAction, str] | None:
    node = tree.nodes[key]
    if node.terminal or node.depth >= tree.config.max_depth:
        return None
    try:
        _ensure_candidates(tree, node, env, policy, rng)
    except (PolicyError, BackendError) as exc:
        node.policy_failures += 1
        log.warning("policy failed at depth %d: %s", node.depth, exc)
        if node.policy_failures >= 3 and not node.edges:
            node.terminal = True
            node.candidates = []
        return None
    untried = node.untried()
    if not untried:
        if not node.edges:
            node.terminal = True
        return None
    action = untried[0]
    return action, _apply(tree, key, action, env, policy, verifier)


def expand(tree: SearchTree, key: str, env: ToolEnvironment, policy: SearchPolicy,
           rng: random.Random, verifier: Verifier) -> str | None:
    """Try the next untried action at ``key`` (a pending Reflect pivot first).

    Returns the new or transposed child key, or ``None`` when the node has
    nothing left to try or the policy failed.
    """
    result = _expand(tree, key, env, policy, rng, verifier)
    return None if result is None else result[1]


def _path_tool_steps(path: Path) -> int:
    return sum(isinstance(a, ToolCall) for _, a in path)


def _rollout(tree: SearchTree, path: Path, env: ToolEnvironment, policy: SearchPolicy,
             rng: random.Random, verifier: Verifier) -> None:
    """Continue from the path's last node until a terminal or the depth bound, recording every step."""
    while True:
        key = path[-1][0]
        node = tree.nodes[key]
        if node.terminal or node.depth >= tree.config.max_depth:
            return
        if node.has_untried():
            result = _expand(tree, key, env, policy, rng, verifier)
            if result is None:
                return
            action, child = result
        elif node.edges:
            akey, child = best_child(tree, key)
            action = action_from_dict(json.loads(akey))
        else:
            return
        path[-1] = (key, action)
        path.append((child, None))


def path_reward(tree: SearchTree, path: Path) -> float:
    leaf = tree.nodes[path[-1][0]]
    return trajectory_reward(leaf.terminal and leaf.success, _path_tool_steps(path), tree.config.reward)


def run_search(task: Task, env: ToolEnvironment, policy: SearchPolicy, cfg: MctsConfig = MctsConfig(),
               seed: int = 0, critic: Callable[[Trajectory], bool] | None = None) -> SearchTree:
    """Run up to ``cfg.max_iterations`` select / expand / rollout / backpropagate loops.

    Success of a final answer is judged by ``env.verify``; when ``critic``
    is given it must also accept the trace. Running out of iterations is
    not an error: the partial tree is returned.
    """
    env.reset(task)
    rng = random.Random(seed)
    root_state = StructuredState(known=task.initial_known, global_goal=task.question)
    tree = SearchTree.new(root_state, cfg, task.task_id)

    def verifier(answer: str, state: StructuredState) -> bool:
        try:
            ok = env.verify(answer, task)
        except NotImplementedError:
            ok = True if critic is not None else False
        if ok and critic is not None:
            ok = critic(Trajectory(task.task_id, tuple(replay(root_state, state.history)), False, answer))
        return ok

    for _ in range(cfg.max_iterations):
        path = select(tree)
        leaf_key = path[-1][0]
        leaf = tree.nodes[leaf_key]
        if not leaf.terminal and leaf.depth < cfg.max_depth:
            result = _expand(tree, leaf_key, env, policy, rng, verifier)
            if result is not None:
                path[-1] = (leaf_key, result[0])
                path.append((result[1], None))
                _rollout(tree, path, env, policy, rng, verifier)
        backpropagate(tree, path, path_reward(tree, path))
        tree.iterations += 1
    return tree


# ---------------------------------------------------------------------------
# Read-out


def replay(root_state: StructuredState, steps) -> list[TrajectoryStep]:
    """Pre-action snapshots for a sequence of ``(action, observation)`` steps."""
    out, cur = [], root_state
    for action, obs in steps:
        out.append(TrajectoryStep(cur, action, obs))
        cur = cur.after(action, obs)
    return out


def iter_terminal_paths(tree: SearchTree) -> Iterator[list[tuple[str, str]]]:
    """Every root-to-terminal walk as a list of ``(node_key, action_key)`` edges."""
    stack: list[tuple[str, list[tuple[str, str]]]] = [(tree.root, [])]
    while stack:
        key, edges = stack.pop()
        node = tree.nodes[key]
        if node.terminal:
            yield edges
            continue
        for akey in reversed(list(node.edges)):
            stack.append((node.edges[akey], edges + [(key, akey)]))


def best_trajectories(tree: SearchTree, min_reward: float = 1e-9) -> list[Trajectory]:
    """Successful root-to-terminal paths with reward >= ``min_reward``.

    Sorted by reward (descending), then tool-step count, then action sequence.
    """
    out = []
    root_state = tree.nodes[tree.root].state
    for edges in iter_terminal_paths(tree):
        leaf = tree.nodes[tree.nodes[edges[-1][0]].edges[edges[-1][1]]] if edges else tree.nodes[tree.root]
        if not (leaf.terminal and leaf.success):
            continue
        actions = [action_from_dict(json.loads(akey)) for _, akey in edges]
        n_tools = sum(isinstance(a, ToolCall) for a in actions)
        reward = trajectory_reward(True, n_tools, tree.config.reward)
        if reward < min_reward:
            continue
        steps = replay(root_state, [(a, tree.nodes[k].edge_obs[ak]) for (k, ak), a in zip(edges, actions)])
        answer = actions[-1].text if isinstance(actions[-1], FinalAnswer) else None
        traj = Trajectory(tree.task_id, tuple(steps), True, answer, reward)
        out.append((-reward, n_tools, [akey for _, akey in edges], traj))
    out.sort(key=lambda t: (t[0], t[1], t[2]))
    return [t[3] for t in out]


@dataclass(frozen=True)
class TreeStats:
    branching_factor: float
    avg_depth: float
    node_count: int

    def to_dict(self) -> dict:
        return {"branching_factor": self.branching_factor, "avg_depth": self.avg_depth,
                "node_count": self.node_count}


def tree_stats(tree: SearchTree) -> TreeStats:
    """Mean out-degree of expanded non-terminal nodes, mean depth of leaves, node count."""
    expanded = [len(n.edges) for n in tree.nodes.values() if n.edges and not n.terminal]
    leaves = [n.depth for n in tree.nodes.values() if not n.edges]
    return TreeStats(
        sum(expanded) / len(expanded) if expanded else 0.0,
        sum(leaves) / len(leaves) if leaves else 0.0,
        len(tree.nodes),
    )
