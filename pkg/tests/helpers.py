"""Shared builders for the test suites: a diamond environment and a synthetic trajectory corpus."""
from __future__ import annotations

import json
import random

from sga.core import FinalAnswer, KnownInfo, Plan, ToolCall, ToolParameter, ToolSchema, Trajectory
from sga.env import ChainEnvironment, TableEnvironment, Task, generate_chain_env
from sga.mcts import replay
from sga.core import StructuredState
from sga.reward import trajectory_reward


def hexval(rng: random.Random, n: int = 12) -> str:
    return "".join(rng.choice("0123456789abcdef") for _ in range(n))


def diamond_env(seed: int = 0) -> tuple[TableEnvironment, Task]:
    """Two independent lookups from a start id, then a join that needs both results.

    Calling ``get_x`` then ``get_y`` or ``get_y`` then ``get_x`` reaches the
    same abstract state.
    """
    rng = random.Random(seed)
    s, x, y, z = (hexval(rng) for _ in range(4))
    tools = [
        ToolSchema("get_x", "Return the x id of a start id.", (ToolParameter("start", "start_id"),), "<X_ID>"),
        ToolSchema("get_y", "Return the y id of a start id.", (ToolParameter("start", "start_id"),), "<Y_ID>"),
        ToolSchema("join_xy", "Return the z id of an x id and a y id.",
                   (ToolParameter("x", "x_id"), ToolParameter("y", "y_id")), "<Z_ID>"),
    ]
    tables = {"get_x": {s: x}, "get_y": {s: y}, "join_xy": {f"{x}|{y}": z}}
    task = Task(f"diamond-{seed}", f"Starting from start id {s}, find the z id.", KnownInfo.of({"start_id": s}), z)
    fields = {"get_x": "x_id", "get_y": "y_id", "join_xy": "z_id"}
    return TableEnvironment("diamond", tools, tables, [task], fields), task


def dead_end_env() -> tuple[TableEnvironment, Task]:
    """A task that no call sequence can solve."""
    tools = [ToolSchema("lookup", "Look up a code.", (ToolParameter("code", "code"),), "<NAME>")]
    task = Task("dead-end", "What is the secret for code c1?", KnownInfo.of({"code": "c1"}), "never-returned")
    env = TableEnvironment("dead", tools, {"lookup": {"c1": "n1"}}, [task], {"lookup": "name"})
    return env, task


FILM_TOOLS = [
    ToolSchema("search_films", "Search films by year and genre.",
               (ToolParameter("year", "year"), ToolParameter("genre", "genre"),
                ToolParameter("sort", "sort", "control", ("asc", "desc"))), "<FILM_ID>"),
    ToolSchema("get_director", "Return the director of a film.", (ToolParameter("film_id", "film_id"),),
               "<DIRECTOR_ID>"),
    ToolSchema("get_birthplace", "Return where a person was born.",
               (ToolParameter("director_id", "director_id"),
                ToolParameter("detail", "detail", "control", ("short", "long"))), "<CITY_ID>"),
    ToolSchema("get_population", "Return the population of a city.", (ToolParameter("city_id", "city_id"),),
               "<POPULATION>"),
]


def film_env(rng: random.Random) -> tuple[TableEnvironment, Task, list[ToolCall]]:
    year, genre, film, director, city, pop = (hexval(rng) for _ in range(6))
    tables = {
        "search_films": {f"{year}|{genre}|desc": film},
        "get_director": {film: director},
        "get_birthplace": {f"{director}|short": city},
        "get_population": {city: pop},
    }
    fields = {"search_films": "film_id", "get_director": "director_id", "get_birthplace": "city_id",
              "get_population": "population"}
    task = Task(f"film-{year}", f"How many people live where the director of the {genre} film from {year} was born?",
                KnownInfo.of({"year": year, "genre": genre}), pop)
    calls = [
        ToolCall.of("search_films", {"year": year, "genre": genre, "sort": "desc"}),
        ToolCall.of("get_director", {"film_id": film}),
        ToolCall.of("get_birthplace", {"director_id": director, "detail": "short"}),
        ToolCall.of("get_population", {"city_id": city}),
    ]
    return TableEnvironment("film", FILM_TOOLS, tables, [task], fields), task, calls


def chain_solution(env: ChainEnvironment, task) -> list[ToolCall]:
    values = task.entity_values
    by_out = {t.output_slot: t for t in env.list_tools() if t.output_slot}
    calls = []
    for i in range(task.hop_count):
        tool = next(t for t in by_out.values() if t.parameters[0].tag == f"<{t.parameters[0].semantic_type.upper()}>"
                    and env._hop_of[t.name] == i + 1)
        calls.append(ToolCall.of(tool.name, {tool.parameters[0].name: values[i]}))
    return calls


def solved_trajectory(env, task, calls, goal: str) -> Trajectory:
    """Execute ``calls`` after a Plan, then answer with the task's answer."""
    env.reset(task)
    steps, state = [], StructuredState(known=task.initial_known, global_goal=task.question)
    plan = Plan(f"Resolve the dependencies step by step. {goal}", goal)
    pairs = [(plan, _plan_obs())]
    for call in calls:
        pairs.append((call, env.execute(call)))
    pairs.append((FinalAnswer(task.answer), _ok()))
    steps = replay(state, pairs)
    n_tools = sum(isinstance(a, ToolCall) for a, _ in pairs)
    return Trajectory(task.task_id, tuple(steps), True, task.answer, trajectory_reward(True, n_tools))


def _ok():
    from sga.core import Observation
    return Observation.ok("")


def _plan_obs():
    from sga.core import Observation
    return Observation.ok(json.dumps({"allowed_tools": []}))


def synthetic_corpus(n: int = 100, seed: int = 0) -> list[tuple[Trajectory, list[ToolSchema]]]:
    """``n`` solved trajectories alternating between two 4-step templates with fresh random entities."""
    rng = random.Random(seed)
    out = []
    for i in range(n):
        if i % 2 == 0:
            env, task = generate_chain_env(rng.randrange(10**9), 4, 0)
            calls = chain_solution(env, task)
            traj = solved_trajectory(env, task, calls, "Follow the identifier chain to its end")
        else:
            env, task, calls = film_env(rng)
            traj = solved_trajectory(env, task, calls, "Find the population linked to the film")
        out.append((traj, env.list_tools()))
    return out


def discovered_store(seeds=range(100, 105), hops: int = 2, distractors: int = 2, dim: int = 256):
    """Search seeded chains with the scripted policy and distill the best trajectory of each into a store."""
    from sga.extraction import distill
    from sga.mcts import MctsConfig, best_trajectories, run_search
    from sga.policy import ScriptedPolicy
    from sga.store import HashingEmbedder, build_store

    trajs, schemas = [], {}
    for seed in seeds:
        env, task = generate_chain_env(seed, hops, distractors)
        for t in env.list_tools():
            schemas.setdefault(t.name, t)
        best = best_trajectories(run_search(task, env, ScriptedPolicy(), MctsConfig(), seed=seed))
        trajs.extend(best[:1])
    embedder = HashingEmbedder(dim=dim)
    return build_store(distill(trajs, list(schemas.values())), embedder), embedder
