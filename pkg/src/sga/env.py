"""Simulated tool environments for desk-scale runs.

Two concrete environments share the :class:`ToolEnvironment` interface:

* :func:`generate_chain_env` builds a seeded multi-hop dependency chain in
  which hop ``i`` can only be resolved with the identifier returned by hop
  ``i - 1``, padded with distractor tools.
* :func:`load_table_env` reads a declarative JSON file where each tool is
  a key -> value lookup table.

Table-env file format (``"v": 1``)::

    {
      "v": 1,
      "name": "diamond",
      "tools": [
        {"name": "get_x", "description": "...",
         "parameters": [{"name": "start", "semantic_type": "start_id", "kind": "data"}],
         "output_slot": "<X_ID>",
         "table": {"s0": "x-123"}}
      ],
      "tasks": [
        {"task_id": "t0", "question": "...", "initial_known": {"<START_ID>": "s0"},
         "answer": "z-9"}
      ]
    }

Multi-parameter tools key their table by the argument values joined with
``"|"`` in parameter order. A tool with an ``output_slot`` answers with a
JSON object ``{"<field>": value}`` whose field name maps back to the slot
tag; a tool without one answers with the raw text.
"""
from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Mapping

from .core import KnownInfo, Observation, ToolCall, ToolParameter, ToolSchema, tag_for


class SchemaError(ValueError):
    """A table-env file does not match the documented schema."""

    def __init__(self, message: str, line: int = 1):
        super().__init__(f"line {line}: {message}")
        self.line = line


_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL | re.IGNORECASE)


def extract_answer(text: str) -> str:
    """Strip an optional ``<answer>...</answer>`` wrapper and surrounding space."""
    m = _ANSWER_RE.search(text)
    return (m.group(1) if m else text).strip()


@dataclass(frozen=True)
class Task:
    task_id: str
    question: str
    initial_known: KnownInfo = field(default_factory=KnownInfo)
    answer: str | None = None

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "question": self.question,
            "initial_known": self.initial_known.to_dict(),
            "answer": self.answer,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Task":
        return cls(
            str(data["task_id"]),
            data["question"],
            KnownInfo.of(data.get("initial_known") or {}),
            data.get("answer"),
        )


class ToolEnvironment:
    """Interface every environment implements.

    ``call`` must be deterministic in ``(task, name, arguments)`` and
    ``verify`` a pure predicate.
    """

    name = "env"

    def list_tools(self) -> list[ToolSchema]:
        raise NotImplementedError

    def call(self, name: str, arguments: Mapping[str, Any]) -> Observation:
        raise NotImplementedError

    def verify(self, final_answer: str, task: Task) -> bool:
        raise NotImplementedError

    def reset(self, task: Task) -> None:
        self.task = task

    def execute(self, call: ToolCall) -> Observation:
        """Run a tool call; an exception inside the tool becomes an error observation."""
        try:
            return self.call(call.tool_name, call.args)
        except Exception as exc:  # tools are untrusted
            return Observation.error("exception", f"{type(exc).__name__}: {exc}")

    def tool(self, name: str) -> ToolSchema | None:
        for t in self.list_tools():
            if t.name == name:
                return t
        return None


def _hex(rng: random.Random, n: int = 12) -> str:
    return "".join(rng.choice("0123456789abcdef") for _ in range(n))


def _field_for(tag: str) -> str:
    return tag.strip("<>").lower()


# ---------------------------------------------------------------------------
# Chain environment

HOP_NOUNS = (
    "work", "author", "city", "country", "currency", "bank",
    "founder", "school", "mascot", "species", "habitat", "river",
)

DISTRACTOR_NAMES = (
    "get_weather", "translate_text", "count_words", "lookup_stock", "get_time_zone",
    "search_news", "convert_units", "get_holiday", "rate_sentiment", "spell_check",
    "get_horoscope", "random_fact", "get_traffic", "find_recipe", "check_grammar",
)


def _hop_noun(i: int) -> str:
    return HOP_NOUNS[i] if i < len(HOP_NOUNS) else f"node{i}"


@dataclass(frozen=True)
class ChainTask(Task):
    seed: int = 0
    hop_count: int = 1
    distractor_tools: int = 0
    entity_values: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            **super().to_dict(),
            "seed": self.seed,
            "hop_count": self.hop_count,
            "distractor_tools": self.distractor_tools,
            "entity_values": list(self.entity_values),
        }


class ChainEnvironment(ToolEnvironment):
    """Hop ``i`` maps the identifier from hop ``i - 1`` to the next one; distractors are no-ops."""

    name = "chain"

    def __init__(self, task: ChainTask, tools: list[ToolSchema], hop_of: Mapping[str, int]):
        self.task = task
        self._tools = tools
        self._hop_of = dict(hop_of)
        self._distractors = {t.name for t in tools if t.name not in self._hop_of}

    def list_tools(self) -> list[ToolSchema]:
        return list(self._tools)

    def call(self, name: str, arguments: Mapping[str, Any]) -> Observation:
        schema = self.tool(name)
        if schema is None:
            return Observation.error("unknown_tool", f"no tool named {name}")
        expected = {p.name for p in schema.parameters}
        if set(arguments) != expected:
            return Observation.error("bad_arguments", f"{name} expects {sorted(expected)}")
        for p in schema.parameters:
            if p.kind == "control" and str(arguments[p.name]) not in (p.enum_values or ()):
                return Observation.error("bad_arguments", f"{p.name} must be one of {list(p.enum_values or ())}")
        if name in self._distractors:
            digest = hashlib.sha256(
                json.dumps([self.task.seed, name, dict(sorted(arguments.items()))], default=str).encode()
            ).hexdigest()[:8]
            return Observation.ok(f"{name} finished (ref {digest})")
        hop = self._hop_of[name]
        values = self.task.entity_values
        (param,) = schema.parameters
        if str(arguments[param.name]).strip() != values[hop - 1]:
            return Observation.error("not_found", f"no record for {param.name}")
        return Observation.ok(json.dumps({_field_for(schema.output_slot or ""): values[hop]}))

    def verify(self, final_answer: str, task: Task | None = None) -> bool:
        task = task or self.task
        return task.answer is not None and extract_answer(final_answer) == task.answer


def generate_chain_env(seed: int, d: int, distractors: int = 0) -> tuple[ChainEnvironment, ChainTask]:
    """Build a ``d``-hop chain task with ``distractors`` extra no-op tools.

    Tool and slot names depend only on ``d``; entity values, distractor
    names and the shuffled tool order depend on ``seed``.
    """
    if d < 1:
        raise ValueError("hop count must be >= 1")
    if distractors < 0 or distractors > len(DISTRACTOR_NAMES):
        raise ValueError(f"distractors must lie in [0, {len(DISTRACTOR_NAMES)}]")
    rng = random.Random(seed)
    values: list[str] = []
    while len(values) < d + 1:
        v = _hex(rng)
        if v not in values:
            values.append(v)
    nouns = [_hop_noun(i) for i in range(d + 1)]
    chain_tools = []
    for i in range(1, d + 1):
        src, dst = nouns[i - 1], nouns[i]
        chain_tools.append(
            ToolSchema(
                name=f"get_{dst}",
                description=f"Return the {dst} identifier linked to a {src} identifier.",
                parameters=(ToolParameter(f"{src}_id", f"{src}_id"),),
                output_slot=tag_for(f"{dst}_id"),
            )
        )
    distractor_tools = []
    for name in sorted(rng.sample(DISTRACTOR_NAMES, distractors)):
        # A distractor's shape depends only on its name and d, so schemas agree across seeds.
        idx = DISTRACTOR_NAMES.index(name)
        params = [ToolParameter("query", f"{nouns[idx % d]}_id")]
        if idx % 2 == 1:
            params.append(ToolParameter("mode", "mode", "control", ("fast", "full")))
        distractor_tools.append(
            ToolSchema(name, f"Utility tool {name.replace('_', ' ')}.", tuple(params))
        )
    tools = chain_tools + distractor_tools
    rng.shuffle(tools)
    path = " -> ".join(nouns)
    question = (
        f"Starting from the {nouns[0]} with id {values[0]}, follow the links {path} "
        f"and report the {nouns[-1]} id."
    )
    task = ChainTask(
        task_id=f"chain-d{d}-s{seed}",
        question=question,
        initial_known=KnownInfo.of({f"{nouns[0]}_id": values[0]}),
        answer=values[-1],
        seed=seed,
        hop_count=d,
        distractor_tools=distractors,
        entity_values=tuple(values),
    )
    return ChainEnvironment(task, tools, {t.name: i + 1 for i, t in enumerate(chain_tools)}), task


# ---------------------------------------------------------------------------
# Table environment


class TableEnvironment(ToolEnvironment):
    def __init__(self, name: str, tools: list[ToolSchema], tables: dict[str, dict[str, str]],
                 tasks: list[Task], output_fields: dict[str, str]):
        self.name = name
        self._tools = tools
        self._tables = tables
        self._output_fields = output_fields
        self.tasks = tasks
        self.task = tasks[0] if tasks else None

    def list_tools(self) -> list[ToolSchema]:
        return list(self._tools)

    def call(self, name: str, arguments: Mapping[str, Any]) -> Observation:
        schema = self.tool(name)
        if schema is None:
            return Observation.error("unknown_tool", f"no tool named {name}")
        try:
            key = "|".join(str(arguments[p.name]).strip() for p in schema.parameters)
        except KeyError as exc:
            return Observation.error("bad_arguments", f"missing argument {exc.args[0]}")
        value = self._tables[name].get(key)
        if value is None:
            return Observation.error("not_found", f"{name}: no entry")
        out_field = self._output_fields.get(name)
        if out_field:
            return Observation.ok(json.dumps({out_field: value}))
        return Observation.ok(value)

    def verify(self, final_answer: str, task: Task | None = None) -> bool:
        task = task or self.task
        return task is not None and task.answer is not None and extract_answer(final_answer) == task.answer


def _line_of(text: str, needle: str) -> int:
    idx = text.find(needle)
    return text.count("\n", 0, idx) + 1 if idx >= 0 else 1


def load_table_env(path: str | Path) -> TableEnvironment:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(exc.msg, exc.lineno) from None
    if not isinstance(data, dict):
        raise SchemaError("top level must be an object")
    if data.get("v") != 1:
        raise SchemaError(f"unsupported version {data.get('v')!r}", _line_of(text, '"v"'))
    raw_tools = data.get("tools")
    if not isinstance(raw_tools, list) or not raw_tools:
        raise SchemaError("'tools' must be a non-empty list", _line_of(text, '"tools"'))
    tools, tables, fields = [], {}, {}
    for raw in raw_tools:
        tool_name = raw.get("name") if isinstance(raw, dict) else None
        line = _line_of(text, f'"{tool_name}"') if tool_name else _line_of(text, '"tools"')
        if not tool_name or not isinstance(raw.get("table"), dict):
            raise SchemaError("each tool needs a 'name' and a 'table' object", line)
        try:
            schema = ToolSchema.from_dict(raw)
        except (KeyError, ValueError, TypeError) as exc:
            raise SchemaError(f"tool {tool_name}: {exc}", line) from None
        if schema.output_slot is not None and not re.fullmatch(r"<[A-Z][A-Z0-9_]*>", schema.output_slot):
            raise SchemaError(f"tool {tool_name}: bad output_slot {schema.output_slot!r}", line)
        tools.append(schema)
        tables[schema.name] = {str(k): str(v) for k, v in raw["table"].items()}
        if schema.output_slot:
            fields[schema.name] = raw.get("output_field") or _field_for(schema.output_slot)
    tasks = []
    for raw in data.get("tasks", []):
        try:
            tasks.append(Task.from_dict(raw))
        except (KeyError, ValueError, TypeError) as exc:
            needle = f'"{raw.get("task_id")}"' if isinstance(raw, dict) else '"tasks"'
            raise SchemaError(f"bad task: {exc}", _line_of(text, needle)) from None
    return TableEnvironment(data.get("name", Path(path).stem), tools, tables, tasks, fields)


# ---------------------------------------------------------------------------
# Exhaustive solver (test oracle)


@dataclass
class SolverResult:
    min_length: int | None
    paths_at_min: int
    witness: list[ToolCall]
    reachable_values: set[str]


def _call_choices(tool: ToolSchema, values: list[str]) -> list[ToolCall]:
    pools = []
    for p in tool.parameters:
        pools.append(list(p.enum_values or ()) if p.kind == "control" else values)
    return [ToolCall.of(tool.name, dict(zip([p.name for p in tool.parameters], combo)))
            for combo in product(*pools)]


def brute_force_solve(env: ToolEnvironment, task: Task, max_len: int) -> SolverResult:
    """Enumerate every call sequence of length <= ``max_len`` whose arguments come from known values.

    Sequences are aggregated by the set of values they make known (the only
    thing that influences later calls), with exact path counts per layer.
    A sequence succeeds when some known value passes ``env.verify``.
    """
    env.reset(task)
    tools = env.list_tools()
    start = frozenset(task.initial_known.values())
    layer: dict[frozenset, tuple[int, list[ToolCall]]] = {start: (1, [])}
    reachable = set(start)
    obs_cache: dict[str, Observation] = {}

    def succeeded(vals: frozenset) -> bool:
        return any(env.verify(v, task) for v in vals)

    if succeeded(start):
        return SolverResult(0, 1, [], reachable)
    for length in range(1, max_len + 1):
        nxt: dict[frozenset, tuple[int, list[ToolCall]]] = {}
        for vals, (count, witness) in layer.items():
            ordered = sorted(vals)
            for tool in tools:
                for call in _call_choices(tool, ordered):
                    key = json.dumps([call.tool_name, call.args], sort_keys=True)
                    if key not in obs_cache:
                        obs_cache[key] = env.call(call.tool_name, call.args)
                    obs = obs_cache[key]
                    new_vals = vals
                    if obs.status == "ok":
                        try:
                            payload = json.loads(obs.payload)
                        except json.JSONDecodeError:
                            payload = None
                        if isinstance(payload, dict):
                            new_vals = vals | {str(v) for v in payload.values()}
                    prev = nxt.get(new_vals)
                    nxt[new_vals] = (count + (prev[0] if prev else 0), prev[1] if prev else witness + [call])
        layer = nxt
        for vals in layer:
            reachable |= vals
        winners = [(c, w) for vals, (c, w) in layer.items() if succeeded(vals)]
        if winners:
            total = sum(c for c, _ in winners)
            return SolverResult(length, total, winners[0][1], reachable)
    return SolverResult(None, 0, [], reachable)
