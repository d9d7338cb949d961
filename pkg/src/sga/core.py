"""Domain model shared by every other module.

States, actions, observations, trajectories, tool schemas and the state
abstraction that turns a concrete state into a de-lexicalized summary.
All types are frozen dataclasses with a JSON round-trip (``to_dict`` /
``from_dict``); field names in the dicts are the documented wire names.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping, Union

SLOT_PATTERN = re.compile(r"<[A-Z][A-Z0-9_]*>")
_SLOT_FULL = re.compile(r"^<[A-Z][A-Z0-9_]*>$")


def is_slot_tag(text: str) -> bool:
    return bool(_SLOT_FULL.match(text))


def tag_for(name: str) -> str:
    """Map a field or semantic-type name to its slot tag (``year`` -> ``<YEAR>``)."""
    if is_slot_tag(name):
        return name
    core = re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_").upper()
    if not core or not core[0].isalpha():
        core = "SLOT_" + core
    return f"<{core}>"


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Known-info tracker


@dataclass(frozen=True)
class KnownInfo(Mapping[str, str]):
    """Ordered, immutable map from slot tag to concrete value."""

    entries: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        seen = set()
        for tag, value in self.entries:
            if not is_slot_tag(tag):
                raise ValueError(f"invalid slot tag {tag!r}")
            if tag in seen:
                raise ValueError(f"duplicate slot tag {tag!r}")
            if not isinstance(value, str):
                raise TypeError(f"value for {tag} must be text, got {type(value).__name__}")
            seen.add(tag)

    @classmethod
    def of(cls, mapping: Mapping[str, str] | None = None) -> "KnownInfo":
        if not mapping:
            return cls()
        return cls(tuple((tag_for(k), str(v)) for k, v in mapping.items()))

    def __getitem__(self, tag: str) -> str:
        for k, v in self.entries:
            if k == tag:
                return v
        raise KeyError(tag)

    def __iter__(self) -> Iterator[str]:
        return (k for k, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def merged(self, updates: Mapping[str, str]) -> "KnownInfo":
        """Return a tracker with ``updates`` applied; a re-reported tag takes the newest value."""
        if not updates:
            return self
        current = dict(self.entries)
        for k, v in updates.items():
            current[tag_for(k)] = str(v)
        return KnownInfo(tuple(current.items()))

    def to_dict(self) -> dict[str, str]:
        return dict(self.entries)

    @classmethod
    def from_dict(cls, data: Mapping[str, str]) -> "KnownInfo":
        return cls(tuple((k, v) for k, v in data.items()))


# ---------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    arguments: tuple[tuple[str, Any], ...] = ()

    kind = "tool_call"

    def __post_init__(self) -> None:
        # Argument order carries no meaning; keep it sorted so equality and hashing agree.
        object.__setattr__(self, "arguments", tuple(sorted(self.arguments, key=lambda kv: kv[0])))

    @classmethod
    def of(cls, tool_name: str, arguments: Mapping[str, Any] | None = None) -> "ToolCall":
        return cls(tool_name, tuple((arguments or {}).items()))

    @property
    def args(self) -> dict[str, Any]:
        return dict(self.arguments)

    def to_dict(self) -> dict:
        return {"type": self.kind, "tool_name": self.tool_name, "arguments": self.args}


@dataclass(frozen=True)
class Plan:
    task_plan: str
    priority_focus: str | None = None

    kind = "plan"

    def __post_init__(self) -> None:
        if not self.task_plan.strip():
            raise ValueError("Plan.task_plan must be non-empty")

    def to_dict(self) -> dict:
        d = {"type": self.kind, "task_plan": self.task_plan}
        if self.priority_focus is not None:
            d["priority_focus"] = self.priority_focus
        return d


@dataclass(frozen=True)
class Reflect:
    current_context: str
    critique: str
    alternative_ideas: str

    kind = "reflect"

    def __post_init__(self) -> None:
        for name in ("current_context", "critique", "alternative_ideas"):
            if not getattr(self, name).strip():
                raise ValueError(f"Reflect.{name} must be non-empty")

    def to_dict(self) -> dict:
        return {
            "type": self.kind,
            "current_context": self.current_context,
            "critique": self.critique,
            "alternative_ideas": self.alternative_ideas,
        }


@dataclass(frozen=True)
class FinalAnswer:
    text: str

    kind = "final_answer"

    def to_dict(self) -> dict:
        return {"type": self.kind, "text": self.text}


AgentAction = Union[ToolCall, Plan, Reflect, FinalAnswer]


def action_from_dict(data: Mapping[str, Any]) -> AgentAction:
    kind = data.get("type")
    if kind == "tool_call":
        return ToolCall.of(data["tool_name"], data.get("arguments") or {})
    if kind == "plan":
        return Plan(data["task_plan"], data.get("priority_focus"))
    if kind == "reflect":
        return Reflect(data["current_context"], data["critique"], data["alternative_ideas"])
    if kind == "final_answer":
        return FinalAnswer(data["text"])
    raise ValueError(f"unknown action type {kind!r}")


def action_key(action: AgentAction) -> str:
    """Canonical serialization; the ordering used for every deterministic tie-break."""
    return canonical_json(action.to_dict())


def canonical_call(call: ToolCall) -> str:
    """Identity of a tool call for duplicate detection: sorted keys, trimmed strings."""
    args = {k.strip(): (v.strip() if isinstance(v, str) else v) for k, v in call.arguments}
    return canonical_json({"tool_name": call.tool_name.strip(), "arguments": args})


# ---------------------------------------------------------------------------
# Observations and state


@dataclass(frozen=True)
class Observation:
    status: str  # "ok" | "error"
    payload: str = ""
    error_kind: str | None = None

    def __post_init__(self) -> None:
        if self.status not in ("ok", "error"):
            raise ValueError(f"status must be ok|error, got {self.status!r}")
        if self.status == "error" and not self.error_kind:
            raise ValueError("error observations need an error_kind")

    @classmethod
    def ok(cls, payload: str = "") -> "Observation":
        return cls("ok", payload)

    @classmethod
    def error(cls, kind: str, payload: str = "") -> "Observation":
        return cls("error", payload, kind)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"status": self.status, "payload": self.payload}
        if self.error_kind is not None:
            d["error_kind"] = self.error_kind
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Observation":
        return cls(data["status"], data.get("payload", ""), data.get("error_kind"))


def facts_from_observation(obs: Observation) -> dict[str, str]:
    """Rule-based fact extraction: top-level scalar fields of a JSON object payload."""
    if obs.status != "ok" or not obs.payload:
        return {}
    try:
        data = json.loads(obs.payload)
    except (json.JSONDecodeError, TypeError):
        return {}
    if not isinstance(data, dict):
        return {}
    return {
        tag_for(k): str(v)
        for k, v in data.items()
        if isinstance(v, (str, int, float)) and not isinstance(v, bool) and str(v) != ""
    }


Step = tuple[AgentAction, Observation]


@dataclass(frozen=True)
class StructuredState:
    history: tuple[Step, ...] = ()
    known: KnownInfo = field(default_factory=KnownInfo)
    sub_goal: str = ""
    global_goal: str = ""

    def after(self, action: AgentAction, obs: Observation) -> "StructuredState":
        """State after executing ``action``; Plan sets the sub-goal, tool results feed the tracker."""
        known = self.known
        sub_goal = self.sub_goal
        if isinstance(action, ToolCall):
            known = known.merged(facts_from_observation(obs))
        elif isinstance(action, Plan):
            sub_goal = action.priority_focus or action.task_plan
        return StructuredState(self.history + ((action, obs),), known, sub_goal, self.global_goal)

    @property
    def tool_step_count(self) -> int:
        return sum(isinstance(a, ToolCall) for a, _ in self.history)

    def to_dict(self) -> dict:
        return {
            "history": [{"action": a.to_dict(), "observation": o.to_dict()} for a, o in self.history],
            "known": self.known.to_dict(),
            "sub_goal": self.sub_goal,
            "global_goal": self.global_goal,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StructuredState":
        history = tuple(
            (action_from_dict(s["action"]), Observation.from_dict(s["observation"]))
            for s in data.get("history", [])
        )
        return cls(
            history,
            KnownInfo.from_dict(data.get("known", {})),
            data.get("sub_goal", ""),
            data.get("global_goal", ""),
        )


# ---------------------------------------------------------------------------
# Trajectories


@dataclass(frozen=True)
class TrajectoryStep:
    state: StructuredState
    action: AgentAction
    observation: Observation

    def to_dict(self) -> dict:
        return {
            "state": self.state.to_dict(),
            "action": self.action.to_dict(),
            "observation": self.observation.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrajectoryStep":
        return cls(
            StructuredState.from_dict(data["state"]),
            action_from_dict(data["action"]),
            Observation.from_dict(data["observation"]),
        )


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    steps: tuple[TrajectoryStep, ...] = ()
    success: bool = False
    final_answer: str | None = None
    reward: float | None = None

    def __post_init__(self) -> None:
        if self.success and self.final_answer is None:
            raise ValueError("a successful trajectory needs a final answer")

    def __len__(self) -> int:
        # Only environment interactions count toward |tau|.
        return sum(isinstance(s.action, ToolCall) for s in self.steps)

    @property
    def tool_calls(self) -> list[ToolCall]:
        return [s.action for s in self.steps if isinstance(s.action, ToolCall)]

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "steps": [s.to_dict() for s in self.steps],
            "success": self.success,
            "final_answer": self.final_answer,
            "reward": self.reward,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Trajectory":
        return cls(
            data["task_id"],
            tuple(TrajectoryStep.from_dict(s) for s in data.get("steps", [])),
            bool(data.get("success", False)),
            data.get("final_answer"),
            data.get("reward"),
        )

    def to_jsonl_lines(self, traj_index: int = 0) -> list[str]:
        """One JSON object per step; trajectory-level fields are repeated on every line."""
        head = {
            "task_id": self.task_id,
            "traj_index": traj_index,
            "success": self.success,
            "final_answer": self.final_answer,
            "reward": self.reward,
        }
        return [
            # Not key-sorted: the tracker's insertion order is part of the state.
            json.dumps({**head, "step_index": i, **step.to_dict()}, ensure_ascii=False, separators=(",", ":"))
            for i, step in enumerate(self.steps)
        ]


def trajectories_from_jsonl(lines: Iterable[str]) -> list[Trajectory]:
    grouped: dict[tuple[str, int], list[dict]] = {}
    for line in lines:
        line = line.strip()
        if not line:
            continue
        row = json.loads(line)
        grouped.setdefault((row["task_id"], row.get("traj_index", 0)), []).append(row)
    out = []
    for (task_id, _), rows in grouped.items():
        rows.sort(key=lambda r: r["step_index"])
        head = rows[0]
        out.append(
            Trajectory(
                task_id,
                tuple(TrajectoryStep.from_dict(r) for r in rows),
                bool(head["success"]),
                head.get("final_answer"),
                head.get("reward"),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Tool schemas


@dataclass(frozen=True)
class ToolParameter:
    name: str
    semantic_type: str
    kind: str = "data"  # "data" | "control"
    enum_values: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("data", "control"):
            raise ValueError(f"parameter kind must be data|control, got {self.kind!r}")
        if self.kind == "control" and not self.enum_values:
            raise ValueError(f"control parameter {self.name!r} needs enum_values")

    @property
    def tag(self) -> str:
        return tag_for(self.semantic_type)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"name": self.name, "semantic_type": self.semantic_type, "kind": self.kind}
        if self.enum_values is not None:
            d["enum_values"] = list(self.enum_values)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ToolParameter":
        enum = data.get("enum_values")
        return cls(
            data["name"],
            data.get("semantic_type", data["name"]),
            data.get("kind", "data"),
            tuple(enum) if enum is not None else None,
        )


@dataclass(frozen=True)
class ToolSchema:
    """A tool's name, description and typed parameters.

    ``output_slot`` is optional: the slot tag the tool's result populates,
    when the environment declares one.
    """

    name: str
    description: str
    parameters: tuple[ToolParameter, ...] = ()
    output_slot: str | None = None

    def __post_init__(self) -> None:
        names = [p.name for p in self.parameters]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate parameter names in tool {self.name!r}")

    def param(self, name: str) -> ToolParameter | None:
        for p in self.parameters:
            if p.name == name:
                return p
        return None

    @property
    def data_tags(self) -> frozenset[str]:
        return frozenset(p.tag for p in self.parameters if p.kind == "data")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "name": self.name,
            "description": self.description,
            "parameters": [p.to_dict() for p in self.parameters],
        }
        if self.output_slot is not None:
            d["output_slot"] = self.output_slot
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ToolSchema":
        return cls(
            data["name"],
            data.get("description", ""),
            tuple(ToolParameter.from_dict(p) for p in data.get("parameters", [])),
            data.get("output_slot"),
        )

    def to_openai(self) -> dict:
        """Function declaration in the chat-completions ``tools`` format."""
        props: dict[str, Any] = {}
        for p in self.parameters:
            prop: dict[str, Any] = {"type": "string", "description": f"{p.semantic_type} ({p.kind})"}
            if p.enum_values:
                prop["enum"] = list(p.enum_values)
            props[p.name] = prop
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": props,
                    "required": [p.name for p in self.parameters],
                },
            },
        }


# ---------------------------------------------------------------------------
# Abstraction


@dataclass(frozen=True)
class AbstractState:
    summary: str
    slot_schema: frozenset[str]


def delexicalize_text(text: str, known: Mapping[str, str]) -> str:
    """Replace every known value in ``text`` with its slot tag.

    Single left-to-right pass, longest value first, case-sensitive, exact
    strings. When two tags share a value the first-inserted tag wins.
    """
    by_value: dict[str, str] = {}
    for tag, value in known.items():
        if value and value not in by_value:
            by_value[value] = tag
    if not by_value:
        return text
    values = sorted(by_value, key=lambda v: (-len(v), v))
    pattern = re.compile("|".join(re.escape(v) for v in values))
    # Existing slot tags are left alone so the substitution is idempotent.
    parts = re.split(f"({SLOT_PATTERN.pattern})", text)
    return "".join(
        part if i % 2 else pattern.sub(lambda m: by_value[m.group(0)], part) for i, part in enumerate(parts)
    )


def _last_step_label(state: StructuredState) -> str:
    if not state.history:
        return "start"
    action, obs = state.history[-1]
    if isinstance(action, ToolCall):
        return "tool ok" if obs.status == "ok" else f"tool error ({obs.error_kind})"
    if isinstance(action, FinalAnswer):
        # Distinct answers must not share a node.
        return f"final answer ({action.text.strip()})"
    return action.kind


def abstract_state(state: StructuredState) -> AbstractState:
    """De-lexicalized view of a state: a summary text plus the set of available slots.

    The summary mentions the global goal, the available slot tags, the step
    count and the outcome of the last step. It depends on the history only
    through its length and last step, so equivalent orderings collapse.
    """
    slots = frozenset(state.known)
    known_part = ", ".join(sorted(slots)) or "none"
    summary = (
        f"task: {state.global_goal} | known: {known_part} | "
        f"step {len(state.history)} | last: {_last_step_label(state)}"
    )
    return AbstractState(delexicalize_text(summary, state.known), slots)


def state_key(state: StructuredState) -> str:
    abstract = abstract_state(state)
    payload = canonical_json(
        {
            "slots": sorted(abstract.slot_schema),
            "summary": " ".join(abstract.summary.split()),
            "sub_goal": state.sub_goal,
        }
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
