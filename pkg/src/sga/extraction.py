"""Distill successful trajectories into de-lexicalized State-Goal-Action atoms.

Each ToolCall step of a verified trajectory becomes one atom: the abstract
summary of the pre-action state, the step's sub-goal, and the call with its
data arguments replaced by slot tags. Control literals stay as they are, so
an atom can be re-grounded against any tracker holding the same slots.
"""
from __future__ import annotations

import json
import logging
import re
import warnings
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Protocol, Sequence

from .core import (
    FinalAnswer,
    KnownInfo,
    Plan,
    Reflect,
    ToolCall,
    ToolSchema,
    Trajectory,
    abstract_state,
    canonical_json,
    delexicalize_text,
    is_slot_tag,
)
from .llm.backends import BackendError, ChatBackend, ChatRequest, parse_json_content
from .llm.prompts import render_prompt

log = logging.getLogger(__name__)

STORE_VERSION = 1


class AbstractionError(RuntimeError):
    """The abstractor could not produce a valid atom for a step."""


class UnknownArgument(UserWarning):
    """A call argument has no matching parameter in the tool schema."""


@dataclass(frozen=True)
class Provenance:
    task_id: str
    step_index: int
    leaf_reward: float

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "step_index": self.step_index, "leaf_reward": self.leaf_reward}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Provenance":
        return cls(d["task_id"], int(d["step_index"]), float(d["leaf_reward"]))


@dataclass(frozen=True)
class SgaAtom:
    """One de-lexicalized transition.

    ``action_template`` is ``{"tool_name", "argument_template"}`` for tool
    atoms, or ``{"description"}`` for the opt-in Plan/Reflect atoms.
    """

    sga_id: str
    state_description: str
    required_slots: frozenset[str]
    goal: str
    action_template: Mapping[str, Any]
    provenance: Provenance
    embedding: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.provenance.leaf_reward <= 0:
            raise ValueError("atoms come from successful trajectories only (leaf_reward > 0)")
        for tag in self.template_tags:
            if tag not in self.required_slots:
                raise ValueError(f"template slot {tag} missing from required_slots")

    @property
    def tool_name(self) -> str | None:
        return self.action_template.get("tool_name")

    @property
    def argument_template(self) -> dict[str, Any]:
        return dict(self.action_template.get("argument_template") or {})

    @property
    def template_tags(self) -> set[str]:
        return {v for v in self.argument_template.values() if isinstance(v, str) and is_slot_tag(v)}

    @property
    def embedding_text(self) -> str:
        return f"{self.state_description} || {self.goal}"

    def canonical_key(self) -> str:
        return canonical_json({
            "state": _normalize(self.state_description),
            "goal": _normalize(self.goal),
            "action": dict(self.action_template),
        })

    def to_dict(self) -> dict:
        return {
            "v": STORE_VERSION,
            "sga_id": self.sga_id,
            "state_description": self.state_description,
            "required_slots": sorted(self.required_slots),
            "goal": self.goal,
            "action_template": dict(self.action_template),
            "provenance": self.provenance.to_dict(),
            "embedding": None if self.embedding is None else list(self.embedding),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SgaAtom":
        emb = d.get("embedding")
        return cls(
            d["sga_id"],
            d["state_description"],
            frozenset(d.get("required_slots", ())),
            d["goal"],
            dict(d["action_template"]),
            Provenance.from_dict(d["provenance"]),
            None if emb is None else tuple(float(x) for x in emb),
        )


def _normalize(text: str) -> str:
    return " ".join(text.split())


# ---------------------------------------------------------------------------
# Action de-lexicalization


def _tag_of_value(value: str, known: Mapping[str, str]) -> str | None:
    for tag, v in known.items():
        if v == value:
            return tag
    return None


def delexicalize_action(call: ToolCall, schema: ToolSchema, known: Mapping[str, str]) -> dict[str, Any]:
    """Mask data arguments with slot tags; keep control literals.

    A data value that equals a tracked entity takes that entity's tag,
    otherwise the parameter's semantic-type tag.
    """
    if call.tool_name != schema.name:
        raise ValueError(f"call to {call.tool_name!r} does not match schema {schema.name!r}")
    out: dict[str, Any] = {}
    for name, value in call.arguments:
        param = schema.param(name)
        if param is None:
            warnings.warn(f"{schema.name}: argument {name!r} not in schema, kept verbatim", UnknownArgument,
                          stacklevel=2)
            out[name] = value
        elif param.kind == "control":
            out[name] = value
        else:
            out[name] = _tag_of_value(str(value).strip(), known) or param.tag
    return out


def instantiate_template(argument_template: Mapping[str, Any], known: Mapping[str, str]) -> dict[str, Any]:
    """Ground a template: slot tags become the tracked values, literals pass through."""
    out = {}
    for name, value in argument_template.items():
        if isinstance(value, str) and is_slot_tag(value):
            if value not in known:
                raise KeyError(value)
            out[name] = known[value]
        else:
            out[name] = value
    return out


def regrounds(call: ToolCall, argument_template: Mapping[str, Any], known: Mapping[str, str]) -> bool:
    """True when instantiating the template against ``known`` gives back the call's arguments."""
    try:
        grounded = instantiate_template(argument_template, known)
    except KeyError:
        return False
    return canonical_json(grounded) == canonical_json(call.args)


def _leaks(text: str, known: Mapping[str, str]) -> bool:
    return any(v and v in text for v in known.values())


# ---------------------------------------------------------------------------
# Abstractors


@dataclass(frozen=True)
class StepView:
    """What an abstractor sees of one step."""

    question: str
    trajectory: Trajectory
    index: int
    schema: ToolSchema | None


@dataclass(frozen=True)
class AbstractedStep:
    state_description: str
    goal: str
    action_template: Mapping[str, Any]


class Abstractor(Protocol):
    def abstract(self, view: StepView) -> AbstractedStep: ...


class RuleAbstractor:
    """Deterministic masking: abstract_state summary, verbatim sub-goal, schema-typed argument masks."""

    def abstract(self, view: StepView) -> AbstractedStep:
        step = view.trajectory.steps[view.index]
        state, action = step.state, step.action
        summary = abstract_state(state).summary
        if isinstance(action, ToolCall):
            if view.schema is None:
                raise AbstractionError(f"no schema for tool {action.tool_name!r}")
            template = {"tool_name": action.tool_name,
                        "argument_template": delexicalize_action(action, view.schema, state.known)}
        else:
            template = {"description": _meta_description(action, state.known)}
        return AbstractedStep(summary, state.sub_goal, template)


def _meta_description(action, known: Mapping[str, str]) -> str:
    if isinstance(action, Plan):
        text = f"plan: {action.priority_focus or action.task_plan}"
    elif isinstance(action, Reflect):
        text = f"reflect: {action.alternative_ideas}"
    else:
        raise AbstractionError(f"no meta description for {action.kind}")
    return delexicalize_text(text, known)


SGA_OUTPUT_FORMAT = (
    "Return a JSON object with keys state_summary, goal, action and argument_template. "
    "argument_template maps each argument name of the call to a slot tag such as <CITY> "
    "for data values or to the literal value for control options."
)


class LLMAbstractor:
    """Asks a chat model for the triplet, then accepts it only if it re-grounds.

    The model's state summary must not leak tracked values and its argument
    template must reproduce the original call when instantiated.
    """

    def __init__(self, backend: ChatBackend):
        self.backend = backend

    def abstract(self, view: StepView) -> AbstractedStep:
        step = view.trajectory.steps[view.index]
        state, action = step.state, step.action
        if not isinstance(action, ToolCall):
            return RuleAbstractor().abstract(view)
        messages = render_prompt("sga_extractor")
        payload = {
            "question": view.question,
            "known": state.known.to_dict(),
            "trajectory": [{"action": s.action.to_dict(), "observation": s.observation.to_dict()}
                           for s in view.trajectory.steps],
            "step_index": view.index,
        }
        messages.append({"role": "user", "content": json.dumps(payload, ensure_ascii=False) + "\n" + SGA_OUTPUT_FORMAT})
        try:
            data = parse_json_content(self.backend.complete(ChatRequest.build(messages)).content)
            summary = str(data["state_summary"]).strip()
            goal = str(data.get("goal") or state.sub_goal).strip()
            args = dict(data["argument_template"])
        except (BackendError, KeyError, TypeError, ValueError) as exc:
            raise AbstractionError(f"extractor reply unusable: {exc}") from exc
        if not summary or _leaks(summary, state.known):
            raise AbstractionError("state summary is empty or leaks concrete values")
        if not regrounds(action, args, state.known):
            raise AbstractionError("argument template does not re-ground to the original call")
        return AbstractedStep(summary, goal, {"tool_name": action.tool_name, "argument_template": args})


# ---------------------------------------------------------------------------
# Extraction


def extract_atoms(trajectory: Trajectory, schemas: Sequence[ToolSchema], abstractor: Abstractor | None = None,
                  *, include_meta: bool = False, domain: str = "sga") -> list[SgaAtom]:
    """One atom per ToolCall step (plus Plan/Reflect steps when ``include_meta``).

    A step the abstractor fails on is logged and skipped. Atom ids are
    provisional; :func:`assign_ids` numbers them after deduplication.
    """
    if not trajectory.success:
        raise ValueError("only successful trajectories can be distilled")
    abstractor = abstractor or RuleAbstractor()
    by_name = {s.name: s for s in schemas}
    leaf = trajectory.reward if trajectory.reward is not None else 1.0
    question = trajectory.steps[0].state.global_goal if trajectory.steps else ""
    atoms = []
    for i, step in enumerate(trajectory.steps):
        action = step.action
        if isinstance(action, FinalAnswer):
            continue
        if not isinstance(action, ToolCall) and not include_meta:
            continue
        view = StepView(question, trajectory, i, by_name.get(getattr(action, "tool_name", "")))
        try:
            abstracted = abstractor.abstract(view)
        except AbstractionError as exc:
            log.warning("skipping step %d of %s: %s", i, trajectory.task_id, exc)
            continue
        template = dict(abstracted.action_template)
        slots = {v for v in (template.get("argument_template") or {}).values()
                 if isinstance(v, str) and is_slot_tag(v)}
        atoms.append(SgaAtom(
            sga_id=f"{domain}_{goal_slug(abstracted.goal)}_{len(atoms) + 1:02d}",
            state_description=abstracted.state_description,
            required_slots=frozenset(slots),
            goal=abstracted.goal,
            action_template=template,
            provenance=Provenance(trajectory.task_id, i, leaf),
        ))
    return atoms


def dedup_atoms(atoms: Iterable[SgaAtom]) -> list[SgaAtom]:
    """Merge atoms with the same canonical key.

    The survivor has the highest leaf reward; on a tie the first one seen
    wins. Output follows first appearance of each key.
    """
    best: dict[str, SgaAtom] = {}
    for atom in atoms:
        key = atom.canonical_key()
        cur = best.get(key)
        if cur is None or atom.provenance.leaf_reward > cur.provenance.leaf_reward:
            best[key] = atom
    return list(best.values())


def goal_slug(goal: str, max_words: int = 6) -> str:
    words = re.findall(r"[a-z0-9]+", goal.lower())
    return "_".join(words[:max_words]) or "step"


def assign_ids(atoms: Sequence[SgaAtom], domain: str = "sga") -> list[SgaAtom]:
    """Number atoms ``<domain>_<goal-slug>_<NN>`` in order; the counter runs per slug."""
    counters: dict[str, int] = {}
    out = []
    for atom in atoms:
        slug = f"{domain}_{goal_slug(atom.goal)}"
        counters[slug] = counters.get(slug, 0) + 1
        out.append(replace(atom, sga_id=f"{slug}_{counters[slug]:02d}"))
    return out


def distill(trajectories: Iterable[Trajectory], schemas: Sequence[ToolSchema], abstractor: Abstractor | None = None,
            *, include_meta: bool = False, domain: str = "sga") -> list[SgaAtom]:
    """Extract, deduplicate and number atoms from every successful trajectory."""
    atoms: list[SgaAtom] = []
    for traj in trajectories:
        if traj.success:
            atoms.extend(extract_atoms(traj, schemas, abstractor, include_meta=include_meta, domain=domain))
    return assign_ids(dedup_atoms(atoms), domain)


def compression_ratio(explored_action_count: int, store_size: int) -> float:
    if store_size <= 0:
        raise ZeroDivisionError("store_size must be positive")
    return explored_action_count / store_size


def source_values(known: KnownInfo) -> list[str]:
    return [v for v in known.values() if v]
