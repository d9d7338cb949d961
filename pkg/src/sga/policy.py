"""Search policies that propose actions during tree search.

A policy answers four questions about a state: what the next sub-goal is,
how to plan toward it (and which tools are relevant), which actions to try
and how to reflect on a failure. ``ScriptedPolicy`` answers them from the
tool schemas alone and is what tests and the mock pipeline use;
``LLMSearchPolicy`` asks a chat backend.
"""
from __future__ import annotations

import json
import logging
from typing import Protocol, Sequence

from .core import (
    SLOT_PATTERN,
    AgentAction,
    FinalAnswer,
    Observation,
    Plan,
    Reflect,
    StructuredState,
    ToolCall,
    ToolSchema,
    canonical_call,
    state_key,
)
from .env import extract_answer
from .llm.backends import BackendError, ChatBackend, ChatRequest, Sampling, parse_json_content
from .llm.prompts import PLAN_TOOL, REFLECT_TOOL, render_prompt

log = logging.getLogger(__name__)

REPORT_GOAL = "Report the final answer"


class PolicyError(RuntimeError):
    """The policy (or its backend) could not produce an action."""


class SearchPolicy(Protocol):
    def next_goal(self, state: StructuredState, tools: Sequence[ToolSchema]) -> str: ...

    def plan(self, state: StructuredState, tools: Sequence[ToolSchema]) -> tuple[Plan, list[str]]: ...

    def propose(self, state: StructuredState, tools: Sequence[ToolSchema]) -> list[tuple[AgentAction, float]]: ...

    def reflect(self, state: StructuredState, action: ToolCall, obs: Observation) -> Reflect: ...


def made_calls(state: StructuredState) -> set[str]:
    return {canonical_call(a) for a, _ in state.history if isinstance(a, ToolCall)}


def last_reflection(state: StructuredState) -> Reflect | None:
    if state.history and isinstance(state.history[-1][0], Reflect):
        return state.history[-1][0]
    return None


class ScriptedPolicy:
    """Schema-driven policy for simulated environments.

    Sub-goals name the output slots that can be produced from the slots
    already known; a sub-goal stays active until all its slots are known.
    Proposal weights favour tools producing a targeted slot with
    type-matched arguments, and leave small mass on distractors, mismatched
    arguments and premature answers so that search has something to prune.
    """

    def __init__(self, productive: float = 1.0, distractor: float = 0.2,
                 mismatched: float = 0.05, premature: float = 0.02):
        self.productive = productive
        self.distractor = distractor
        self.mismatched = mismatched
        self.premature = premature

    def _producible(self, state: StructuredState, tools: Sequence[ToolSchema]) -> list[ToolSchema]:
        known = set(state.known)
        return [
            t for t in tools
            if t.output_slot and t.output_slot not in known and t.data_tags <= known
        ]

    def next_goal(self, state: StructuredState, tools: Sequence[ToolSchema]) -> str:
        goal = state.sub_goal
        if goal == REPORT_GOAL:
            return goal
        targets = set(SLOT_PATTERN.findall(goal.split(" from ")[0])) if goal else set()
        if targets and not targets <= set(state.known):
            return goal
        producible = self._producible(state, tools)
        if not producible:
            return REPORT_GOAL
        outputs = sorted({t.output_slot for t in producible})
        inputs = sorted({tag for t in producible for tag in t.data_tags})
        return f"Obtain {', '.join(outputs)} from {', '.join(inputs) or 'the request'}"

    def plan(self, state: StructuredState, tools: Sequence[ToolSchema]) -> tuple[Plan, list[str]]:
        goal = self.next_goal(state, tools)
        known = set(state.known)
        allowed = sorted(t.name for t in tools if t.data_tags <= known)
        slots = ", ".join(sorted(known)) or "none"
        task_plan = (
            f"1. Analysis: available slots {slots}. "
            f"2. Strategy: {goal}. "
            "3. Execution steps: call a relevant tool with available slots, then re-plan."
        )
        return Plan(task_plan, goal), allowed

    def propose(self, state: StructuredState, tools: Sequence[ToolSchema]) -> list[tuple[AgentAction, float]]:
        known = state.known
        done = made_calls(state)
        reflection = last_reflection(state)
        banned = reflection.critique if reflection else ""
        newest = list(known.values())[-1] if len(known) else ""
        if state.sub_goal == REPORT_GOAL:
            out: list[tuple[AgentAction, float]] = []
            for tag, value in known.items():
                out.append((FinalAnswer(value), self.productive if value == newest else self.mismatched))
            return out
        targets = set(SLOT_PATTERN.findall(state.sub_goal.split(" from ")[0]))
        out = []
        for tool in tools:
            base = self.productive if tool.output_slot in targets else self.distractor
            for args, factor in self._assignments(tool, known):
                call = ToolCall.of(tool.name, args)
                key = canonical_call(call)
                if key in done or (banned and key in banned):
                    continue
                out.append((call, base * factor))
        if newest:
            out.append((FinalAnswer(newest), self.premature))
        return out

    def _assignments(self, tool: ToolSchema, known) -> list[tuple[dict, float]]:
        combos: list[tuple[dict, float]] = [({}, 1.0)]
        for p in tool.parameters:
            if p.kind == "control":
                opts = [(v, 1.0 if i == 0 else 0.5) for i, v in enumerate(p.enum_values or ())]
            else:
                opts = [(v, 1.0 if tag == p.tag else self.mismatched) for tag, v in known.items()]
            combos = [({**args, p.name: v}, w * f) for args, w in combos for v, f in opts]
        return combos

    def reflect(self, state: StructuredState, action: ToolCall, obs: Observation) -> Reflect:
        return Reflect(
            current_context=f"Working on: {state.sub_goal or state.global_goal}",
            critique=f"Call {canonical_call(action)} failed with {obs.error_kind}",
            alternative_ideas="Use a different tool or feed it an argument of the matching slot type.",
        )


class LLMSearchPolicy:
    """Policy backed by a chat model: meta-operators are offered as tools."""

    def __init__(self, backend: ChatBackend, sampling: Sampling = Sampling(), samples: int = 2):
        self.backend = backend
        self.sampling = sampling
        self.samples = samples
        self._goal_cache: dict[str, str] = {}

    def _context(self, state: StructuredState) -> str:
        return json.dumps({
            "question": state.global_goal,
            "sub_goal": state.sub_goal,
            "known": state.known.to_dict(),
            "history": [{"action": a.to_dict(), "observation": o.to_dict()} for a, o in state.history],
        }, ensure_ascii=False)

    def _ask(self, messages, tools=()):
        try:
            return self.backend.complete(ChatRequest.build(messages, tools, sampling=self.sampling))
        except BackendError as exc:
            raise PolicyError(str(exc)) from exc

    def next_goal(self, state: StructuredState, tools: Sequence[ToolSchema]) -> str:
        key = state_key(state)
        if key not in self._goal_cache:
            messages = render_prompt("retriever_planner", {
                "question": state.global_goal,
                "history_str": json.dumps([{"action": a.to_dict(), "observation": o.to_dict()}
                                           for a, o in state.history], ensure_ascii=False),
                "current_known": json.dumps(state.known.to_dict(), ensure_ascii=False),
            })
            messages.append({"role": "user", "content": "Reply with the JSON object only."})
            try:
                goal = str(parse_json_content(self._ask(messages).content).get("next_goal", "")).strip()
            except (BackendError, AttributeError) as exc:
                raise PolicyError(f"tracker reply unusable: {exc}") from exc
            self._goal_cache[key] = goal or state.sub_goal
        return self._goal_cache[key]

    def plan(self, state: StructuredState, tools: Sequence[ToolSchema]) -> tuple[Plan, list[str]]:
        names = ", ".join(t.name for t in tools)
        messages = [
            {"role": "system", "content": f"Decompose the task and call the plan tool. Available tools: {names}."},
            {"role": "user", "content": self._context(state)},
        ]
        resp = self._ask(messages, [PLAN_TOOL])
        call = next((c for c in resp.tool_calls if c.tool_name == "plan"), None)
        if call is None or not str(call.args.get("task_plan", "")).strip():
            raise PolicyError("model did not call the plan operator")
        plan = Plan(str(call.args["task_plan"]), call.args.get("priority_focus") or None)
        text = plan.task_plan + " " + (plan.priority_focus or "")
        allowed = sorted(t.name for t in tools if t.name in text)
        return plan, allowed

    def propose(self, state: StructuredState, tools: Sequence[ToolSchema]) -> list[tuple[AgentAction, float]]:
        messages = render_prompt("decision_maker", {
            "question": state.global_goal,
            "experiences_text": "No prior experience available.",
        })
        messages.append({"role": "user", "content": self._context(state)})
        seen, out = set(), []
        for _ in range(self.samples):
            resp = self._ask(messages, list(tools))
            if resp.tool_calls:
                action: AgentAction = resp.tool_calls[0]
            elif "<answer>" in resp.content.lower():
                action = FinalAnswer(extract_answer(resp.content))
            else:
                continue
            key = json.dumps(action.to_dict(), sort_keys=True)
            if key not in seen:
                seen.add(key)
                out.append((action, 1.0))
        return out

    def reflect(self, state: StructuredState, action: ToolCall, obs: Observation) -> Reflect:
        messages = [
            {"role": "system", "content": "A tool call failed. Call the reflection tool with a pivot."},
            {"role": "user", "content": self._context(state) + "\nFailed call: "
             + json.dumps(action.to_dict()) + "\nObservation: " + json.dumps(obs.to_dict())},
        ]
        resp = self._ask(messages, [REFLECT_TOOL])
        call = next((c for c in resp.tool_calls if c.tool_name == "reflection"), None)
        try:
            return Reflect(str(call.args["current_context"]), str(call.args["critique"]),
                           str(call.args["alternative_ideas"]))
        except (AttributeError, KeyError, ValueError) as exc:
            raise PolicyError(f"unusable reflection: {exc}") from exc
