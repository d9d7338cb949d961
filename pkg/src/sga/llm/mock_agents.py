"""Request handlers that let ``MockBackend`` play the tracker, decision maker and critic.

They read the same rendered prompts a real model would see, so the
executor is exercised end to end without a network. The decision handler
is adversarial: it only solves a task by following a feasible hint.
"""
from __future__ import annotations

import json
import re
from typing import Any, Sequence

from ..core import KnownInfo, StructuredState, ToolCall, ToolSchema, abstract_state, canonical_call, facts_from_observation, is_slot_tag
from .backends import ChatRequest, ChatResponse

TRACKER_MARK = "SGA Retriever Planner"
DECIDER_MARK = "decide which tool to call"
CRITIC_MARK = "Messages Evaluation Expert"
HALLUCINATED = "<answer>unknown</answer>"


def _system(req: ChatRequest) -> str:
    return next((m["content"] for m in req.messages if m.get("role") == "system"), "")


def _field(text: str, label: str) -> str | None:
    m = re.search(rf"^- {re.escape(label)}: (.*)$", text, re.M)
    return m.group(1) if m else None


def make_tracker_handler(tools: Sequence[ToolSchema] = ()):
    """Rule-based tracker reply; the goal is derived like the scripted search policy's."""
    from ..policy import ScriptedPolicy

    policy = ScriptedPolicy()

    def handle(req: ChatRequest) -> ChatResponse | None:
        system = _system(req)
        if TRACKER_MARK not in system:
            return None
        question = _field(system, "User Request") or ""
        history = json.loads(_field(system, "Execution History") or "[]")
        known = KnownInfo.from_dict(json.loads(_field(system, "Current World Model (Known Info)") or "{}"))
        state = StructuredState.from_dict({"history": history, "known": known.to_dict(), "global_goal": question})
        updates: dict[str, str] = {}
        if state.history:
            for tag, value in facts_from_observation(state.history[-1][1]).items():
                if known.get(tag) != value:
                    updates[tag] = value
        state = StructuredState(state.history, known.merged(updates), "", question)
        goal = policy.next_goal(state, tools) if tools else f"Answer: {question}"
        reply = {
            "thought": "extract facts from the latest tool result",
            "updated_known_info": updates,
            "state_summary": abstract_state(state).summary,
            "available_slots": list(state.known),
            "next_goal": goal,
        }
        return ChatResponse(json.dumps(reply))

    return handle


def parse_hints(system: str) -> list[dict[str, Any]]:
    """Recover ``{sga_id, required_slots, action}`` from a rendered hint list."""
    out = []
    for line in system.splitlines():
        m = re.match(r"^\d+\. \[([^\]]+)\] state: ", line)
        if not m or " | action: " not in line or " | required_slots: " not in line:
            continue
        head, action = line.rsplit(" | action: ", 1)
        slots = head.rsplit(" | required_slots: ", 1)[1]
        try:
            out.append({"sga_id": m.group(1), "required_slots": json.loads(slots), "action": json.loads(action)})
        except json.JSONDecodeError:
            continue
    return out


def _context(req: ChatRequest) -> dict:
    for m in req.messages:
        if m.get("role") == "user":
            try:
                return json.loads(m["content"].split("\n", 1)[0])
            except (json.JSONDecodeError, KeyError):
                continue
    return {}


def make_decide_handler():
    """Adversarial decision maker.

    Grounds the first hint whose slots are all known and whose call has not
    been made. Without such a hint it answers the newest known value when
    hints were given and the last tool call succeeded, and otherwise gives
    an answer that is not supported by any tool result.
    """

    def handle(req: ChatRequest) -> ChatResponse | None:
        system = _system(req)
        if DECIDER_MARK not in system:
            return None
        hints = parse_hints(system)
        ctx = _context(req)
        known = ctx.get("known") or {}
        history = ctx.get("history") or []
        tool_names = {d["function"]["name"] for d in req.declarations()}
        made = {
            canonical_call(ToolCall.of(h["action"]["tool_name"], h["action"].get("arguments") or {}))
            for h in history if h["action"].get("type") == "tool_call"
        }
        for hint in hints:
            action = hint["action"]
            name = action.get("tool_name")
            if name not in tool_names or not all(s in known for s in hint["required_slots"]):
                continue
            args = {k: known[v] if isinstance(v, str) and is_slot_tag(v) else v
                    for k, v in (action.get("argument_template") or {}).items()}
            if any(isinstance(v, str) and is_slot_tag(v) for v in args.values()):
                continue
            call = ToolCall.of(name, args)
            if canonical_call(call) not in made:
                return ChatResponse("", (call,))
        last_ok = bool(history) and history[-1]["action"].get("type") == "tool_call" \
            and history[-1]["observation"].get("status") == "ok"
        if hints and last_ok and known:
            return ChatResponse(f"<answer>{list(known.values())[-1]}</answer>")
        return ChatResponse(HALLUCINATED)

    return handle


def critic_handler(req: ChatRequest) -> ChatResponse | None:
    """Grounding critic over a rendered trace: the answer must repeat a tool-result value."""
    if CRITIC_MARK not in _system(req):
        return None
    trace = next((m["content"] for m in req.messages if m.get("role") == "user"), "")
    evidence: list[str] = []
    answer = None
    for line in trace.splitlines():
        if line.startswith("Tool: result ") and not line.startswith("Tool: result Error"):
            body = line[len("Tool: result "):].strip()
            try:
                data = json.loads(body)
                evidence.extend(str(v) for v in (data.values() if isinstance(data, dict) else [data]))
            except json.JSONDecodeError:
                evidence.append(body)
        elif line.startswith("AI: ") and not line.startswith("AI: call "):
            answer = line[4:]
    if answer is None:
        verdict = {"solved": False, "grounded": False, "score": 0.0, "rationale": "no answer"}
    elif any(e and e in answer for e in evidence):
        verdict = {"solved": True, "grounded": True, "score": 1.0, "rationale": "supported"}
    else:
        verdict = {"solved": True, "grounded": False, "score": 0.0, "rationale": "not supported"}
    return ChatResponse(json.dumps(verdict))


def agent_handlers(tools: Sequence[ToolSchema] = ()) -> list:
    return [make_tracker_handler(tools), make_decide_handler(), critic_handler]
