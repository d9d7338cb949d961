"""Online execution: track state, retrieve atoms, inject them as hints, act.

Per step the backend is asked twice in the happy path: once by the state
tracker and once by the decision maker. Hints only change what the model
reads; the loop's control flow is the same with or without a store.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .core import (
    AgentAction,
    FinalAnswer,
    KnownInfo,
    Observation,
    StructuredState,
    ToolCall,
    ToolSchema,
    Trajectory,
    TrajectoryStep,
    abstract_state,
    canonical_call,
    facts_from_observation,
    tag_for,
)
from .env import Task, ToolEnvironment, extract_answer
from .extraction import SgaAtom
from .llm.backends import BackendError, ChatBackend, ChatRequest, ChatResponse, Sampling, parse_json_content
from .llm.prompts import render_prompt
from .store import EmptyStore, Embedder, ExperienceStore, RetrievalQuery

log = logging.getLogger(__name__)

NO_EXPERIENCE = "No prior experience available."
DEFAULT_MAX_STEPS = 10


class ConstraintViolation(RuntimeError):
    def __init__(self, rule: str, detail: str = ""):
        super().__init__(f"{rule}: {detail}" if detail else rule)
        self.rule = rule


@dataclass(frozen=True)
class PlannerOutput:
    thought: str
    updated_known_info: Mapping[str, str]
    state_summary: str
    available_slots: tuple[str, ...]
    next_goal: str

    def __post_init__(self) -> None:
        if not self.next_goal.strip():
            raise ValueError("next_goal must be non-empty")


@dataclass
class Usage:
    calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    extra_calls: int = 0

    def add(self, resp: ChatResponse) -> None:
        self.calls += 1
        self.prompt_tokens += resp.prompt_tokens
        self.completion_tokens += resp.completion_tokens


@dataclass
class EpisodeResult:
    trajectory: Trajectory
    success: bool
    llm_calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    retrieved: list[list[str]] = field(default_factory=list)
    reprompts: int = 0
    violations: list[str] = field(default_factory=list)
    error: str | None = None
    label: str = ""

    @property
    def steps(self) -> int:
        return len(self.trajectory.steps)

    @property
    def tool_steps(self) -> int:
        return len(self.trajectory)

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def summary_row(self) -> dict[str, Any]:
        return {
            "task_id": self.trajectory.task_id,
            "label": self.label,
            "success": int(self.success),
            "steps": self.steps,
            "tool_steps": self.tool_steps,
            "llm_calls": self.llm_calls,
            "reprompts": self.reprompts,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }


def _history_json(history) -> str:
    return json.dumps([{"action": a.to_dict(), "observation": o.to_dict()} for a, o in history], ensure_ascii=False)


# ---------------------------------------------------------------------------
# State tracking


def rule_based_tracker(question: str, history, known: KnownInfo, fallback_goal: str = "") -> tuple[PlannerOutput, KnownInfo]:
    """Tracker without a model: scalar fields of the latest successful tool result become facts."""
    updates: dict[str, str] = {}
    for action, obs in reversed(history):
        if isinstance(action, ToolCall):
            updates = facts_from_observation(obs)
            break
    new_known = known.merged(updates)
    state = StructuredState(tuple(history), new_known, "", question)
    out = PlannerOutput(
        thought="rule-based tracker",
        updated_known_info=updates,
        state_summary=abstract_state(state).summary,
        available_slots=tuple(new_known),
        next_goal=fallback_goal or f"Make progress on: {question}",
    )
    return out, new_known


def _parse_tracker(data: Any, known: KnownInfo) -> tuple[PlannerOutput, KnownInfo]:
    if not isinstance(data, dict):
        raise ValueError("tracker reply is not an object")
    raw = data.get("updated_known_info") or {}
    if not isinstance(raw, dict):
        raise ValueError("updated_known_info must be an object")
    updates = {tag_for(str(k)): str(v) for k, v in raw.items() if v is not None and str(v) != ""}
    new_known = known.merged(updates)
    slots = tuple(s for s in (data.get("available_slots") or []) if s in new_known) or tuple(new_known)
    out = PlannerOutput(
        thought=str(data.get("thought", "")),
        updated_known_info=updates,
        state_summary=str(data.get("state_summary", "")).strip(),
        available_slots=slots,
        next_goal=str(data.get("next_goal", "")).strip(),
    )
    if not out.state_summary:
        raise ValueError("empty state_summary")
    return out, new_known


def track_state(question: str, history, known: KnownInfo, backend: ChatBackend | None,
                sampling: Sampling = Sampling(), usage: Usage | None = None) -> tuple[PlannerOutput, KnownInfo]:
    """Ask the tracker for new facts, a state summary and the next goal.

    Retries once on a backend or parse failure, then falls back to the
    rule-based tracker. Returns the planner output and the merged tracker.
    """
    usage = usage if usage is not None else Usage()
    if backend is not None:
        messages = render_prompt("retriever_planner", {
            "question": question,
            "history_str": _history_json(history),
            "current_known": json.dumps(known.to_dict(), ensure_ascii=False),
        })
        messages.append({"role": "user", "content": "Reply with one JSON object holding the five fields."})
        for attempt in range(2):
            if attempt:
                usage.extra_calls += 1
            try:
                resp = backend.complete(ChatRequest.build(messages, sampling=sampling))
                usage.add(resp)
                return _parse_tracker(parse_json_content(resp.content), known)
            except (BackendError, ValueError) as exc:
                log.warning("state tracker attempt %d failed: %s", attempt + 1, exc)
    return rule_based_tracker(question, history, known)


# ---------------------------------------------------------------------------
# Decision


def render_hints(atoms: Sequence[SgaAtom]) -> str:
    """Numbered hint list: state, goal, required slots and action template per atom."""
    if not atoms:
        return NO_EXPERIENCE
    lines = []
    for i, a in enumerate(atoms, 1):
        action = json.dumps(dict(a.action_template), sort_keys=True, ensure_ascii=False)
        lines.append(
            f"{i}. [{a.sga_id}] state: {a.state_description} | goal: {a.goal} "
            f"| required_slots: {json.dumps(sorted(a.required_slots))} | action: {action}"
        )
    return "\n" + "\n".join(lines)


def decision_context(question: str, history, known: KnownInfo, goal: str) -> str:
    ctx = {
        "question": question,
        "current_goal": goal,
        "known": known.to_dict(),
        "history": json.loads(_history_json(history)),
    }
    return (json.dumps(ctx, ensure_ascii=False)
            + "\nCall exactly one tool, or reply with <answer>...</answer> once the question is answered.")


def _action_of(resp: ChatResponse) -> AgentAction | None:
    if resp.tool_calls:
        return resp.tool_calls[0]
    if "<answer>" in resp.content.lower():
        return FinalAnswer(extract_answer(resp.content))
    return None


def check_action(action: AgentAction | None, history) -> None:
    """Raise ConstraintViolation if ``action`` breaks a decision-maker rule."""
    if action is None:
        raise ConstraintViolation("ACTION_MANDATORY", "reply had neither a tool call nor an <answer> block")
    if not isinstance(action, ToolCall):
        return
    key = canonical_call(action)
    calls = [(canonical_call(a), o) for a, o in history if isinstance(a, ToolCall)]
    if calls and calls[-1][0] == key and calls[-1][1].status == "error":
        raise ConstraintViolation("ERROR_RECOVERY", f"retried the failed call {key}")
    if any(k == key for k, _ in calls):
        raise ConstraintViolation("NO_HISTORY_DUPLICATES", f"repeated call {key}")


def decide(question: str, history, retrieved_atoms: Sequence[SgaAtom], tools: Sequence[ToolSchema],
           backend: ChatBackend, *, known: KnownInfo = KnownInfo(), goal: str = "",
           sampling: Sampling = Sampling(), usage: Usage | None = None) -> AgentAction:
    """One action from the decision maker, with a single re-prompt on a rule violation."""
    if not tools:
        raise ValueError("decide needs at least one tool")
    usage = usage if usage is not None else Usage()
    messages = render_prompt("decision_maker", {
        "question": question,
        "experiences_text": render_hints(retrieved_atoms),
    })
    messages.append({"role": "user", "content": decision_context(question, history, known, goal)})
    for attempt in range(2):
        resp = backend.complete(ChatRequest.build(messages, list(tools), sampling=sampling))
        usage.add(resp)
        action = _action_of(resp)
        try:
            check_action(action, history)
            assert action is not None
            return action
        except ConstraintViolation as exc:
            if attempt:
                raise
            usage.extra_calls += 1
            log.info("re-prompting after %s", exc.rule)
            messages.append({"role": "assistant", "content": resp.content or json.dumps(resp.to_dict())})
            messages.append({"role": "user", "content": f"Constraint violated: {exc}. Choose a different action."})
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Episode


def run_episode(task: Task, env: ToolEnvironment, store: ExperienceStore | None, backend: ChatBackend,
                embedder: Embedder, *, k: int = 3, max_steps: int = DEFAULT_MAX_STEPS,
                sampling: Sampling = Sampling(), label: str = "") -> EpisodeResult:
    """track_state -> retrieve -> decide -> execute, until an answer, the step cap or an unrecoverable error."""
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    env.reset(task)
    tools = env.list_tools()
    usage = Usage()
    known = task.initial_known
    history: list = []
    steps: list[TrajectoryStep] = []
    retrieved: list[list[str]] = []
    violations: list[str] = []
    answer: str | None = None
    error: str | None = None
    goal = ""
    for _ in range(max_steps):
        planner, known = track_state(task.question, history, known, backend, sampling, usage)
        goal = planner.next_goal
        hints: list[SgaAtom] = []
        if store is not None and len(store):
            query = RetrievalQuery.build(f"{planner.state_summary} || {goal}", embedder, planner.available_slots)
            try:
                hints = [a for a, _ in store.retrieve(query, k)]
            except EmptyStore:
                hints = []
        retrieved.append([a.sga_id for a in hints])
        state = StructuredState(tuple(history), known, goal, task.question)
        try:
            action = decide(task.question, history, hints, tools, backend, known=known, goal=goal,
                            sampling=sampling, usage=usage)
        except ConstraintViolation as exc:
            violations.append(exc.rule)
            error = str(exc)
            break
        except BackendError as exc:
            error = f"backend: {exc}"
            break
        if isinstance(action, FinalAnswer):
            obs = Observation.ok("")
            steps.append(TrajectoryStep(state, action, obs))
            history.append((action, obs))
            answer = action.text
            break
        obs = env.execute(action) if isinstance(action, ToolCall) else Observation.ok("")
        steps.append(TrajectoryStep(state, action, obs))
        history.append((action, obs))
    success = False
    if answer is not None:
        try:
            success = bool(env.verify(answer, task))
        except NotImplementedError:
            success = False
    traj = Trajectory(task.task_id, tuple(steps), success, answer)
    return EpisodeResult(
        trajectory=traj,
        success=success,
        llm_calls=usage.calls,
        prompt_tokens=usage.prompt_tokens,
        completion_tokens=usage.completion_tokens,
        retrieved=retrieved,
        reprompts=usage.extra_calls,
        violations=violations,
        error=error,
        label=label,
    )
