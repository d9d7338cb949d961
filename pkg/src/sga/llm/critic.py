"""Grounding critic: is the final answer derived from tool results?"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass

from ..core import FinalAnswer, ToolCall, Trajectory
from ..env import extract_answer
from .backends import BackendError, ChatBackend, ChatRequest, parse_json_content
from .prompts import render_prompt

log = logging.getLogger(__name__)

VERDICT_FORMAT = (
    "Respond with a JSON object with keys: solved (bool), grounded (bool), "
    "score (number in [0, 1]) and rationale (string)."
)


@dataclass(frozen=True)
class GroundingVerdict:
    solved: bool
    grounded: bool
    score: float
    rationale: str = ""

    def __post_init__(self) -> None:
        if self.grounded and not self.solved:
            raise ValueError("grounded verdicts must be solved")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")


def _leaves(value) -> list[str]:
    if isinstance(value, dict):
        return [leaf for v in value.values() for leaf in _leaves(v)]
    if isinstance(value, list):
        return [leaf for v in value for leaf in _leaves(v)]
    if value is None or isinstance(value, bool):
        return []
    return [str(value).strip()]


def tool_evidence(trace: Trajectory) -> list[str]:
    """Values a grounded answer may be built from: JSON leaves or raw text of ok tool results."""
    out = []
    for step in trace.steps:
        if not isinstance(step.action, ToolCall) or step.observation.status != "ok":
            continue
        try:
            out.extend(_leaves(json.loads(step.observation.payload)))
        except (json.JSONDecodeError, TypeError):
            out.append(step.observation.payload.strip())
    return [e for e in out if e]


def _final_text(trace: Trajectory) -> str | None:
    if trace.final_answer is not None:
        return trace.final_answer
    if trace.steps and isinstance(trace.steps[-1].action, FinalAnswer):
        return trace.steps[-1].action.text
    return None


def _mentions(answer: str, evidence: str) -> bool:
    return re.search(rf"(?<![A-Za-z0-9]){re.escape(evidence)}(?![A-Za-z0-9])", answer) is not None


def rule_based_verdict(trace: Trajectory) -> GroundingVerdict:
    final = _final_text(trace)
    if final is None:
        return GroundingVerdict(False, False, 0.0, "no final answer")
    answer = extract_answer(final)
    evidence = tool_evidence(trace)
    if not evidence:
        return GroundingVerdict(True, False, 0.0, "severe hallucination: no successful tool result supports the answer")
    if answer and any(_mentions(answer, e) for e in evidence):
        return GroundingVerdict(True, True, 1.0, "answer is traceable to tool results")
    return GroundingVerdict(True, False, 0.2, "answer is not directly from tool results")


def render_trace(trace: Trajectory) -> str:
    lines = []
    for step in trace.steps:
        a, o = step.action, step.observation
        if isinstance(a, ToolCall):
            lines.append(f"AI: call {a.tool_name} {json.dumps(a.args, sort_keys=True)}")
            lines.append(f"Tool: result {o.payload if o.status == 'ok' else 'Error: ' + (o.error_kind or '')}")
        elif isinstance(a, FinalAnswer):
            lines.append(f"AI: {a.text}")
    final = _final_text(trace)
    if final is not None and not (trace.steps and isinstance(trace.steps[-1].action, FinalAnswer)):
        lines.append(f"AI: {final}")
    return "\n".join(lines)


def judge_grounding(trace: Trajectory, backend: ChatBackend | None = None) -> GroundingVerdict:
    """Judge a trace; rule-based without a backend, LLM critic otherwise."""
    if backend is None:
        return rule_based_verdict(trace)
    messages = render_prompt("grounding_critic", {"format_prompt": VERDICT_FORMAT})
    messages.append({"role": "user", "content": render_trace(trace)})
    try:
        data = parse_json_content(backend.complete(ChatRequest.build(messages)).content)
        solved = bool(data["solved"])
        grounded = bool(data["grounded"]) and solved
        score = min(1.0, max(0.0, float(data.get("score", 1.0 if grounded else 0.0))))
        return GroundingVerdict(solved, grounded, score, str(data.get("rationale", "")))
    except (BackendError, KeyError, TypeError, ValueError) as exc:
        log.warning("grounding critic failed: %s", exc)
        return GroundingVerdict(_final_text(trace) is not None, False, 0.0, f"critic unavailable: {exc}")
