from __future__ import annotations

import json

import httpx
import pytest
from hypothesis import given, strategies as st

from sga.core import FinalAnswer, Observation, StructuredState, ToolCall, Trajectory, TrajectoryStep
from sga.llm.backends import (
    BackendError, ChatRequest, ChatResponse, CountingBackend, MalformedResponse, MockBackend, MockRule,
    RateLimited, RemoteBackend, Sampling, Timeout, count_tokens, request_digest,
)
from sga.llm.critic import GroundingVerdict, judge_grounding, rule_based_verdict
from sga.llm.mock_agents import critic_handler
from sga.llm.prompts import TEMPLATES, UnboundVariable, render_prompt, template_variables

MSG = [{"role": "user", "content": "hello there"}]


# -- prompts ---------------------------------------------------------------

def test_template_markers():
    assert "You are the **SGA Extractor**" in TEMPLATES["sga_extractor"]
    assert "Messages Evaluation Expert" in TEMPLATES["grounding_critic"]
    assert "decide which tool to call" in TEMPLATES["decision_maker"]
    assert "SGA Retriever Planner" in TEMPLATES["retriever_planner"]


def test_decision_maker_renders_constraints():
    (msg,) = render_prompt("decision_maker", {"question": "q", "experiences_text": "none"})
    assert msg["role"] == "system" and "ACTION_MANDATORY" in msg["content"]


def test_unbound_variable():
    with pytest.raises(UnboundVariable) as err:
        render_prompt("decision_maker", {"question": "q"})
    assert err.value.names == ["experiences_text"]


def test_render_is_byte_stable():
    b = {"question": "q", "history_str": "[]", "current_known": "{}"}
    assert render_prompt("retriever_planner", b) == render_prompt("retriever_planner", b)


@given(st.dictionaries(st.sampled_from(["question", "experiences_text"]), st.text(max_size=20), min_size=2))
def test_render_never_leaves_slot_markers(bindings):
    for tid in TEMPLATES:
        needed = {v: bindings.get(v, "{{x}}") for v in template_variables(tid)}
        assert "{{" not in render_prompt(tid, needed)[0]["content"]


# -- mock backend ------------------------------------------------------------

def test_mock_digest_rule_is_deterministic():
    req = ChatRequest.build(MSG)
    call = ToolCall.of("f", {"x": "1"})
    backend = MockBackend([MockRule(ChatResponse("", (call,)), digest=request_digest(req))])
    a, b = backend.complete(req), backend.complete(req)
    assert a == b and a.tool_calls == (call,)
    assert a.prompt_tokens == 2


def test_mock_precedence_and_errors():
    handler = lambda req: ChatResponse("from handler")  # noqa: E731
    backend = MockBackend([MockRule(ChatResponse("from rule"), contains="special")], [handler], ChatResponse("d"))
    assert backend.complete(ChatRequest.build([{"role": "user", "content": "special"}])).content == "from rule"
    assert backend.complete(ChatRequest.build(MSG)).content == "from handler"
    with pytest.raises(BackendError):
        MockBackend().complete(ChatRequest.build(MSG))
    with pytest.raises(ValueError):
        MockBackend(default=ChatResponse("x")).complete(ChatRequest.build([]))


def test_mock_rules_from_json(tmp_path):
    path = tmp_path / "rules.json"
    path.write_text(json.dumps([{"contains": "hello", "response": {"content": "hi",
                                                                   "tool_calls": [{"name": "f", "arguments": {}}]}}]))
    resp = MockBackend.from_json(path).complete(ChatRequest.build(MSG))
    assert resp.content == "hi" and resp.tool_calls == (ToolCall.of("f"),)


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest.build([{"role": "robot", "content": "x"}])
    with pytest.raises(ValueError):
        Sampling(temperature=-0.1)


def test_counting_backend_sums_tokens():
    inner = MockBackend(default=ChatResponse("one two three"))
    counter = CountingBackend(inner)
    for _ in range(3):
        counter.complete(ChatRequest.build(MSG))
    assert counter.calls == 3 and counter.prompt_tokens == 6 and counter.completion_tokens == 9
    assert count_tokens("  a  b\nc ") == 3


# -- remote backend over a fake transport --------------------------------------

def _completion(message: dict, usage=(11, 4)) -> dict:
    return {"choices": [{"message": message}], "usage": {"prompt_tokens": usage[0], "completion_tokens": usage[1]}}


def _remote(handler, **kw) -> RemoteBackend:
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return RemoteBackend("http://llm.test/v1", "m", "key", client=client, sleep=lambda s: None, **kw)


def test_remote_request_body_and_tool_call_parsing():
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["url"] = str(request.url)
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json=_completion({"content": None, "tool_calls": [
            {"id": "c1", "type": "function", "function": {"name": "f", "arguments": '{"x": "1"}'}}]}))

    from sga.core import ToolParameter, ToolSchema
    tool = ToolSchema("f", "F.", (ToolParameter("x", "x"),))
    resp = _remote(handler).complete(ChatRequest.build(MSG, [tool], extra={"enable_thinking": False}))
    assert seen["url"] == "http://llm.test/v1/chat/completions" and seen["auth"] == "Bearer key"
    body = seen["body"]
    assert body["temperature"] == 0.6 and body["top_p"] == 0.95 and body["top_k"] == 20 and body["min_p"] == 0.0
    assert body["tools"][0]["function"]["name"] == "f" and body["enable_thinking"] is False
    assert resp.tool_calls == (ToolCall.of("f", {"x": "1"}),)
    assert (resp.prompt_tokens, resp.completion_tokens) == (11, 4)


def test_remote_retries_then_succeeds():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            return httpx.Response(429, text="slow down")
        if len(calls) == 2:
            raise httpx.ReadTimeout("timeout", request=request)
        return httpx.Response(200, json=_completion({"content": "<answer>x</answer>"}))

    slept = []
    client = httpx.Client(transport=httpx.MockTransport(handler))
    backend = RemoteBackend("http://llm.test", "m", client=client, sleep=slept.append)
    assert backend.complete(ChatRequest.build(MSG)).content == "<answer>x</answer>"
    assert slept == [1.0, 2.0]


def test_remote_error_kinds():
    with pytest.raises(RateLimited):
        _remote(lambda r: httpx.Response(429)).complete(ChatRequest.build(MSG))

    def timeout(request):
        raise httpx.ConnectTimeout("t", request=request)

    with pytest.raises(Timeout):
        _remote(timeout).complete(ChatRequest.build(MSG))
    with pytest.raises(MalformedResponse):
        _remote(lambda r: httpx.Response(200, json={"nope": 1})).complete(ChatRequest.build(MSG))
    with pytest.raises(MalformedResponse):
        _remote(lambda r: httpx.Response(200, text="not json")).complete(ChatRequest.build(MSG))
    with pytest.raises(BackendError):
        _remote(lambda r: httpx.Response(400, text="bad")).complete(ChatRequest.build(MSG))


def test_remote_from_env(monkeypatch):
    monkeypatch.delenv("SGA_API_BASE", raising=False)
    with pytest.raises(BackendError):
        RemoteBackend.from_env()
    monkeypatch.setenv("SGA_API_BASE", "http://x")
    monkeypatch.setenv("SGA_MODEL", "m")
    assert RemoteBackend.from_env().model == "m"


# -- grounding critic ----------------------------------------------------------

def _trace(obs: Observation, answer: str) -> Trajectory:
    s = StructuredState(global_goal="What is the temperature?")
    steps = (TrajectoryStep(s, ToolCall.of("get_weather", {"city": "Paris"}), obs),
             TrajectoryStep(s, FinalAnswer(answer), Observation.ok("")))
    return Trajectory("t", steps, True, answer)


SCENARIO_A = _trace(Observation.ok('{"temp": "15C"}'), "15C")
SCENARIO_B = _trace(Observation.ok('{"temp": "15C"}'), "30")
SCENARIO_C = _trace(Observation.error("not_found", "Error"), "The user is John Doe")


def test_rule_based_scenarios():
    a, b, c = (rule_based_verdict(t) for t in (SCENARIO_A, SCENARIO_B, SCENARIO_C))
    assert a.grounded and a.score == 1.0
    assert not b.grounded and b.solved
    assert not c.grounded and c.score == 0.0 and "severe" in c.rationale


def test_llm_critic_path_matches_rules():
    backend = MockBackend(handlers=[critic_handler])
    assert [judge_grounding(t, backend).grounded for t in (SCENARIO_A, SCENARIO_B, SCENARIO_C)] == [True, False, False]


def test_critic_backend_error_degrades():
    v = judge_grounding(SCENARIO_A, MockBackend())
    assert v == GroundingVerdict(True, False, 0.0, v.rationale)


def test_verdict_invariant():
    with pytest.raises(ValueError):
        GroundingVerdict(False, True, 1.0)
