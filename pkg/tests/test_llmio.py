import json
import threading
import time

import httpx
import pytest

from llmser.llmio import (
    ChatCompletionsBackend,
    FirstKBackend,
    LLMClient,
    LLMConfig,
    LLMTransportError,
    ResponseCache,
    cache_key,
    extract_indices,
    match_titles,
    mock_first_k,
    mock_oracle,
    parse_selection,
    read_prompt,
    with_retries,
)
from llmser.sia import CandidatePool, build_sia_prompt

FAST = LLMConfig(backoff_base=0.0)


class Flaky:
    def __init__(self, failures, reply="[1]"):
        self.failures = failures
        self.calls = 0
        self.reply = reply

    def __call__(self, prompt):
        self.calls += 1
        if self.calls <= self.failures:
            raise LLMTransportError("boom")
        return self.reply


def test_second_identical_call_hits_cache():
    backend = Flaky(0, "hello")
    client = LLMClient(FAST, backend)
    assert client.complete("p") == "hello"
    assert client.complete("p") == "hello"
    assert backend.calls == 1 and client.remote_calls == 1 and client.cache_hits == 1


def test_two_failures_then_success_records_three_attempts():
    backend = Flaky(2)
    client = LLMClient(LLMConfig(max_retries=3, backoff_base=0.0), backend)
    assert client.complete("p") == "[1]"
    assert client.last_attempts == 3 and client.remote_calls == 3


def test_no_retries_raises_transport_error():
    client = LLMClient(LLMConfig(max_retries=0, backoff_base=0.0), Flaky(1))
    with pytest.raises(LLMTransportError) as info:
        client.complete("p")
    assert info.value.attempts == 1


def test_retry_backoff_is_exponential(monkeypatch):
    sleeps = []
    monkeypatch.setattr(time, "sleep", sleeps.append)
    flaky = Flaky(3)
    result, attempts = with_retries(lambda: flaky("p"), max_retries=3, backoff_base=0.5)
    assert attempts == 4 and sleeps == [0.5, 1.0, 2.0]


def test_non_transport_errors_are_not_retried():
    calls = []

    def bad(prompt):
        calls.append(prompt)
        raise KeyError("bug")

    with pytest.raises(KeyError):
        LLMClient(FAST, bad).complete("p")
    assert len(calls) == 1


def test_empty_prompt_rejected():
    with pytest.raises(ValueError):
        mock_first_k().complete("   ")


def test_cache_persists_and_compacts(tmp_path):
    path = tmp_path / "cache.jsonl"
    c1 = LLMClient(LLMConfig(cache_path=str(path), backoff_base=0.0), Flaky(0, "x"))
    c1.complete("a")
    c1.cache.put(cache_key(FAST.model_name, "a"), "y")  # duplicate key: last write wins
    with open(path, "a") as f:
        f.write("{not json\n")
    backend = Flaky(0, "z")
    c2 = LLMClient(LLMConfig(cache_path=str(path), backoff_base=0.0), backend)
    assert c2.complete("a") == "y" and backend.calls == 0
    assert len(path.read_text().splitlines()) == 1


def test_cache_key_depends_on_model():
    assert cache_key("m1", "p") != cache_key("m2", "p")
    assert cache_key("m1", "p") == cache_key("m1", "p")


def test_concurrency_limit_is_respected():
    active, peak = [0], [0]
    lock = threading.Lock()

    def slow(prompt):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.02)
        with lock:
            active[0] -= 1
        return "[1]"

    client = LLMClient(LLMConfig(concurrency_limit=2, backoff_base=0.0), slow)
    threads = [threading.Thread(target=client.complete, args=(f"p{i}",)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] <= 2 and client.remote_calls == 8


def test_chat_completions_wire_format(monkeypatch):
    seen = {}

    def handler(request: httpx.Request):
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": "[2, 1]"}}]})

    monkeypatch.setenv("LLMSER_API_KEY", "secret")
    cfg = LLMConfig(provider="http", endpoint_url="https://llm.test/v1/chat/completions", backoff_base=0.0)
    backend = ChatCompletionsBackend(cfg, httpx.Client(transport=httpx.MockTransport(handler)))
    assert LLMClient(cfg, backend).complete("pick two") == "[2, 1]"
    assert seen["auth"] == "Bearer secret"
    assert seen["body"] == {"model": "glm-4-flash", "messages": [{"role": "user", "content": "pick two"}],
                            "temperature": 0.0}


def test_http_errors_are_retried():
    statuses = iter([503, 500, 200])

    def handler(request):
        code = next(statuses)
        body = {"choices": [{"message": {"content": "ok"}}]} if code == 200 else {}
        return httpx.Response(code, json=body)

    cfg = LLMConfig(provider="http", endpoint_url="https://llm.test/v1", max_retries=3, backoff_base=0.0)
    client = LLMClient(cfg, ChatCompletionsBackend(cfg, httpx.Client(transport=httpx.MockTransport(handler))))
    assert client.complete("p") == "ok" and client.last_attempts == 3


def test_malformed_body_is_a_transport_error():
    cfg = LLMConfig(provider="http", endpoint_url="https://llm.test/v1", max_retries=0, backoff_base=0.0)
    http = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"oops": 1})))
    with pytest.raises(LLMTransportError):
        LLMClient(cfg, ChatCompletionsBackend(cfg, http)).complete("p")


# -- parsing -------------------------------------------------------------------


def test_parse_selection_examples():
    assert parse_selection("[3, 1]", 5, 2) == [3, 1]
    assert parse_selection("I choose items 2 and 2 and 99", 5, 2) == [2, 1]
    assert parse_selection("", 5, 3) == [1, 2, 3]
    assert parse_selection("Answer: [4]. Also item 1 looked fine.", 5, 2) == [4, 1]
    with pytest.raises(ValueError):
        parse_selection("[1]", 3, 4)


def test_extract_indices_prefers_bracketed_list():
    assert extract_indices("Among 20 candidates I pick [5, 7]", 20) == [5, 7]
    assert extract_indices("no numbers here", 5) == []


def test_match_titles():
    titles = ["Red Cotton Shirt", "Blue Denim Jacket", "Wool Socks"]
    assert match_titles("1. blue denim jacket\n2) Red cotton shirt!", titles) == [2, 1]
    assert match_titles("- wool sock", titles) == [3]
    assert match_titles("something else entirely", titles) == []


def _prompt(cands, want=2, user="u1"):
    pool = CandidatePool("u1", tuple((f"i{k}", t, k + 1) for k, t in enumerate(cands)))
    return build_sia_prompt(["seen one"], pool, want, user)


def test_read_prompt_roundtrip():
    view = read_prompt(_prompt(["alpha", "beta", "gamma"], want=2))
    assert view.kind == "select" and view.user_id == "u1" and view.want == 2
    assert view.candidates == ["alpha", "beta", "gamma"] and view.history == ["seen one"]


def test_mock_first_k():
    assert json.loads(mock_first_k().complete(_prompt(list("abcde"), want=2))) == [1, 2]


def test_mock_oracle_follows_truth():
    truth = lambda view: [1.0 if c == "d" else 0.0 for c in view.candidates]
    reply = json.loads(mock_oracle(truth).complete(_prompt(list("abcde"), want=2)))
    assert reply[0] == 4


def test_mocks_are_deterministic():
    truth = lambda view: [len(c) for c in view.candidates]
    p = _prompt(["aa", "b", "cccc", "ddd"], want=3)
    assert mock_oracle(truth).complete(p) == mock_oracle(truth).complete(p)
    assert FirstKBackend()(p) == FirstKBackend()(p)


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        LLMConfig(concurrency_limit=0)
    with pytest.raises(ValueError):
        LLMConfig(temperature=-1)
