import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import pytest

from hoitag.judge import (
    RUBRIC_PROMPT,
    JudgeClient,
    JudgeConfig,
    JudgeConfigError,
    JudgeNetworkError,
    JudgeParseError,
    judge_scores,
    parse_judge_response,
)


class StubJudge:
    """Local HTTP server replying from a scripted list (last reply repeats)."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                stub.requests.append((body, dict(self.headers)))
                status, content = stub.next_reply(body)
                payload = json.dumps({"choices": [{"message": {"role": "assistant", "content": content}}]})
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.end_headers()
                self.wfile.write(payload.encode())

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.lock = threading.Lock()
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def next_reply(self, body):
        with self.lock:
            reply = self.replies.pop(0) if len(self.replies) > 1 else self.replies[0]
        if callable(reply):
            return reply(body)
        return reply if isinstance(reply, tuple) else (200, reply)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server.server_address[1]}/v1/chat/completions"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def _config(url, **kw):
    kw.setdefault("backoff_base", 0.0)
    return JudgeConfig(url, "judge-model", api_key="k", **kw)


def test_parse_formats():
    assert parse_judge_response("CoI: 5\nBMA: 6\nTDO: 7") == (5, 6, 7)
    assert parse_judge_response("Scores\n coi : 10\nBMA:1\n tdo: 3 \n") == (10, 1, 3)
    with pytest.raises(JudgeParseError):
        parse_judge_response("CoI: 5\nBMA: 5")
    with pytest.raises(JudgeParseError):
        parse_judge_response("CoI: 11\nBMA: 5\nTDO: 5")


def test_stub_round_trip_and_wire_format():
    with StubJudge(["CoI: 5\nBMA: 5\nTDO: 5"]) as stub:
        client = JudgeClient(_config(stub.url))
        score = client.score("Entities: person, gun", "The person shoot the gun.")
        client.close()
    assert (score.coi, score.bma, score.tdo) == (5, 5, 5)
    assert score.judge_id == "judge-model"
    body, headers = stub.requests[0]
    assert body["model"] == "judge-model"
    assert [m["role"] for m in body["messages"]] == ["system", "user"]
    assert body["messages"][0]["content"] == RUBRIC_PROMPT
    assert "The person shoot the gun." in body["messages"][1]["content"]
    assert headers["Authorization"] == "Bearer k"


def test_malformed_reply_is_retried():
    with StubJudge(["no scores here", "CoI: 3\nBMA: 4\nTDO: 5"]) as stub:
        client = JudgeClient(_config(stub.url))
        assert (client.score("s", "c").tdo) == 5
        client.close()
    assert len(stub.requests) == 2


def test_missing_field_fails_after_retries():
    with StubJudge(["CoI: 5\nBMA: 5"]) as stub:
        client = JudgeClient(_config(stub.url))
        with pytest.raises(JudgeParseError):
            client.score("s", "c")
        client.close()
    assert len(stub.requests) == 4  # first try + 3 retries


def test_server_errors_back_off_then_succeed():
    sleeps = []
    with StubJudge([(503, ""), (500, ""), "CoI: 9\nBMA: 9\nTDO: 9"]) as stub:
        client = JudgeClient(_config(stub.url, backoff_base=0.5, backoff_max=0.75), sleep=sleeps.append)
        assert client.score("s", "c").coi == 9
        client.close()
    assert sleeps == [0.5, 0.75]


def test_network_failure_is_bounded():
    with StubJudge([(503, "")]) as stub:
        client = JudgeClient(_config(stub.url, max_network_retries=2), sleep=lambda s: None)
        with pytest.raises(JudgeNetworkError):
            client.score("s", "c")
        client.close()
    assert len(stub.requests) == 3


def test_client_errors_not_retried():
    with StubJudge([(400, "")]) as stub:
        client = JudgeClient(_config(stub.url), sleep=lambda s: None)
        with pytest.raises(JudgeNetworkError):
            client.score("s", "c")
        client.close()
    assert len(stub.requests) == 1


def test_self_preference_guard_blocks_before_any_request():
    with StubJudge(["CoI: 5\nBMA: 5\nTDO: 5"]) as stub:
        cfg = _config(stub.url, generator_ids=("judge-model",))
        with pytest.raises(JudgeConfigError):
            judge_scores([("s", "c")], cfg)
    assert stub.requests == []


def test_concurrent_results_keep_input_order():
    def echo(body):
        n = int(body["messages"][1]["content"].rsplit(" ", 1)[-1])
        return 200, f"CoI: {n}\nBMA: {n}\nTDO: {n}"

    with StubJudge([echo]) as stub:
        items = [("scene", f"caption {n}") for n in range(1, 11)]
        scores = judge_scores(items, _config(stub.url, max_concurrency=4))
    assert [s.coi for s in scores] == list(range(1, 11))


def test_from_env(monkeypatch):
    monkeypatch.delenv("JUDGE_ENDPOINT", raising=False)
    with pytest.raises(JudgeConfigError):
        JudgeConfig.from_env()
    monkeypatch.setenv("JUDGE_ENDPOINT", "http://x")
    monkeypatch.setenv("JUDGE_MODEL_ID", "m")
    monkeypatch.setenv("JUDGE_API_KEY", "secret")
    cfg = JudgeConfig.from_env(("g",))
    assert (cfg.endpoint, cfg.model_id, cfg.api_key, cfg.generator_ids) == ("http://x", "m", "secret", ("g",))


def test_transport_error_wrapped():
    def boom(request):
        raise httpx.ConnectError("refused", request=request)

    client = httpx.Client(transport=httpx.MockTransport(boom))
    judge = JudgeClient(_config("http://judge.invalid", max_network_retries=1), client=client, sleep=lambda s: None)
    with pytest.raises(JudgeNetworkError):
        judge.score("s", "c")
