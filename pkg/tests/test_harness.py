from __future__ import annotations

import http.server
import json
import threading

import pytest

from geofact.benchmark import GenerationConfig, abstain_benchmark, generate_benchmark
from geofact.errors import GeofactError
from geofact.harness import (
    INSTRUCTION_VIOLATION,
    ApiError,
    AlwaysAbstainEndpoint,
    EvalRecord,
    HarnessBugError,
    HttpChatEndpoint,
    ModelEndpoint,
    OracleEndpoint,
    TransportError,
    UniformRandomEndpoint,
    ViolatorEndpoint,
    chat_complete,
    classify_outcome,
    extract_choice,
    load_run,
    mock_endpoint,
    render_prompt,
    run_eval,
)


@pytest.fixture(scope="module")
def bench(mini_city):
    return generate_benchmark(mini_city, GenerationConfig.uniform(4, seed=21))


# ---------------------------------------------------------------------------
# prompt rendering


def test_render_prompt_three_options(bench):
    item = bench[0]
    messages = render_prompt(item)
    assert len(messages) == 1
    content = messages[0]["content"]
    lines = content.splitlines()
    assert lines[0] == "Here is a multiple-choice question:"
    assert lines[1] == item.question
    for (label, text), line in zip(item.options, lines[2:5]):
        assert line == f"{label}. {text}"
    assert lines[-1] == "Please select from A, B, C. Output your answer directly"


def test_render_prompt_abstain_variant_enumerates_four_labels(bench):
    item = abstain_benchmark([bench[0]])[0]
    content = render_prompt(item)[0]["content"]
    assert "Please select from A, B, C, D. Output your answer directly" in content


def test_render_prompt_is_pure(bench):
    assert render_prompt(bench[3]) == render_prompt(bench[3])


def test_render_prompt_optional_system_message(bench):
    messages = render_prompt(bench[0], system_message="answer carefully")
    assert messages[0] == {"role": "system", "content": "answer carefully"}
    assert messages[1]["role"] == "user"


# ---------------------------------------------------------------------------
# choice extraction


@pytest.mark.parametrize(
    "raw,expected",
    [
        ("B", "B"),
        ("B.", "B"),
        ("(B)", "B"),
        ("Answer: B", "B"),
        ("The answer is C.", "C"),
        ("A. Silver Spoon Cafe", "A"),
        ("I think both are plausible", INSTRUCTION_VIOLATION),
        ("", INSTRUCTION_VIOLATION),
        ("b.", INSTRUCTION_VIOLATION),  # case-sensitive
        ("ABC", INSTRUCTION_VIOLATION),  # flanked by alphanumerics
        ("CAB", INSTRUCTION_VIOLATION),
        ("idk, B maybe? or C", "B"),  # first standalone label wins
    ],
)
def test_extract_choice(raw, expected):
    assert extract_choice(raw, ("A", "B", "C")) == expected


def test_extract_choice_respects_allowed_labels():
    assert extract_choice("D", ("A", "B", "C")) == INSTRUCTION_VIOLATION
    assert extract_choice("D", ("A", "B", "C", "D")) == "D"


# ---------------------------------------------------------------------------
# outcome classification


def test_classify_outcome_maps_labels(bench):
    item = bench[0]
    for label in item.labels():
        assert classify_outcome(item, label) == item.option_types[label]
    assert classify_outcome(item, INSTRUCTION_VIOLATION) == INSTRUCTION_VIOLATION


def test_classify_outcome_figure_style_item():
    from geofact.benchmark import assemble_item, TaskKind

    # option order pinned by seed search: fabricated/factual/none -> A/B/C
    for seed in range(50):
        item = assemble_item(
            TaskKind.POI_EXISTENCE,
            {"factual_text": "Haidian Library", "fact_key": "PoiExistence|p1"},
            ["Silver Spoon Cafe"],
            seed,
            item_id=f"beijing-PoiExistence-{seed:04d}",
            city="Beijing",
        )
        if item.option_text("A") == "Silver Spoon Cafe" and item.option_text("B") == "Haidian Library":
            assert classify_outcome(item, "A") == "EntityFabrication"
            assert classify_outcome(item, "B") == "Factual"
            assert classify_outcome(item, "C") == "EntityOmission"
            return
    pytest.fail("no seed produced the canonical option order")


def test_classify_outcome_unknown_label_is_harness_bug(bench):
    with pytest.raises(HarnessBugError):
        classify_outcome(bench[0], "E")


# ---------------------------------------------------------------------------
# HTTP client


class _ChatHandler(http.server.BaseHTTPRequestHandler):
    responses: list[tuple[int, dict | str]] = []
    bodies: list[dict] = []
    auth_headers: list[str | None] = []

    def do_POST(self):
        n = int(self.headers.get("Content-Length", 0))
        type(self).bodies.append(json.loads(self.rfile.read(n)))
        type(self).auth_headers.append(self.headers.get("Authorization"))
        status, payload = self.responses[min(len(self.bodies) - 1, len(self.responses) - 1)]
        body = json.dumps(payload) if isinstance(payload, dict) else payload
        data = body.encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def chat_server():
    _ChatHandler.responses = [(200, {"choices": [{"message": {"content": "B"}}]})]
    _ChatHandler.bodies = []
    _ChatHandler.auth_headers = []
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _ChatHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def _endpoint(base_url, **kw):
    defaults = dict(model_name="test-model", max_retries=3, retry_backoff_s=0.01, timeout_s=5.0)
    defaults.update(kw)
    return ModelEndpoint(base_url=base_url, **defaults)


def test_chat_complete_sends_temperature_zero_and_bearer_auth(chat_server):
    endpoint = _endpoint(chat_server, auth_token="sk-test")
    messages = [{"role": "user", "content": "pick one"}]
    assert chat_complete(endpoint, messages) == "B"
    body = _ChatHandler.bodies[0]
    assert body["temperature"] == 0
    assert body["model"] == "test-model"
    assert body["messages"] == messages
    assert _ChatHandler.auth_headers[0] == "Bearer sk-test"


def test_chat_complete_no_auth_header_without_token(chat_server):
    chat_complete(_endpoint(chat_server), [{"role": "user", "content": "x"}])
    assert _ChatHandler.auth_headers[0] is None


def test_chat_complete_client_error_raises_api_error(chat_server):
    _ChatHandler.responses = [(400, {"error": "bad request"})]
    with pytest.raises(ApiError) as err:
        chat_complete(_endpoint(chat_server), [{"role": "user", "content": "x"}])
    assert err.value.status == 400
    assert "bad request" in err.value.body
    assert len(_ChatHandler.bodies) == 1  # no retry on a plain 4xx


def test_chat_complete_retries_5xx_then_succeeds(chat_server):
    _ChatHandler.responses = [
        (500, {"error": "flaky"}),
        (200, {"choices": [{"message": {"content": "A"}}]}),
    ]
    assert chat_complete(_endpoint(chat_server), [{"role": "user", "content": "x"}]) == "A"
    assert len(_ChatHandler.bodies) == 2


def test_chat_complete_exhausts_retries_on_5xx(chat_server):
    _ChatHandler.responses = [(503, {"error": "down"})]
    with pytest.raises(ApiError) as err:
        chat_complete(_endpoint(chat_server, max_retries=3), [{"role": "user", "content": "x"}])
    assert err.value.status == 503
    assert len(_ChatHandler.bodies) == 3


def test_chat_complete_unreachable_endpoint_is_transport_error():
    endpoint = _endpoint("http://127.0.0.1:9", max_retries=2)
    with pytest.raises(TransportError, match="2 attempts"):
        chat_complete(endpoint, [{"role": "user", "content": "x"}])


def test_endpoint_requires_positive_concurrency():
    with pytest.raises(GeofactError):
        ModelEndpoint(base_url="http://x", model_name="m", max_concurrency=0)


# ---------------------------------------------------------------------------
# mocks


def test_oracle_mock_answers_the_key(bench):
    oracle = OracleEndpoint(bench)
    for item in bench[:10]:
        assert oracle.complete(render_prompt(item)) == item.answer_label


def test_violator_mock_has_no_label(bench):
    violator = ViolatorEndpoint()
    raw = violator.complete(render_prompt(bench[0]))
    assert extract_choice(raw, bench[0].labels()) == INSTRUCTION_VIOLATION


def test_abstain_mock_prefers_abstain_label(bench):
    abstain_items = abstain_benchmark(bench)
    endpoint = AlwaysAbstainEndpoint(abstain_items)
    for item in abstain_items[:5]:
        assert endpoint.complete(render_prompt(item)) == item.options[-1][0]
    plain = AlwaysAbstainEndpoint(bench, fallback="B")
    assert plain.complete(render_prompt(bench[0])) == "B"


def test_uniform_random_mock_is_deterministic_per_item(bench):
    a = UniformRandomEndpoint(seed=3)
    b = UniformRandomEndpoint(seed=3)
    picks_a = [a.complete(render_prompt(item)) for item in bench]
    picks_b = [b.complete(render_prompt(item)) for item in bench]
    assert picks_a == picks_b
    assert set(picks_a) <= {"A", "B", "C"}
    c = UniformRandomEndpoint(seed=4)
    assert picks_a != [c.complete(render_prompt(item)) for item in bench]


def test_mock_endpoint_factory(bench):
    assert mock_endpoint("oracle", items=bench).complete(render_prompt(bench[0])) == bench[0].answer_label
    assert mock_endpoint("fixed", items=bench, mapping={bench[0].item_id: "C"}).complete(
        render_prompt(bench[0])
    ) == "C"
    with pytest.raises(GeofactError):
        mock_endpoint("nope")


# ---------------------------------------------------------------------------
# run loop


def test_run_eval_oracle_all_factual(tmp_path, bench):
    records = run_eval(OracleEndpoint(bench), bench, tmp_path / "run.jsonl")
    assert len(records) == len(bench)
    assert all(r.outcome == "Factual" for r in records)
    loaded, manifest = load_run(tmp_path / "run.jsonl")
    assert [r.item_id for r in loaded] == [i.item_id for i in bench]
    assert manifest["format"] == "geohalurun"
    assert manifest["endpoint"] == {"kind": "oracle"}


def test_run_eval_seeded_random_twice_is_identical(tmp_path, bench):
    r1 = run_eval(UniformRandomEndpoint(seed=5), bench, tmp_path / "a.jsonl")
    r2 = run_eval(UniformRandomEndpoint(seed=5), bench, tmp_path / "b.jsonl")
    assert r1 == r2
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_run_eval_records_satisfy_option_typing(tmp_path, bench):
    records = run_eval(UniformRandomEndpoint(seed=8), bench, tmp_path / "run.jsonl")
    by_id = {item.item_id: item for item in bench}
    for record in records:
        item = by_id[record.item_id]
        if record.extracted == INSTRUCTION_VIOLATION:
            assert record.outcome == INSTRUCTION_VIOLATION
        else:
            assert record.outcome == item.option_types[record.extracted]


class _FlakyEndpoint:
    """Evaluates fine for `ok` calls, then blows up."""

    deterministic = True

    def __init__(self, inner, ok: int):
        self.inner = inner
        self.remaining = ok

    def describe(self):
        return {"kind": "flaky"}

    def complete(self, messages):
        if self.remaining <= 0:
            raise TransportError("simulated mid-run crash")
        self.remaining -= 1
        return self.inner.complete(messages)


@pytest.mark.parametrize("cut", [0, 1, 7, 25])
def test_run_eval_kill_and_resume_gives_one_record_per_item(tmp_path, bench, cut):
    path = tmp_path / "run.jsonl"
    oracle = OracleEndpoint(bench)
    with pytest.raises(TransportError):
        run_eval(_FlakyEndpoint(oracle, cut), bench, path)
    resumed = run_eval(oracle, bench, path)
    assert len(resumed) == len(bench) - cut
    records, _ = load_run(path)
    assert sorted(r.item_id for r in records) == sorted(i.item_id for i in bench)
    assert len({r.item_id for r in records}) == len(bench)


def test_run_eval_resume_is_a_noop_when_complete(tmp_path, bench):
    path = tmp_path / "run.jsonl"
    run_eval(OracleEndpoint(bench), bench, path)
    before = path.read_bytes()
    again = run_eval(OracleEndpoint(bench), bench, path)
    assert again == []
    assert path.read_bytes() == before


def test_run_eval_rejects_run_file_for_other_benchmark(tmp_path, bench):
    path = tmp_path / "run.jsonl"
    run_eval(OracleEndpoint(bench[:5]), bench[:5], path)
    with pytest.raises(GeofactError, match="different benchmark"):
        run_eval(OracleEndpoint(bench), bench, path)


def test_run_eval_concurrent_matches_serial(tmp_path, bench):
    serial = run_eval(OracleEndpoint(bench), bench, tmp_path / "s.jsonl", max_concurrency=1)
    parallel = run_eval(OracleEndpoint(bench), bench, tmp_path / "p.jsonl", max_concurrency=8)
    assert serial == parallel
    assert (tmp_path / "s.jsonl").read_bytes() == (tmp_path / "p.jsonl").read_bytes()


def test_http_endpoint_through_run_eval(chat_server, tmp_path, bench):
    # the canned server always answers "B"; outcomes follow each item's map
    _ChatHandler.responses = [(200, {"choices": [{"message": {"content": "B"}}]})]
    endpoint = HttpChatEndpoint(_endpoint(chat_server))
    records = run_eval(endpoint, bench[:6], tmp_path / "run.jsonl")
    by_id = {item.item_id: item for item in bench}
    assert all(r.extracted == "B" for r in records)
    assert all(r.outcome == by_id[r.item_id].option_types["B"] for r in records)
    assert all(r.latency_ms > 0 for r in records)
