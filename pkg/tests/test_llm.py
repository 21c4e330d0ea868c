import json

import pytest

from critgen import llm as L
from critgen.scenario import ScenarioConfig, VehicleSeed, validate_config

BASE = validate_config(ScenarioConfig(
    "base", 2, 2, 2, 1, 5, 20.0, 3, 4,
    (VehicleSeed(100.0, 0, 25.0, 0.5, "aggressive", "car"), VehicleSeed(130.0, 1, 22.0, 0.0, "regular", "truck")),
))


def payload(config=BASE, **changes):
    d = config.to_dict()
    d.pop("id")
    d.update(changes)
    return d


def same_fields(config, data):
    got = config.to_dict()
    return all(got[k] == v for k, v in data.items())


def entry(i):
    cfg = validate_config(ScenarioConfig(f"h{i}", 1, 0, 0, 0, 1, 5.0 + i, 2, i))
    return L.HistoryEntry(cfg, {"reward": float(i), "crashed": False}, "none")


# ---------------------------------------------------------------- prompt

def test_prompt_minimal_context():
    text = L.build_prompt(L.PromptContext())
    assert "density: [0, 60]" in text and "num_trucks: [0, 30]" in text
    assert "single JSON object" in text and "none yet" in text
    for key in L.SUGGESTION_KEYS:
        assert key in text


def test_prompt_pure_and_truncated():
    ctx = L.PromptContext(tuple(entry(i) for i in range(15)), base=BASE, history_limit=10)
    text = L.build_prompt(ctx)
    assert text == L.build_prompt(ctx)
    assert '"scenario": "h4"' not in text
    shown = [f'"scenario": "h{i}"' in text for i in range(5, 15)]
    assert all(shown)
    assert text.index('"h5"') < text.index('"h14"')  # newest last
    assert "Configuration to modify" in text


def test_failure_type():
    assert L.failure_type(True, 0, 0) == "crash"
    assert L.failure_type(False, 0, 0.5) == "near_miss"
    assert L.failure_type(False, 0, 0) == "none"
    with pytest.raises(ValueError):
        L.HistoryEntry(BASE, {}, "oops")


# ---------------------------------------------------------------- parsing

def test_parse_strips_prose():
    data = payload()
    s = L.parse_suggestion(f"here you go: {json.dumps(data)} hope it helps")
    assert s.valid and same_fields(s.config, data)


def test_parse_first_object_wins():
    a, b = payload(density=11.0), payload(density=12.0)
    s = L.parse_suggestion(json.dumps(a) + "\n" + json.dumps(b))
    assert s.valid and s.config.density == 11.0


def test_parse_braces_inside_strings():
    assert L.first_object('x {"a": "}{", "b": {"c": 1}} y') == '{"a": "}{", "b": {"c": 1}}'
    assert L.first_object("no object") is None


def test_parse_out_of_range_names_key():
    s = L.parse_suggestion(json.dumps(payload(num_aggressive=-1)))
    assert s.validity == L.OUT_OF_RANGE and s.problems == ["num_aggressive"] and s.config is None
    s = L.parse_suggestion(json.dumps(payload(density=999)))
    assert s.validity == L.OUT_OF_RANGE and "density" in s.problems
    s = L.parse_suggestion(json.dumps(payload(density=0)))
    assert s.validity == L.OUT_OF_RANGE


def test_parse_clamp_opt_in():
    s = L.parse_suggestion(json.dumps(payload(density=999)), clamp=True)
    assert s.valid and s.config.density == 60.0


def test_parse_fills_from_base_and_ignores_unknown():
    s = L.parse_suggestion('{"density": 33, "mood": "sunny"}', base=BASE)
    assert s.valid and s.config.density == 33.0
    assert s.config.num_cars == BASE.num_cars and s.config.critical_pair == BASE.critical_pair
    s = L.parse_suggestion('{"density": 33}')
    assert s.validity == L.UNPARSEABLE


def test_parse_repairs_partition():
    s = L.parse_suggestion(json.dumps(payload(num_aggressive=6)))
    assert s.valid
    c = s.config
    assert c.num_aggressive + c.num_defensive + c.num_regular == c.num_trucks + c.num_cars == 10


def test_parse_garbage():
    for raw in ("", "nothing here", "{not json}", "[1, 2]", '{"num_cars": "five"}'):
        s = L.parse_suggestion(raw, base=BASE)
        assert s.validity == L.UNPARSEABLE, raw


def test_endpoint_from_env():
    with pytest.raises(KeyError):
        L.LlmEndpoint.from_env({})
    ep = L.LlmEndpoint.from_env({L.ENV_URL: "http://h/x", L.ENV_MODEL: "m", L.ENV_TIMEOUT: "2.5"})
    assert (ep.url, ep.model, ep.timeout, ep.token) == ("http://h/x", "m", 2.5, None)


# ---------------------------------------------------------------- transport

def test_request_round_trip():
    data = payload()
    with L.MockLlmServer(L.fixed(json.dumps(data))) as srv:
        s = L.request_suggestion(srv.endpoint(token="t0k"), "prompt text")
    assert s.valid and same_fields(s.config, data)
    req = srv.requests[0]
    assert [m["role"] for m in req["messages"]] == ["system", "user"]
    assert req["messages"][1]["content"] == "prompt text" and req["temperature"] == 0.7


def test_request_out_of_range_not_retried():
    with L.MockLlmServer(L.fixed(json.dumps(payload(density=999)))) as srv:
        s = L.request_suggestion(srv.endpoint(), "p", retries=3)
    assert s.validity == L.OUT_OF_RANGE and s.problems == ["density"]
    assert len(srv.requests) == 1


def test_request_prose_exhausts_retries():
    with L.MockLlmServer(L.fixed("Sorry, I would rather talk about the weather.")) as srv:
        s = L.request_suggestion(srv.endpoint(), "p", retries=2)
    assert s.validity == L.UNPARSEABLE and len(srv.requests) == 3 and len(s.diagnostics) == 3


def test_request_http_errors_fail_soft():
    with L.MockLlmServer(L.failing(500)) as srv:
        s = L.request_suggestion(srv.endpoint(), "p", retries=1)
    assert s.validity == L.UNPARSEABLE and "HTTPError" in s.diagnostics[0]


def test_request_timeout():
    with L.MockLlmServer(L.slow(1.0, json.dumps(payload()))) as srv:
        s = L.request_suggestion(srv.endpoint(timeout=0.1), "p", retries=1)
    assert s.validity == L.UNPARSEABLE
    assert all("Timeout" in d for d in s.diagnostics) and len(s.diagnostics) == 2


def test_request_connection_refused():
    srv = L.MockLlmServer()
    url = srv.url
    srv._httpd.server_close()
    s = L.request_suggestion(L.LlmEndpoint(url, timeout=1.0), "p", retries=0)
    assert s.validity == L.UNPARSEABLE and "ConnectionError" in s.diagnostics[0]


def test_heuristic_mock_suggests_valid_variant():
    prompt = L.build_prompt(L.PromptContext(base=BASE))
    with L.MockLlmServer() as srv:
        s = L.request_suggestion(srv.endpoint(), prompt, base=BASE)
    assert s.valid
    assert s.config.num_aggressive == BASE.num_aggressive + 2 and s.config.density == 25.0
