"""Language-model suggestions of new scenario configurations.

The client speaks the common chat-completion HTTP shape (``model``,
``messages``, ``temperature``) and never raises past :func:`request_suggestion`:
every outcome is an :class:`LlmSuggestion` whose ``validity`` tells the caller
whether to use the parsed configuration or fall back to perturbation.

:class:`MockLlmServer` is a local stand-in speaking the same protocol.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Sequence

import requests

from .scenario import (
    BEHAVIORS,
    DEFAULT_RANGES,
    KINDS,
    ScenarioConfig,
    ValidationError,
    ValidRanges,
    VehicleSeed,
    reconcile,
    validate_config,
)

VALID, OUT_OF_RANGE, UNPARSEABLE = "valid", "out_of_range", "unparseable"
FAILURES = ("crash", "near_miss", "none")

SUGGESTION_KEYS = (
    "num_aggressive", "num_defensive", "num_regular", "num_trucks", "num_cars",
    "density", "scenario", "vehicle_i", "vehicle_j",
)
COUNT_KEYS = ("num_aggressive", "num_defensive", "num_regular", "num_trucks", "num_cars")
SEED_RANGES = {"x": "x", "speed": "speed", "acceleration": "acceleration"}

SYSTEM_PROMPT = (
    "You design highway traffic scenarios for testing an automated driving policy. "
    "You answer with configuration objects only."
)
INSTRUCTION = "Suggest a configuration likely to be critical for the ego vehicle."

ENV_URL = "CRITGEN_LLM_URL"
ENV_MODEL = "CRITGEN_LLM_MODEL"
ENV_TOKEN = "CRITGEN_LLM_TOKEN"
ENV_TIMEOUT = "CRITGEN_LLM_TIMEOUT"


@dataclass(frozen=True)
class HistoryEntry:
    config: ScenarioConfig
    summary: dict  # reward, length, crashed, ttc_near_miss_count, r_threshold_count (means allowed)
    failure: str = "none"

    def __post_init__(self):
        if self.failure not in FAILURES:
            raise ValueError(f"failure must be one of {FAILURES}, got {self.failure!r}")


def failure_type(crashed: bool, ttc_near_miss_count: float, r_threshold_count: float) -> str:
    if crashed:
        return "crash"
    if ttc_near_miss_count > 0 or r_threshold_count > 0:
        return "near_miss"
    return "none"


@dataclass(frozen=True)
class PromptContext:
    history: tuple[HistoryEntry, ...] = ()
    ranges: ValidRanges = DEFAULT_RANGES
    base: ScenarioConfig | None = None
    instruction: str = INSTRUCTION
    history_limit: int = 10

    def recent(self) -> tuple[HistoryEntry, ...]:
        if self.history_limit <= 0:
            return ()
        return tuple(self.history[-self.history_limit:])


@dataclass
class LlmSuggestion:
    raw: str
    config: ScenarioConfig | None
    validity: str
    problems: list[str] = field(default_factory=list)  # offending keys for out_of_range
    diagnostics: list[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return self.validity == VALID


def _suggestion_view(config: ScenarioConfig) -> dict:
    d = config.to_dict()
    out = {k: d[k] for k in SUGGESTION_KEYS if k in d}
    out["scenario"] = config.id
    return {k: out[k] for k in SUGGESTION_KEYS if k in out}


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else f"{value:g}"


def build_prompt(context: PromptContext) -> str:
    """Prompt text: instruction, range table, history (newest last) and reply format."""
    lines = [context.instruction, "", "Valid ranges (inclusive; density excludes its minimum):"]
    for key, (lo, hi) in context.ranges.as_table().items():
        lines.append(f"{key}: [{_fmt(lo)}, {_fmt(hi)}]")
    lines += [
        f"behavior: one of {list(BEHAVIORS)}",
        f"kind: one of {list(KINDS)}",
        "Counts must satisfy num_aggressive + num_defensive + num_regular == num_trucks + num_cars.",
        "",
    ]
    recent = context.recent()
    if recent:
        lines.append(f"History of recent runs ({len(recent)}, oldest first):")
        for i, entry in enumerate(recent, 1):
            summary = ", ".join(f"{k}={_fmt(v) if isinstance(v, (int, float)) and not isinstance(v, bool) else v}"
                                for k, v in entry.summary.items())
            lines.append(f"{i}. config={json.dumps(_suggestion_view(entry.config), sort_keys=False)}")
            lines.append(f"   outcome: {summary}; failure={entry.failure}")
    else:
        lines.append("History of recent runs: none yet.")
    if context.base is not None:
        lines += ["", f"Configuration to modify: {json.dumps(_suggestion_view(context.base))}"]
    lines += [
        "",
        "Reply with a single JSON object and nothing else. It must have exactly these keys: "
        + ", ".join(SUGGESTION_KEYS) + ".",
        "vehicle_i and vehicle_j are objects with keys x, lane, speed, acceleration, behavior, kind.",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------- parsing


def first_object(text: str) -> str | None:
    """The first balanced ``{...}`` span, ignoring braces inside JSON strings."""
    start = text.find("{")
    if start != -1:
        depth = 0
        in_str = False
        escaped = False
        for i in range(start, len(text)):
            c = text[i]
            if in_str:
                if escaped:
                    escaped = False
                elif c == "\\":
                    escaped = True
                elif c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    return text[start:i + 1]
    return None


class _Reject(Exception):
    def __init__(self, validity, key, message):
        self.validity, self.key, self.message = validity, key, message


def _number(value, key, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _Reject(UNPARSEABLE, key, f"{key} must be a number, got {value!r}")
    if integer:
        if float(value) != int(value):
            raise _Reject(UNPARSEABLE, key, f"{key} must be an integer, got {value!r}")
        return int(value)
    return float(value)


def _bounded(value, key, bounds, clamp, problems, open_low=False):
    lo, hi = bounds
    bad = value > hi or value < lo or (open_low and value <= lo)
    if not bad:
        return value
    if not clamp:
        problems.append(key)
        return value
    if open_low and value <= lo:
        return lo + 1e-3
    return min(max(value, lo), hi)


def _seed(data, key, base_seed, lane_count, ranges, clamp, problems) -> VehicleSeed:
    if not isinstance(data, dict):
        raise _Reject(UNPARSEABLE, key, f"{key} must be an object")
    base = base_seed.to_dict() if base_seed is not None else {}
    merged = {**base, **{k: v for k, v in data.items() if k in ("x", "lane", "speed", "acceleration", "behavior", "kind")}}
    for k in ("x", "lane", "speed", "acceleration", "behavior", "kind"):
        if k not in merged:
            raise _Reject(UNPARSEABLE, f"{key}.{k}", f"{key} lacks {k}")
    values = {}
    for k, name in SEED_RANGES.items():
        values[k] = _bounded(_number(merged[k], f"{key}.{k}"), f"{key}.{k}", getattr(ranges, name), clamp, problems)
    lane = _bounded(_number(merged["lane"], f"{key}.lane", integer=True), f"{key}.lane",
                    (0, lane_count - 1), clamp, problems)
    for k, allowed in (("behavior", BEHAVIORS), ("kind", KINDS)):
        if merged[k] not in allowed:
            problems.append(f"{key}.{k}")
    return VehicleSeed(values["x"], int(lane), values["speed"], values["acceleration"],
                       merged["behavior"] if merged["behavior"] in BEHAVIORS else BEHAVIORS[0],
                       merged["kind"] if merged["kind"] in KINDS else KINDS[0])


def _suggestion_id(base: ScenarioConfig | None, obj: dict) -> str:
    digest = hashlib.sha1(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:8]
    return f"{base.id if base else 'llm'}~llm-{digest}"


def parse_suggestion(raw: str, ranges: ValidRanges = DEFAULT_RANGES, base: ScenarioConfig | None = None,
                     clamp: bool = False) -> LlmSuggestion:
    """Parse the first object in ``raw`` into a configuration.

    Keys missing from the reply come from ``base``; unknown keys are ignored.
    Values outside ``ranges`` make the suggestion ``out_of_range`` unless
    ``clamp`` is set.
    """
    text = first_object(raw or "")
    if text is None:
        return LlmSuggestion(raw, None, UNPARSEABLE, diagnostics=["no object found in reply"])
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        return LlmSuggestion(raw, None, UNPARSEABLE, diagnostics=[f"invalid object: {exc}"])
    if not isinstance(obj, dict):
        return LlmSuggestion(raw, None, UNPARSEABLE, diagnostics=["reply object is not a mapping"])

    fallback = base.to_dict() if base is not None else {}
    problems: list[str] = []
    try:
        values = {}
        for key in COUNT_KEYS:
            if key not in obj and key not in fallback:
                raise _Reject(UNPARSEABLE, key, f"missing {key}")
            v = _number(obj.get(key, fallback.get(key)), key, integer=True)
            values[key] = _bounded(v, key, getattr(ranges, key), clamp, problems)
        if "density" not in obj and "density" not in fallback:
            raise _Reject(UNPARSEABLE, "density", "missing density")
        values["density"] = _bounded(_number(obj.get("density", fallback.get("density")), "density"),
                                     "density", ranges.density, clamp, problems, open_low=True)
        lane_count = _number(obj.get("lane_count", fallback.get("lane_count", 3)), "lane_count", integer=True)
        lane_count = _bounded(lane_count, "lane_count", ranges.lane_count, clamp, problems)
        seed = _number(obj.get("seed", fallback.get("seed", 0)), "seed", integer=True)
        lanes_ok = min(max(lane_count, 1), int(ranges.lane_count[1]))
        pair = None
        base_pair = base.critical_pair if base is not None else None
        has_i, has_j = obj.get("vehicle_i") is not None, obj.get("vehicle_j") is not None
        if has_i or has_j or base_pair is not None:
            seeds = []
            for n, key in enumerate(("vehicle_i", "vehicle_j")):
                data = obj.get(key)
                base_seed = base_pair[n] if base_pair else None
                if data is None:
                    if base_seed is None:
                        raise _Reject(UNPARSEABLE, key, f"missing {key}")
                    data = {}
                seeds.append(_seed(data, key, base_seed, lanes_ok, ranges, clamp, problems))
            pair = (seeds[0], seeds[1])
    except _Reject as rej:
        if rej.validity == UNPARSEABLE:
            return LlmSuggestion(raw, None, UNPARSEABLE, diagnostics=[rej.message])
        problems.append(rej.key)
    if problems:
        return LlmSuggestion(raw, None, OUT_OF_RANGE, problems=problems,
                             diagnostics=[f"out of range: {', '.join(problems)}"])

    config = ScenarioConfig(
        id=_suggestion_id(base, obj), lane_count=int(lane_count), seed=int(seed), critical_pair=pair, **values,
    )
    try:
        config = validate_config(reconcile(config, ranges), ranges)
    except ValidationError as exc:
        return LlmSuggestion(raw, None, OUT_OF_RANGE, problems=[exc.field], diagnostics=[str(exc)])
    return LlmSuggestion(raw, config, VALID)


# ---------------------------------------------------------------- transport


@dataclass(frozen=True)
class LlmEndpoint:
    url: str
    model: str = "mistral-7b-instruct"
    token: str | None = None
    timeout: float = 30.0
    temperature: float = 0.7

    @classmethod
    def from_env(cls, environ=None) -> LlmEndpoint:
        env = os.environ if environ is None else environ
        url = env.get(ENV_URL)
        if not url:
            raise KeyError(f"{ENV_URL} is not set")
        return cls(
            url=url,
            model=env.get(ENV_MODEL, cls.model),
            token=env.get(ENV_TOKEN) or None,
            timeout=float(env.get(ENV_TIMEOUT, cls.timeout)),
        )


def _chat(endpoint: LlmEndpoint, prompt: str, timeout: float) -> str:
    headers = {"Content-Type": "application/json"}
    if endpoint.token:
        headers["Authorization"] = f"Bearer {endpoint.token}"
    payload = {
        "model": endpoint.model,
        "messages": [{"role": "system", "content": SYSTEM_PROMPT}, {"role": "user", "content": prompt}],
        "temperature": endpoint.temperature,
    }
    resp = requests.post(endpoint.url, json=payload, headers=headers, timeout=timeout)
    resp.raise_for_status()
    body = resp.json()
    return body["choices"][0]["message"]["content"]


def request_suggestion(
    endpoint: LlmEndpoint,
    prompt: str,
    retries: int = 3,
    timeout: float | None = None,
    base: ScenarioConfig | None = None,
    ranges: ValidRanges = DEFAULT_RANGES,
    clamp: bool = False,
) -> LlmSuggestion:
    """Ask for one suggestion, retrying transport and parse failures.

    An out-of-range reply is returned at once: the model answered, the answer
    is just unusable.
    """
    timeout = endpoint.timeout if timeout is None else timeout
    diagnostics = []
    raw = ""
    for attempt in range(1 + max(retries, 0)):
        try:
            raw = _chat(endpoint, prompt, timeout)
        except (requests.RequestException, ValueError, KeyError, IndexError, TypeError) as exc:
            diagnostics.append(f"attempt {attempt + 1}: {type(exc).__name__}: {exc}")
            continue
        suggestion = parse_suggestion(raw, ranges, base, clamp)
        if suggestion.validity != UNPARSEABLE:
            suggestion.diagnostics = diagnostics + suggestion.diagnostics
            return suggestion
        diagnostics.append(f"attempt {attempt + 1}: " + "; ".join(suggestion.diagnostics))
    return LlmSuggestion(raw, None, UNPARSEABLE, diagnostics=diagnostics)


# ---------------------------------------------------------------- mock service


@dataclass
class MockReply:
    content: str = ""
    status: int = 200
    delay: float = 0.0


Responder = Callable[[dict], MockReply]


def fixed(content: str) -> Responder:
    return lambda request: MockReply(content)


def failing(status: int = 503) -> Responder:
    return lambda request: MockReply("", status=status)


def slow(delay: float, content: str = "{}") -> Responder:
    return lambda request: MockReply(content, delay=delay)


def heuristic(request: dict) -> MockReply:
    """Deterministic stand-in model: denser, more aggressive traffic than the base."""
    prompt = request["messages"][-1]["content"]
    marker = "Configuration to modify: "
    pos = prompt.find(marker)
    if pos < 0:
        return MockReply("I cannot help without a configuration.")
    base = json.loads(first_object(prompt[pos + len(marker):]))
    out = dict(base)
    shift = min(2, out["num_defensive"] + out["num_regular"])
    take = min(shift, out["num_defensive"])
    out["num_defensive"] -= take
    out["num_regular"] -= shift - take
    out["num_aggressive"] = min(out["num_aggressive"] + shift, int(DEFAULT_RANGES.num_aggressive[1]))
    out["density"] = round(min(out["density"] * 1.25, DEFAULT_RANGES.density[1]), 3)
    for key in ("vehicle_i", "vehicle_j"):
        if key in out:
            out[key] = dict(out[key], behavior="aggressive")
    if "vehicle_i" in out:
        out["vehicle_i"]["speed"] = round(min(out["vehicle_i"]["speed"] + 3.0, DEFAULT_RANGES.speed[1]), 3)
    return MockReply("Here is a more demanding variant:\n" + json.dumps(out))


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):  # noqa: N802 (http.server naming)
        length = int(self.headers.get("Content-Length", 0))
        try:
            request = json.loads(self.rfile.read(length) or b"{}")
        except json.JSONDecodeError:
            request = {}
        server: MockLlmServer = self.server.owner
        server.requests.append(request)
        reply = server.responder(request)
        if reply.delay:
            time.sleep(reply.delay)
        body = json.dumps({
            "id": f"mock-{len(server.requests)}",
            "object": "chat.completion",
            "model": request.get("model", "mock"),
            "choices": [{"index": 0, "message": {"role": "assistant", "content": reply.content},
                         "finish_reason": "stop"}],
        }).encode()
        if reply.status != 200:
            body = json.dumps({"error": {"message": "mock failure"}}).encode()
        try:
            self.send_response(reply.status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
        except (BrokenPipeError, ConnectionResetError):
            pass

    def log_message(self, *args):
        pass


class MockLlmServer:
    """Local chat-completion server on 127.0.0.1; use as a context manager.

    ``responder`` maps each decoded request to a :class:`MockReply`; every
    request is kept in ``requests``.
    """

    def __init__(self, responder: Responder = heuristic):
        self.responder = responder
        self.requests: list[dict] = []
        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
        self._httpd.daemon_threads = True
        self._httpd.owner = self
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"

    def endpoint(self, **kwargs: Any) -> LlmEndpoint:
        return LlmEndpoint(url=self.url, model="mock", **kwargs)

    def __enter__(self) -> MockLlmServer:
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()


def history_from(configs: Sequence[ScenarioConfig], summaries: Sequence[dict]) -> tuple[HistoryEntry, ...]:
    """History entries pairing configurations with aggregate outcome summaries."""
    out = []
    for cfg, s in zip(configs, summaries):
        failure = failure_type(s.get("crash_rate", 0) > 0, s.get("mean_ttc_near_miss", 0),
                               s.get("mean_r_threshold_count", 0))
        out.append(HistoryEntry(cfg, dict(s), failure))
    return tuple(out)

