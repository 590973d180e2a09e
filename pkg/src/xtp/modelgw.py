"""Gateway for model calls: live HTTP, fixture replay, or record (live + persist)."""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

MODES = ("live", "fixture", "record")


class GatewayError(Exception):
    pass


class FixtureMiss(GatewayError):
    def __init__(self, digest: str, summary: str):
        self.digest = digest
        super().__init__(f"no fixture {digest}.json for {summary}")


class CredentialMissing(GatewayError):
    pass


class TransportError(GatewayError):
    def __init__(self, message: str, status: int | None = None, attempts: int = 1):
        self.status = status
        self.attempts = attempts
        super().__init__(f"{message} (status={status}, attempts={attempts})")


@dataclass(frozen=True)
class ModelRequest:
    model_id: str
    parts: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple((str(r), str(c)) for r, c in self.parts))
        if not self.parts:
            raise GatewayError("request needs at least one message part")
        if self.temperature < 0:
            raise GatewayError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise GatewayError("max_tokens must be positive")

    def summary(self) -> str:
        first = self.parts[-1][1].strip().splitlines()[0] if self.parts[-1][1].strip() else ""
        return f"model={self.model_id} parts={len(self.parts)} last={first[:60]!r}"


@dataclass(frozen=True)
class ModelResponse:
    content: str
    tokens_in: int = 0
    tokens_out: int = 0
    latency_ms: float = 0.0
    from_fixture: bool = False

    def __post_init__(self):
        if self.tokens_in < 0 or self.tokens_out < 0:
            raise GatewayError("token counts must be non-negative")

    def to_dict(self) -> dict:
        return {"content": self.content, "tokens_in": self.tokens_in,
                "tokens_out": self.tokens_out, "latency_ms": self.latency_ms}


def _lf(text: str) -> str:
    return text.replace("\r\n", "\n").replace("\r", "\n")


def canonicalize(req: ModelRequest) -> bytes:
    """Sorted keys, compact separators, UTF-8, LF newlines, temperature with two decimals."""
    messages = [{"content": _lf(c), "role": r} for r, c in req.parts]
    dump = lambda v: json.dumps(v, sort_keys=True, ensure_ascii=False, separators=(",", ":"))  # noqa: E731
    text = ('{"max_tokens":' + str(int(req.max_tokens))
            + ',"messages":' + dump(messages)
            + ',"model":' + dump(req.model_id)
            + ',"temperature":' + f"{req.temperature:.2f}" + "}")
    return text.encode("utf-8")


def parse_canonical(data: bytes | str | dict) -> ModelRequest:
    obj = data if isinstance(data, dict) else json.loads(data)
    return ModelRequest(obj["model"], tuple((m["role"], m["content"]) for m in obj["messages"]),
                        float(obj["temperature"]), int(obj["max_tokens"]))


def fixture_key(req: ModelRequest) -> str:
    return hashlib.sha256(canonicalize(req)).hexdigest()


def wire_body(req: ModelRequest) -> dict:
    return {"model": req.model_id,
            "messages": [{"role": r, "content": c} for r, c in req.parts],
            "temperature": req.temperature, "max_tokens": req.max_tokens}


# transport(url, headers, body) -> (status, response bytes)
Transport = Callable[[str, dict, bytes], "tuple[int, bytes]"]


def requests_transport(timeout_s: float = 60.0) -> Transport:
    def send(url: str, headers: dict, body: bytes) -> tuple[int, bytes]:
        import requests
        try:
            r = requests.post(url, data=body, headers=headers, timeout=timeout_s)
        except requests.RequestException as e:
            raise TransportError(f"POST {url} failed: {e}") from e
        return r.status_code, r.content
    return send


@dataclass
class GatewayConfig:
    endpoint: str | None = None
    credential_env: str | None = None
    fixture_dir: Path | None = None
    max_in_flight: int = 4
    headers: dict = field(default_factory=lambda: {"Authorization": "Bearer {credential}",
                                                   "Content-Type": "application/json"})
    retries: int = 2
    backoff_base_s: float = 0.25

    @classmethod
    def from_dict(cls, obj: dict, base_dir: Path | None = None) -> "GatewayConfig":
        fixture_dir = obj.get("fixture_dir")
        if fixture_dir is not None:
            fixture_dir = Path(fixture_dir)
            if base_dir is not None and not fixture_dir.is_absolute():
                fixture_dir = (base_dir / fixture_dir).resolve()
        kwargs = {k: obj[k] for k in ("endpoint", "credential_env", "max_in_flight", "headers")
                  if k in obj}
        return cls(fixture_dir=fixture_dir, **kwargs)


class Gateway:
    def __init__(self, config: GatewayConfig, mode: str = "fixture",
                 transport: Transport | None = None, sleep: Callable[[float], None] = time.sleep):
        if mode not in MODES:
            raise GatewayError(f"unknown gateway mode {mode!r}")
        self.config = config
        self.mode = mode
        self.transport = transport
        self.sleep = sleep
        self._slots = threading.BoundedSemaphore(max(1, config.max_in_flight))
        self._digest_locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self.calls = 0

    # ------------------------------------------------------------------

    def send(self, req: ModelRequest) -> ModelResponse:
        with self._slots:
            if self.mode == "fixture":
                return self._from_fixture(req)
            if self.mode == "live":
                return self._live(req)
            digest = fixture_key(req)
            with self._digest_lock(digest):
                resp = self._live(req)
                self._write_fixture(digest, req, resp)
                return resp

    def fixture_path(self, digest: str) -> Path:
        if self.config.fixture_dir is None:
            raise GatewayError("no fixture directory configured")
        return Path(self.config.fixture_dir) / f"{digest}.json"

    def _digest_lock(self, digest: str) -> threading.Lock:
        with self._locks_guard:
            return self._digest_locks.setdefault(digest, threading.Lock())

    def _from_fixture(self, req: ModelRequest) -> ModelResponse:
        digest = fixture_key(req)
        path = self.fixture_path(digest)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FixtureMiss(digest, req.summary()) from None
        if fixture_key(parse_canonical(data["request"])) != digest:
            raise GatewayError(f"fixture {path.name} does not match its request")
        r = data["response"]
        return ModelResponse(r["content"], int(r.get("tokens_in", 0)), int(r.get("tokens_out", 0)),
                             float(r.get("latency_ms", 0.0)), True)

    def _write_fixture(self, digest: str, req: ModelRequest, resp: ModelResponse) -> Path:
        path = self.fixture_path(digest)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"request": json.loads(canonicalize(req)), "response": resp.to_dict()}
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
        os.replace(tmp, path)
        return path

    def _headers(self) -> dict:
        cred = None
        if self.config.credential_env:
            cred = os.environ.get(self.config.credential_env)
            if not cred:
                raise CredentialMissing(f"environment variable {self.config.credential_env} is not set")
        out = {}
        for k, v in self.config.headers.items():
            if "{credential}" in v:
                if cred is None:
                    continue
                v = v.replace("{credential}", cred)
            out[k] = v
        return out

    def _live(self, req: ModelRequest) -> ModelResponse:
        if not self.config.endpoint:
            raise GatewayError(f"{self.mode} mode needs an endpoint")
        headers = self._headers()
        transport = self.transport or requests_transport()
        body = json.dumps(wire_body(req), ensure_ascii=False).encode("utf-8")
        attempts = 0
        while True:
            attempts += 1
            t0 = time.perf_counter()
            with self._locks_guard:
                self.calls += 1
            status, raw = transport(self.config.endpoint, headers, body)
            latency = (time.perf_counter() - t0) * 1000.0
            if 500 <= status < 600 and attempts <= self.config.retries:
                self.sleep(self.config.backoff_base_s * 2 ** (attempts - 1))
                continue
            if status >= 400:
                raise TransportError(f"endpoint returned {status}", status, attempts)
            try:
                obj = json.loads(raw)
                usage = obj.get("usage", {})
                return ModelResponse(str(obj["content"]), int(usage.get("input_tokens", 0)),
                                     int(usage.get("output_tokens", 0)),
                                     # servers may report their own latency; trust it when present
                                     round(float(obj.get("latency_ms", latency)), 3), False)
            except (ValueError, KeyError, TypeError) as e:
                raise TransportError(f"malformed response body: {e}", status, attempts) from e


def send(req: ModelRequest, mode: str, config: GatewayConfig,
         transport: Transport | None = None) -> ModelResponse:
    return Gateway(config, mode, transport).send(req)
