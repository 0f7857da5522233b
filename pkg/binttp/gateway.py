"""
模型网关：对话与嵌入的统一入口

模式:
    live    直接调用后端（带重试、限流、缓存）
    record  同 live，并把每次交换按指纹写入 record_dir
    replay  只读 record_dir，不做任何网络访问，缺失即报错
    mock    使用脚本化后端（ScriptedBackend）
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import requests

from .errors import (
    ConfigError,
    GatewayError,
    NetworkForbiddenError,
    ReplayMissError,
    TransientBackendError,
    TransportError,
    UnmatchedPromptError,
    ValidationError,
)
from .fileutil import atomic_write_text, dump_json

log = logging.getLogger(__name__)

MOCK_EMBEDDING_DIM = 64


class BackendMode(str, Enum):
    LIVE = "live"
    RECORD = "record"
    REPLAY = "replay"
    MOCK = "mock"


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    system: str = ""
    temperature: float = 0.0
    model: str = ""

    def canonical(self) -> dict:
        return {
            "model": self.model,
            "temperature": float(self.temperature),
            "system": self.system,
            "messages": [m.to_dict() for m in self.messages],
        }

    def fingerprint(self) -> str:
        # 不含时间戳和请求 id；sort_keys 保证字段顺序无关
        payload = json.dumps(self.canonical(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def rendered_prompt(self) -> str:
        parts = [self.system] if self.system else []
        parts += [f"[{m.role}]\n{m.content}" for m in self.messages]
        return "\n\n".join(parts)

    @classmethod
    def from_dict(cls, data: dict) -> "ChatRequest":
        return cls(
            messages=tuple(Message(m["role"], m["content"]) for m in data["messages"]),
            system=data.get("system", ""),
            temperature=float(data.get("temperature", 0.0)),
            model=data.get("model", ""),
        )


@dataclass(frozen=True)
class ChatExchange:
    request: ChatRequest
    response: str

    @property
    def fingerprint(self) -> str:
        return self.request.fingerprint()

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "request": self.request.canonical(),
            "response": {"text": self.response},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChatExchange":
        return cls(request=ChatRequest.from_dict(data["request"]), response=data["response"]["text"])


class Backend(Protocol):
    def chat(self, request: ChatRequest) -> str: ...

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]: ...


def embedding_key(model: str, text: str) -> str:
    return hashlib.sha256(f"{model}\x00{text}".encode("utf-8")).hexdigest()


def hash_embedding(text: str, dim: int = MOCK_EMBEDDING_DIM) -> np.ndarray:
    """确定性的哈希向量：sha256(text || 块序号) 拼接，按大端 uint32 映射到 [-1, 1) 后归一化"""
    data = text.encode("utf-8")
    buf = b""
    block = 0
    while len(buf) < dim * 4:
        buf += hashlib.sha256(data + struct.pack(">I", block)).digest()
        block += 1
    raw = np.frombuffer(buf[: dim * 4], dtype=">u4").astype(np.float64)
    vec = raw / 2.0**31 - 1.0
    return vec / np.linalg.norm(vec)


# ---------------------------------------------------------------- 后端


class HttpBackend:
    """OpenAI 兼容的 HTTP 接口（/chat/completions, /embeddings）"""

    def __init__(self, endpoint: str, api_key_env: str, timeout: float = 120.0) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.session = requests.Session()

    def _headers(self) -> dict:
        key = os.environ.get(self.api_key_env, "") if self.api_key_env else ""
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, path: str, payload: dict) -> dict:
        try:
            response = self.session.post(
                f"{self.endpoint}/{path}", json=payload, headers=self._headers(), timeout=self.timeout
            )
        except (requests.ConnectionError, requests.Timeout) as error:
            raise TransientBackendError(f"连接失败: {error}") from error
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(f"HTTP {response.status_code}: {response.text[:200]}")
        if response.status_code >= 400:
            raise GatewayError(f"HTTP {response.status_code}: {response.text[:200]}")
        return response.json()

    def chat(self, request: ChatRequest) -> str:
        messages = [{"role": "system", "content": request.system}] if request.system else []
        messages += [m.to_dict() for m in request.messages]
        data = self._post(
            "chat/completions",
            {"model": request.model, "temperature": request.temperature, "messages": messages},
        )
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as error:
            raise GatewayError(f"响应结构异常: {error}") from error

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]:
        data = self._post("embeddings", {"model": model, "input": list(texts)})
        items = sorted(data.get("data", []), key=lambda item: item.get("index", 0))
        if len(items) != len(texts):
            raise GatewayError(f"嵌入数量不符: 期望 {len(texts)}，实际 {len(items)}")
        return [item["embedding"] for item in items]


Matcher = Callable[[str], bool]
Responder = Callable[[str], str]


@dataclass
class MockRule:
    name: str
    matcher: Matcher
    response: str | Responder

    def answer(self, prompt: str) -> str:
        return self.response(prompt) if callable(self.response) else self.response


def contains(*needles: str) -> Matcher:
    return lambda prompt: all(n in prompt for n in needles)


def matches(pattern: str) -> Matcher:
    compiled = re.compile(pattern, re.S)
    return lambda prompt: compiled.search(prompt) is not None


class ScriptedBackend:
    """按顺序匹配规则，第一个命中的规则作答；调用计数按规则名统计"""

    def __init__(
        self,
        rules: Sequence[MockRule],
        default: str | Responder | None = None,
        embedding_dim: int = MOCK_EMBEDDING_DIM,
    ) -> None:
        self.rules = list(rules)
        self.default = default
        self.embedding_dim = embedding_dim
        self.counters: dict[str, int] = {rule.name: 0 for rule in self.rules}
        self.prompts: list[str] = []
        self.embed_calls = 0
        self.embedded_texts: list[str] = []
        self._lock = threading.Lock()

    @property
    def chat_calls(self) -> int:
        return len(self.prompts)

    def chat(self, request: ChatRequest) -> str:
        prompt = request.rendered_prompt()
        with self._lock:
            self.prompts.append(prompt)
            for rule in self.rules:
                if rule.matcher(prompt):
                    self.counters[rule.name] += 1
                    break
            else:
                rule = None
        if rule is not None:
            return rule.answer(prompt)
        if self.default is None:
            raise UnmatchedPromptError(f"没有规则匹配该提示: {prompt[:120]!r}")
        return self.default(prompt) if callable(self.default) else self.default

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]:
        with self._lock:
            self.embed_calls += 1
            self.embedded_texts.extend(texts)
        return [hash_embedding(text, self.embedding_dim).tolist() for text in texts]


def mock_script(
    rules: Sequence[tuple[str | Matcher, str | Responder]] | Sequence[MockRule],
    default: str | Responder | None = None,
) -> ScriptedBackend:
    """(匹配器, 回复) 列表 -> 脚本后端；字符串匹配器按子串处理"""
    built = []
    for index, rule in enumerate(rules):
        if isinstance(rule, MockRule):
            built.append(rule)
            continue
        matcher, response = rule
        name = matcher if isinstance(matcher, str) else f"rule{index}"
        if isinstance(matcher, str):
            matcher = contains(matcher)
        built.append(MockRule(name=name, matcher=matcher, response=response))
    return ScriptedBackend(built, default=default)


def load_mock_script(path: str | Path) -> ScriptedBackend:
    """读取 JSON 脚本: {"rules": [{"name", "contains", "pattern", "response"}], "default"}"""
    document = json.loads(Path(path).read_text(encoding="utf-8"))
    rules = []
    for index, entry in enumerate(document.get("rules", [])):
        checks: list[Matcher] = []
        needles = entry.get("contains")
        if needles:
            needles = [needles] if isinstance(needles, str) else list(needles)
            checks.append(contains(*needles))
        if entry.get("pattern"):
            checks.append(matches(entry["pattern"]))
        if not checks:
            raise ConfigError("mock_script", f"规则 #{index} 没有匹配条件")
        rules.append(
            MockRule(
                name=entry.get("name", f"rule{index}"),
                matcher=lambda prompt, checks=checks: all(check(prompt) for check in checks),
                response=entry["response"],
            )
        )
    return ScriptedBackend(rules, default=document.get("default"))


class OfflineGuardBackend:
    """任何调用都会失败，用于断言离线模式没有网络访问"""

    def __init__(self) -> None:
        self.attempts = 0

    def chat(self, request: ChatRequest) -> str:
        self.attempts += 1
        raise NetworkForbiddenError("离线模式下禁止访问后端")

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]:
        self.attempts += 1
        raise NetworkForbiddenError("离线模式下禁止访问后端")


# ---------------------------------------------------------------- 限流


class TokenBucket:
    """令牌桶：每分钟 requests_per_minute 个令牌，桶容量 burst"""

    def __init__(
        self,
        requests_per_minute: float,
        burst: int = 1,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.rate = requests_per_minute / 60.0
        self.capacity = float(max(1, burst))
        self.tokens = self.capacity
        self.clock = clock
        self.sleep = sleep
        self.updated = clock()
        self._lock = threading.Lock()

    def _refill(self) -> None:
        now = self.clock()
        self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
        self.updated = now

    def acquire(self) -> float:
        """取一个令牌，返回等待的秒数"""
        with self._lock:
            self._refill()
            waited = 0.0
            if self.tokens < 1.0:
                waited = (1.0 - self.tokens) / self.rate
                self.sleep(waited)
                self._refill()
            self.tokens = max(0.0, self.tokens - 1.0)
            return waited


# ---------------------------------------------------------------- 网关


@dataclass
class GatewaySettings:
    endpoint: str = "https://api.openai.com/v1"
    model: str = ""
    embedding_model: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    mode: BackendMode = BackendMode.LIVE
    cache_dir: Path | None = None
    record_dir: Path | None = None
    parallelism: int = 4
    requests_per_minute: float = 0
    temperature: float = 0.0
    max_attempts: int = 5
    backoff_base: float = 0.5
    embed_batch_size: int = 64
    mock_script: Path | None = None


@dataclass
class GatewayStats:
    chat_requests: int = 0
    chat_backend_calls: int = 0
    embed_backend_calls: int = 0
    attempts: int = 0
    cache_hits: int = 0
    replayed: int = 0


class Gateway:
    def __init__(
        self,
        settings: GatewaySettings,
        backend: Backend | None = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self.settings = settings
        self.mode = BackendMode(settings.mode)
        if self.mode is BackendMode.REPLAY:
            backend = OfflineGuardBackend()
        elif backend is None:
            if self.mode is BackendMode.MOCK:
                raise ConfigError("mock_script", "mock 模式需要脚本后端")
            backend = HttpBackend(settings.endpoint, settings.api_key_env)
        if self.mode in (BackendMode.RECORD, BackendMode.REPLAY) and settings.record_dir is None:
            raise ConfigError("record_dir", f"{self.mode.value} 模式需要配置 record_dir")
        self.backend = backend
        self.sleep = sleep
        self.stats = GatewayStats()
        self.limiter = (
            TokenBucket(settings.requests_per_minute, burst=max(1, int(settings.requests_per_minute) // 10),
                        clock=clock, sleep=sleep)
            if settings.requests_per_minute and settings.requests_per_minute > 0
            else None
        )
        self._slots = threading.BoundedSemaphore(max(1, settings.parallelism))
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        self._chat_cache: dict[str, str] = {}
        self._vector_cache: dict[str, np.ndarray] = {}

    # ---------------------------------------------------------- 内部

    def _key_lock(self, key: str) -> threading.Lock:
        with self._lock:
            return self._key_locks.setdefault(key, threading.Lock())

    def _count(self, name: str, amount: int = 1) -> None:
        with self._lock:
            setattr(self.stats, name, getattr(self.stats, name) + amount)

    def _with_retry(self, call: Callable[[], object], what: str):
        attempts = self.settings.max_attempts
        for attempt in range(1, attempts + 1):
            if self.limiter:
                self.limiter.acquire()
            self._count("attempts")
            try:
                with self._slots:
                    return call()
            except TransientBackendError as error:
                if attempt == attempts:
                    raise TransportError(f"{what} 失败: {error}", attempts) from error
                delay = self.settings.backoff_base * (2 ** (attempt - 1))
                log.warning("%s 暂时失败（第 %d 次）: %s，%.1f 秒后重试", what, attempt, error, delay)
                self.sleep(delay)
        raise TransportError(f"{what} 失败", attempts)

    def _record_path(self, kind: str, key: str) -> Path:
        return Path(self.settings.record_dir) / kind / f"{key}.json"

    def _cache_path(self, key: str) -> Path | None:
        if self.settings.cache_dir is None:
            return None
        return Path(self.settings.cache_dir) / "embeddings" / f"{key}.json"

    # ---------------------------------------------------------- 对话

    def request(self, messages: Sequence[Message], system: str = "") -> ChatRequest:
        return ChatRequest(
            messages=tuple(messages),
            system=system,
            temperature=self.settings.temperature,
            model=self.settings.model,
        )

    def ask(self, prompt: str, system: str = "") -> str:
        return self.chat(self.request([Message("user", prompt)], system=system))

    def chat(self, request: ChatRequest) -> str:
        self._count("chat_requests")
        fingerprint = request.fingerprint()
        with self._key_lock(fingerprint):
            cached = self._chat_cache.get(fingerprint)
            if cached is not None:
                self._count("cache_hits")
                return cached
            if self.mode is BackendMode.REPLAY:
                path = self._record_path("chat", fingerprint)
                if not path.exists():
                    raise ReplayMissError(fingerprint)
                text = ChatExchange.from_dict(json.loads(path.read_text(encoding="utf-8"))).response
                self._count("replayed")
            else:
                self._count("chat_backend_calls")
                text = self._with_retry(lambda: self.backend.chat(request), "对话请求")
                if self.mode is BackendMode.RECORD:
                    exchange = ChatExchange(request=request, response=text)
                    atomic_write_text(self._record_path("chat", fingerprint), dump_json(exchange.to_dict()))
            self._chat_cache[fingerprint] = text
            return text

    # ---------------------------------------------------------- 嵌入

    def _load_vector(self, key: str) -> np.ndarray | None:
        vector = self._vector_cache.get(key)
        if vector is not None:
            return vector
        path = self._cache_path(key)
        if path is not None and path.exists():
            vector = np.asarray(json.loads(path.read_text(encoding="utf-8"))["vector"], dtype=np.float64)
            self._vector_cache[key] = vector
            return vector
        return None

    def _store_vector(self, key: str, text: str, vector: np.ndarray) -> None:
        self._vector_cache[key] = vector
        document = dump_json({"model": self.settings.embedding_model, "text": text, "vector": vector.tolist()})
        path = self._cache_path(key)
        if path is not None:
            atomic_write_text(path, document)
        if self.mode is BackendMode.RECORD:
            atomic_write_text(self._record_path("embeddings", key), document)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        """每段文本一个单位向量，按 (模型, 文本) 内容哈希缓存"""
        if not texts:
            raise ValidationError("嵌入请求不能为空")
        model = self.settings.embedding_model
        keys = [embedding_key(model, text) for text in texts]
        missing: dict[str, str] = {}
        with self._lock:
            for key, text in zip(keys, texts):
                if self._load_vector(key) is None:
                    missing.setdefault(key, text)
                else:
                    self.stats.cache_hits += 1
                    if self.mode is BackendMode.RECORD and not self._record_path("embeddings", key).exists():
                        self._store_vector(key, text, self._vector_cache[key])

        pending = list(missing.items())
        if pending and self.mode is BackendMode.REPLAY:
            for key, text in pending:
                path = self._record_path("embeddings", key)
                if not path.exists():
                    raise ReplayMissError(key)
                vector = np.asarray(json.loads(path.read_text(encoding="utf-8"))["vector"], dtype=np.float64)
                with self._lock:
                    self._vector_cache[key] = vector
                self._count("replayed")
            pending = []

        size = max(1, self.settings.embed_batch_size)
        for start in range(0, len(pending), size):
            batch = pending[start : start + size]
            self._count("embed_backend_calls")
            vectors = self._with_retry(
                lambda batch=batch: self.backend.embed([text for _, text in batch], model), "嵌入请求"
            )
            for (key, text), raw in zip(batch, vectors):
                vector = np.asarray(raw, dtype=np.float64)
                norm = np.linalg.norm(vector)
                if not np.isfinite(norm) or norm == 0.0:
                    raise GatewayError(f"后端返回了零向量: {key}")
                with self._lock:
                    self._store_vector(key, text, vector / norm)
        return [self._vector_cache[key] for key in keys]


def build_gateway(settings: GatewaySettings, backend: Backend | None = None) -> Gateway:
    """按配置创建网关；mock/record 模式下配置了脚本则使用脚本后端"""
    mode = BackendMode(settings.mode)
    if backend is None and settings.mock_script and mode in (BackendMode.MOCK, BackendMode.RECORD):
        backend = load_mock_script(settings.mock_script)
    return Gateway(settings, backend=backend)
