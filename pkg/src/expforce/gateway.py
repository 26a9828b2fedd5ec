"""Uniform access to multimodal model endpoints.

Three roles share one wire format: a descriptor model that writes object
descriptions, a predictor model that estimates grasp forces, and an embedding
provider that maps (image, description) pairs to vectors. Remote calls go
through a chat-completions style JSON body (documented in docs/wire.md) with
retry/backoff on transient failures. Embeddings can be wrapped in a
content-addressed on-disk cache so repeated runs never re-bill.

All transports and sleep functions are injectable, which is how the tests
exercise retries and wire shapes without a network.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np
import requests

from .errors import (
    AuthMissing,
    CacheCorruption,
    InvalidArgument,
    ModelRefusal,
    ProviderError,
    TransportError,
    ZeroVector,
)

log = logging.getLogger(__name__)

TEXT = "text"
IMAGE = "image"

_CACHE_MAGIC = "EXPFVEC1"


# --- message model --------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    """One typed part of a message: text (str) or image (raw bytes)."""

    kind: str
    payload: str | bytes

    def __post_init__(self):
        if self.kind == TEXT:
            if not isinstance(self.payload, str):
                raise InvalidArgument("text segment payload must be str")
        elif self.kind == IMAGE:
            if not isinstance(self.payload, (bytes, bytearray)) or len(self.payload) == 0:
                raise InvalidArgument("image segment payload must be non-empty bytes")
            object.__setattr__(self, "payload", bytes(self.payload))
        else:
            raise InvalidArgument(f"unknown segment kind {self.kind!r}")


def text_segment(text: str) -> Segment:
    return Segment(TEXT, text)


def image_segment(data: bytes) -> Segment:
    return Segment(IMAGE, data)


@dataclass(frozen=True)
class MultimodalMessage:
    """A role-tagged sequence of segments, ordered as they will be sent."""

    segments: tuple[Segment, ...]
    role: str = "user"

    def __post_init__(self):
        if not self.segments:
            raise InvalidArgument("message must carry at least one segment")
        object.__setattr__(self, "segments", tuple(self.segments))

    def text(self) -> str:
        """Concatenated text payloads, for stubs and logging."""
        return "\n".join(s.payload for s in self.segments if s.kind == TEXT)

    def images(self) -> list[bytes]:
        return [s.payload for s in self.segments if s.kind == IMAGE]


def _hash_update(h, data: bytes) -> None:
    h.update(len(data).to_bytes(8, "big"))
    h.update(data)


def prompt_fingerprint(messages: Sequence[MultimodalMessage]) -> str:
    """Stable hex digest of a prompt, byte-exact over roles and segments."""
    h = hashlib.sha256()
    for msg in messages:
        _hash_update(h, msg.role.encode("utf-8"))
        for seg in msg.segments:
            _hash_update(h, seg.kind.encode("utf-8"))
            payload = seg.payload.encode("utf-8") if isinstance(seg.payload, str) else seg.payload
            _hash_update(h, payload)
    return h.hexdigest()


# --- endpoint configuration ------------------------------------------------


@dataclass(frozen=True)
class ModelEndpointConfig:
    """Where and how to reach one remote endpoint.

    base_url is the full URL of the completion (or embedding) route. The API
    key is never stored here, only the name of the environment variable that
    holds it.
    """

    base_url: str
    model_name: str
    api_key_env: str
    timeout_s: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0

    def __post_init__(self):
        if not self.base_url:
            raise InvalidArgument("base_url must be non-empty")
        if not self.model_name:
            raise InvalidArgument("model_name must be non-empty")
        if self.timeout_s <= 0:
            raise InvalidArgument("timeout_s must be positive")
        if not 0 <= self.max_retries <= 5:
            raise InvalidArgument("max_retries must be within 0..5")
        if not 0.0 <= self.temperature <= 2.0:
            raise InvalidArgument("temperature must be within 0..2")

    def fingerprint(self) -> str:
        body = json.dumps(
            {"base_url": self.base_url, "model": self.model_name, "temperature": self.temperature},
            sort_keys=True,
        )
        return hashlib.sha256(body.encode("utf-8")).hexdigest()


# --- retry plumbing --------------------------------------------------------


class TransientTransportFailure(Exception):
    """Internal marker: worth retrying (connection trouble, 429, 5xx)."""


def _with_retries(fn, *, max_retries: int, sleep: Callable[[float], None], backoff_base_s: float):
    attempt = 0
    while True:
        try:
            return fn()
        except TransientTransportFailure as exc:
            if attempt >= max_retries:
                raise TransportError(f"retries exhausted after {attempt} retries: {exc}") from exc
            delay = backoff_base_s * (2.0 ** attempt)
            log.warning("transient transport failure (retry %d/%d in %.1fs): %s",
                        attempt + 1, max_retries, delay, exc)
            sleep(delay)
            attempt += 1


def _require_api_key(cfg: ModelEndpointConfig) -> str:
    key = os.environ.get(cfg.api_key_env, "")
    if not key:
        raise AuthMissing(f"environment variable {cfg.api_key_env!r} is unset or empty")
    return key


# --- chat completion wire ----------------------------------------------------


def _media_type(data: bytes) -> str:
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return "image/png"
    if data[:2] == b"\xff\xd8":
        return "image/jpeg"
    return "application/octet-stream"


def build_chat_request(cfg: ModelEndpointConfig, messages: Sequence[MultimodalMessage]) -> dict:
    """Render messages into the JSON body documented in docs/wire.md."""
    wire_messages = []
    for msg in messages:
        content = []
        for seg in msg.segments:
            if seg.kind == TEXT:
                content.append({"type": "text", "text": seg.payload})
            else:
                content.append({
                    "type": "image",
                    "media_type": _media_type(seg.payload),
                    "data": base64.b64encode(seg.payload).decode("ascii"),
                })
        wire_messages.append({"role": msg.role, "content": content})
    return {"model": cfg.model_name, "temperature": cfg.temperature, "messages": wire_messages}


def _extract_chat_content(payload: dict) -> str:
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"malformed completion response: {exc!r}") from exc
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        # Some endpoints return typed parts even for pure-text answers.
        return "".join(part.get("text", "") for part in content if isinstance(part, dict))
    raise TransportError(f"unsupported content payload of type {type(content).__name__}")


def _http_post_json(url: str, body: dict, api_key: str, timeout_s: float) -> dict:
    try:
        resp = requests.post(
            url,
            json=body,
            timeout=timeout_s,
            headers={"Authorization": f"Bearer {api_key}"},
        )
    except requests.RequestException as exc:
        raise TransientTransportFailure(str(exc)) from exc
    if resp.status_code == 429 or resp.status_code >= 500:
        raise TransientTransportFailure(f"HTTP {resp.status_code}")
    if resp.status_code != 200:
        raise TransportError(f"HTTP {resp.status_code}: {resp.text[:300]}")
    try:
        return resp.json()
    except ValueError as exc:
        raise TransportError(f"response body is not JSON: {exc}") from exc


def _default_chat_transport(cfg: ModelEndpointConfig, body: dict, api_key: str) -> str:
    return _extract_chat_content(_http_post_json(cfg.base_url, body, api_key, cfg.timeout_s))


@runtime_checkable
class CompletionBackend(Protocol):
    def complete(self, messages: Sequence[MultimodalMessage]) -> str: ...

    def fingerprint(self) -> str: ...


class RemoteCompletionBackend:
    """Chat-completion client with exponential backoff on transient failures.

    Args:
        cfg: endpoint coordinates and retry budget.
        transport: callable (cfg, body, api_key) -> content str. Replaced in
            tests; raises TransientTransportFailure to request a retry.
        sleep: injectable sleeper so tests do not wait for real backoff.
    """

    def __init__(self, cfg: ModelEndpointConfig, transport=None, sleep=time.sleep,
                 backoff_base_s: float = 0.5):
        self.cfg = cfg
        self._transport = transport or _default_chat_transport
        self._sleep = sleep
        self._backoff_base_s = backoff_base_s

    def complete(self, messages: Sequence[MultimodalMessage]) -> str:
        api_key = _require_api_key(self.cfg)
        body = build_chat_request(self.cfg, messages)
        content = _with_retries(
            lambda: self._transport(self.cfg, body, api_key),
            max_retries=self.cfg.max_retries,
            sleep=self._sleep,
            backoff_base_s=self._backoff_base_s,
        )
        if not content or not content.strip():
            raise ModelRefusal(f"{self.cfg.model_name} returned no usable content")
        return content

    def fingerprint(self) -> str:
        return "remote-completion:" + self.cfg.fingerprint()


def complete(cfg: ModelEndpointConfig, messages: Sequence[MultimodalMessage],
             transport=None, sleep=time.sleep) -> str:
    """One-shot remote completion; see RemoteCompletionBackend."""
    return RemoteCompletionBackend(cfg, transport=transport, sleep=sleep).complete(messages)


# --- embeddings --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """A finite, nonzero float64 vector with provenance.

    values is stored read-only; d must equal len(values).
    """

    values: np.ndarray
    provider_id: str
    d: int

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise InvalidArgument("embedding values must be one-dimensional")
        if arr.shape[0] != self.d:
            raise InvalidArgument(f"d={self.d} but values has length {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise ZeroVector("embedding contains non-finite entries")
        if float(np.linalg.norm(arr)) == 0.0:
            raise ZeroVector("embedding has zero norm")
        if not self.provider_id:
            raise InvalidArgument("provider_id must be non-empty")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@runtime_checkable
class EmbeddingProvider(Protocol):
    provider_id: str

    def embed(self, image: bytes, description: str) -> EmbeddingVector: ...

    def fingerprint(self) -> str: ...


def embed(provider: EmbeddingProvider, image: bytes, description: str) -> EmbeddingVector:
    """Embed an (image, description) pair; at least one part must be non-empty."""
    if not image and not description.strip():
        raise InvalidArgument("need a non-empty image or description to embed")
    vec = provider.embed(image, description)
    if vec.provider_id != provider.provider_id:
        raise ProviderError(
            f"provider {provider.provider_id!r} returned vector tagged {vec.provider_id!r}")
    return vec


class RemoteEmbeddingProvider:
    """Remote embedding endpoint client.

    The response dimension is learned from the first call and must stay
    consistent for the life of the provider; a drift mid-run would silently
    corrupt every similarity, so it is a hard error.
    """

    def __init__(self, cfg: ModelEndpointConfig, transport=None, sleep=time.sleep,
                 backoff_base_s: float = 0.5):
        self.cfg = cfg
        self.provider_id = f"remote:{cfg.model_name}"
        self._transport = transport or self._default_transport
        self._sleep = sleep
        self._backoff_base_s = backoff_base_s
        self._seen_d: int | None = None
        self._lock = threading.Lock()

    @staticmethod
    def _default_transport(cfg: ModelEndpointConfig, body: dict, api_key: str) -> list[float]:
        payload = _http_post_json(cfg.base_url, body, api_key, cfg.timeout_s)
        try:
            return list(payload["data"][0]["embedding"])
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed embedding response: {exc!r}") from exc

    def embed(self, image: bytes, description: str) -> EmbeddingVector:
        api_key = _require_api_key(self.cfg)
        body = {
            "model": self.cfg.model_name,
            "input": {
                "text": description,
                "image": base64.b64encode(image).decode("ascii") if image else None,
            },
        }
        values = _with_retries(
            lambda: self._transport(self.cfg, body, api_key),
            max_retries=self.cfg.max_retries,
            sleep=self._sleep,
            backoff_base_s=self._backoff_base_s,
        )
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ProviderError("embedding endpoint returned an empty or nested vector")
        with self._lock:
            if self._seen_d is None:
                self._seen_d = int(arr.size)
            elif self._seen_d != arr.size:
                raise ProviderError(
                    f"embedding dimension changed mid-run: {self._seen_d} then {arr.size}")
        return EmbeddingVector(arr, self.provider_id, int(arr.size))

    def fingerprint(self) -> str:
        return "remote-embedding:" + self.cfg.fingerprint()


# --- on-disk embedding cache -------------------------------------------------


def embedding_cache_key(image: bytes, description: str, provider_id: str) -> str:
    """Content address: hash of image bytes, description, and provider id."""
    h = hashlib.sha256()
    _hash_update(h, image)
    _hash_update(h, description.encode("utf-8"))
    _hash_update(h, provider_id.encode("utf-8"))
    return h.hexdigest()


class EmbeddingCache:
    """Content-addressed vector store under cache_dir/<first2>/<hash>.vec.

    Entries carry a small text header (magic, provider_id, d, payload
    checksum) ahead of raw little-endian float64 bytes. Corrupt entries are
    recomputed and overwritten, never served. Writes go through a temp file
    and os.replace so concurrent writers cannot interleave.
    """

    def __init__(self, cache_dir: str | Path):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0
        self.corruptions = 0
        self._lock = threading.Lock()

    def path_for(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.vec"

    def get_or_compute(self, image: bytes, description: str, provider_id: str,
                       compute: Callable[[], EmbeddingVector]) -> EmbeddingVector:
        key = embedding_cache_key(image, description, provider_id)
        path = self.path_for(key)
        if path.exists():
            try:
                vec = self._read(path, provider_id)
                with self._lock:
                    self.hits += 1
                return vec
            except CacheCorruption as exc:
                with self._lock:
                    self.corruptions += 1
                log.warning("cache entry %s corrupt (%s), recomputing", path.name, exc)
        vec = compute()
        self._write(path, vec)
        with self._lock:
            self.misses += 1
        return vec

    def _read(self, path: Path, provider_id: str) -> EmbeddingVector:
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise CacheCorruption(f"unreadable: {exc}") from exc
        header, sep, payload = blob.partition(b"\n\n")
        if not sep:
            raise CacheCorruption("missing header separator")
        lines = header.decode("utf-8", errors="replace").splitlines()
        if len(lines) != 4 or lines[0] != _CACHE_MAGIC:
            raise CacheCorruption("bad magic or header shape")
        entry_provider, d_text, checksum = lines[1], lines[2], lines[3]
        if entry_provider != provider_id:
            raise CacheCorruption(f"provider mismatch: {entry_provider!r}")
        try:
            d = int(d_text)
        except ValueError as exc:
            raise CacheCorruption("non-integer dimension") from exc
        if hashlib.sha256(payload).hexdigest() != checksum:
            raise CacheCorruption("payload checksum mismatch")
        arr = np.frombuffer(payload, dtype="<f8")
        if arr.size != d:
            raise CacheCorruption(f"dimension mismatch: header {d}, payload {arr.size}")
        try:
            return EmbeddingVector(arr, provider_id, d)
        except (ZeroVector, InvalidArgument) as exc:
            raise CacheCorruption(f"stored vector invalid: {exc}") from exc

    def _write(self, path: Path, vec: EmbeddingVector) -> None:
        payload = np.ascontiguousarray(vec.values, dtype="<f8").tobytes()
        header = "\n".join([
            _CACHE_MAGIC,
            vec.provider_id,
            str(vec.d),
            hashlib.sha256(payload).hexdigest(),
        ])
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_bytes(header.encode("utf-8") + b"\n\n" + payload)
        os.replace(tmp, path)


def cache_get_or_compute(cache_dir: str | Path, image: bytes, description: str,
                         provider_id: str, compute: Callable[[], EmbeddingVector]) -> EmbeddingVector:
    """One-shot convenience wrapper around EmbeddingCache."""
    return EmbeddingCache(cache_dir).get_or_compute(image, description, provider_id, compute)


class CachedEmbeddingProvider:
    """Transparent cache wrapper: same vectors, same provider_id, fewer calls."""

    def __init__(self, inner: EmbeddingProvider, cache: EmbeddingCache):
        self.inner = inner
        self.cache = cache
        self.provider_id = inner.provider_id

    def embed(self, image: bytes, description: str) -> EmbeddingVector:
        return self.cache.get_or_compute(
            image, description, self.provider_id,
            lambda: self.inner.embed(image, description))

    def fingerprint(self) -> str:
        return self.inner.fingerprint()


# --- role bundle -------------------------------------------------------------


@dataclass
class Gateway:
    """The three endpoint roles a prediction pipeline may need.

    Any role may be None when the chosen backend does not use it (KnnAverage
    needs only the embedder; ZeroShot needs only the predictor).
    """

    descriptor: CompletionBackend | None = None
    predictor: CompletionBackend | None = None
    embedder: EmbeddingProvider | None = None

    def fingerprint(self) -> str:
        parts = {
            "descriptor": self.descriptor.fingerprint() if self.descriptor else "none",
            "predictor": self.predictor.fingerprint() if self.predictor else "none",
            "embedder": self.embedder.fingerprint() if self.embedder else "none",
        }
        return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()
