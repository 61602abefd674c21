"""Multimodal chat clients.

A message is ``{"role": "system" | "user", "parts": [part, ...]}`` where a
part is ``{"type": "text", "text": str}`` or ``{"type": "image", "name": str,
"data": uint8 array (H, W, 3)}``. Every client exposes
``generate(messages) -> str``.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import re
import threading
import time
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)


class ClientError(RuntimeError):
    """Generation failed and should not be retried."""


class RetriableError(ClientError):
    """Transient failure (timeout, 5xx, empty response)."""


def text_part(text: str) -> dict:
    return {"type": "text", "text": text}


def image_part(data: np.ndarray, name: str = "image") -> dict:
    arr = np.asarray(data)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return {"type": "image", "name": name, "data": arr}


def message(role: str, *parts) -> dict:
    return {"role": role, "parts": list(parts)}


def image_digest(arr: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def serializable(messages) -> list:
    """Messages with images replaced by name/shape/digest (for transcripts and keys)."""
    out = []
    for m in messages:
        parts = []
        for p in m["parts"]:
            if p["type"] == "image":
                parts.append({"type": "image", "name": p["name"], "shape": list(p["data"].shape),
                              "sha": image_digest(p["data"])})
            else:
                parts.append(dict(p))
        out.append({"role": m["role"], "parts": parts})
    return out


def payload_key(messages) -> str:
    blob = json.dumps(serializable(messages), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def payload_text(messages) -> str:
    return "\n".join(p["text"] for m in messages for p in m["parts"] if p["type"] == "text")


class VlmClient:
    """Interface: subclasses implement :meth:`generate`."""

    def generate(self, messages) -> str:  # pragma: no cover - interface
        raise NotImplementedError


# ------------------------------------------------------------------ mock


_COVERAGE = re.compile(r"coverage (\d+(?:\.\d)?)%")


def _auto_response(messages) -> str:
    text = payload_text(messages)
    system = " ".join(p["text"] for m in messages if m["role"] == "system" for p in m["parts"] if p["type"] == "text")
    if "evaluator" in system.lower():
        ref = re.search(r"Reference report:\n(.*?)\n\nGenerated report:", text, re.S)
        gen = re.search(r"Generated report:\n(.*?)\n\nEvaluation requirements:", text, re.S)
        a = set(re.findall(r"[a-z]+", ref.group(1).lower())) if ref else set()
        b = set(re.findall(r"[a-z]+", gen.group(1).lower())) if gen else set()
        overlap = len(a & b) / max(1, len(a | b))
        score = 1 + int(round(9 * overlap))
        return f"Score: {score}. Token overlap with the reference is {overlap:.2f}."
    images = [p for m in messages for p in m["parts"] if p["type"] == "image"]
    tag = image_digest(images[0]["data"])[:8] if images else "noimage"
    if "Extent:" in text:
        cov = _COVERAGE.search(text)
        cov_txt = f"about {cov.group(1)}% of the scene" if cov else "part of the scene"
        return (
            f"Extent:\nStanding water covers {cov_txt}.\n"
            "Depth:\nThe water appears shallow, below curb height.\n"
            "Risk:\nReduced traction for vehicles and slipping hazards for pedestrians.\n"
            f"Impact:\nLocal traffic slows; drainage inspection is advised. [{tag}]"
        )
    if "weather" in text.lower():
        return f"Overcast daytime street with a wet road surface and parked cars [{tag}]."
    return f"The image shows a street with some standing water [{tag}]."


class MockClient(VlmClient):
    """Deterministic client for tests and dry runs.

    ``mode="auto"`` answers captions, reports and scoring requests with fixed
    functions of the payload; ``"echo"`` returns the payload text; a
    ``script`` list is replayed in order (entries that are exceptions are raised).
    """

    def __init__(self, mode: str = "auto", script=None):
        self.mode = mode
        self.script = list(script) if script is not None else None
        self.calls: list = []
        self._lock = threading.Lock()

    def generate(self, messages) -> str:
        with self._lock:
            self.calls.append(messages)
            if self.script is not None:
                if not self.script:
                    raise ClientError("mock script exhausted")
                item = self.script.pop(0)
                if isinstance(item, BaseException):
                    raise item
                return item
        if self.mode == "echo":
            return payload_text(messages)
        return _auto_response(messages)


# ------------------------------------------------------------------ http


def _png_data_url(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode()


def to_chat_completion(messages, model: str) -> dict:
    """OpenAI-style chat-completion request body."""
    out = []
    for m in messages:
        content = []
        for p in m["parts"]:
            if p["type"] == "text":
                content.append({"type": "text", "text": p["text"]})
            else:
                content.append({"type": "image_url", "image_url": {"url": _png_data_url(p["data"])}})
        out.append({"role": m["role"], "content": content})
    return {"model": model, "messages": out, "temperature": 0}


class HttpChatClient(VlmClient):
    def __init__(self, endpoint: str, model: str, token_env: str = "WATERLOG_API_TOKEN", timeout: float = 60.0,
                 session=None):
        import requests

        self.endpoint = endpoint
        self.model = model
        self.token = os.environ.get(token_env)
        self.timeout = timeout
        self.session = session or requests.Session()
        self._requests = requests

    def generate(self, messages) -> str:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        body = to_chat_completion(messages, self.model)
        try:
            resp = self.session.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
        except (self._requests.Timeout, self._requests.ConnectionError) as exc:
            raise RetriableError(f"request failed: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise RetriableError(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise ClientError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise ClientError(f"malformed response: {exc}") from exc


# ---------------------------------------------------------- wrappers


class RetryingClient(VlmClient):
    """Exponential-backoff retry on :class:`RetriableError`, timeouts and empty text."""

    def __init__(self, inner: VlmClient, max_retries: int = 3, backoff: float = 0.5, sleep=time.sleep):
        self.inner = inner
        self.max_retries = max_retries
        self.backoff = backoff
        self.sleep = sleep
        self.retries = 0

    def generate(self, messages) -> str:
        attempt = 0
        while True:
            try:
                text = self.inner.generate(messages)
                if not text or not text.strip():
                    raise RetriableError("empty response")
                return text
            except (RetriableError, TimeoutError) as exc:
                if attempt >= self.max_retries:
                    raise ClientError(f"giving up after {attempt + 1} attempts: {exc}") from exc
                delay = self.backoff * (2**attempt)
                self.retries += 1
                log.warning("retry %d after %s (sleep %.2fs)", attempt + 1, exc, delay)
                self.sleep(delay)
                attempt += 1


class RecordingClient(VlmClient):
    """Append every exchange to a JSONL transcript usable by :class:`ReplayClient`."""

    def __init__(self, inner: VlmClient, path):
        self.inner = inner
        self.path = Path(path)
        self._lock = threading.Lock()

    def generate(self, messages) -> str:
        text = self.inner.generate(messages)
        rec = {"key": payload_key(messages), "messages": serializable(messages), "response": text}
        with self._lock, open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return text


class ReplayClient(VlmClient):
    """Answer from a recorded transcript, keyed by payload digest."""

    def __init__(self, path):
        self.responses: dict[str, list[str]] = {}
        for line in Path(path).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                self.responses.setdefault(rec["key"], []).append(rec["response"])
        self._used: dict[str, int] = {}
        self._lock = threading.Lock()

    def generate(self, messages) -> str:
        key = payload_key(messages)
        with self._lock:
            answers = self.responses.get(key)
            if not answers:
                raise ClientError(f"no recorded response for payload {key[:12]}")
            i = self._used.get(key, 0)
            self._used[key] = i + 1
            return answers[min(i, len(answers) - 1)]


def build_client(ccfg) -> VlmClient:
    """Client from a :class:`~waterlog.config.ClientConfig`."""
    if ccfg.kind == "mock":
        client: VlmClient = MockClient()
    elif ccfg.kind == "http":
        client = HttpChatClient(ccfg.endpoint, ccfg.model, ccfg.token_env, ccfg.timeout)
    else:
        client = ReplayClient(ccfg.replay_path)
    if ccfg.record_path:
        client = RecordingClient(client, ccfg.record_path)
    return RetryingClient(client, ccfg.max_retries, ccfg.backoff)
