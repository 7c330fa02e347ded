"""Clients for the model services the pipeline consumes.

Four services are spoken to over HTTP/JSON:

* chat      POST {base}/v1/chat/completions  (chat-completions shape, images as data URLs)
* embed     POST {base}/v1/embeddings        {model, input: [b64]} -> data[0].embedding
* ground    POST {base}/ground               {image_b64, labels, box_threshold, text_threshold}
* ocr       POST {base}/ocr                  {image_b64} -> {text}

All requests are read-only, so retries are always safe.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import math
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import httpx
from PIL import Image

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


@dataclass(frozen=True)
class EndpointConfig:
    name: str
    base_url: str
    model_name: str = ""
    timeout: float = 60.0
    max_retries: int = 2
    temperature: float = 0.0
    max_output: int = 2048
    token: Optional[str] = field(default=None, repr=False)
    concurrency: int = 4
    backoff: float = 0.5

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError(f"{self.name}: timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError(f"{self.name}: max_retries must be >= 0")
        if self.temperature < 0:
            raise ValueError(f"{self.name}: temperature must be >= 0")
        if self.concurrency < 1:
            raise ValueError(f"{self.name}: concurrency must be >= 1")
        object.__setattr__(self, "base_url", self.base_url.rstrip("/"))

    def describe(self) -> dict:
        """Identity of the endpoint without secrets (used for digests and logs)."""
        return {
            "name": self.name,
            "base_url": self.base_url,
            "model_name": self.model_name,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
            "temperature": self.temperature,
            "max_output": self.max_output,
        }


# --- errors -------------------------------------------------------------


class GatewayError(Exception):
    def __init__(self, message: str, *, endpoint: str = "", operation: str = "", attempts: int = 0):
        self.endpoint = endpoint
        self.operation = operation
        self.attempts = attempts
        self.detail = message
        super().__init__(f"[{endpoint}/{operation} after {attempts} attempt(s)] {message}")


class TransportError(GatewayError):
    """Network failure or retryable status that survived every retry."""

    def __init__(self, message: str, *, status: Optional[int] = None, **kw):
        self.status = status
        super().__init__(message, **kw)


class GatewayTimeout(TransportError):
    pass


class StatusError(GatewayError):
    """Non-retryable non-2xx response."""

    def __init__(self, message: str, *, status: int, **kw):
        self.status = status
        super().__init__(message, **kw)


class MalformedResponse(GatewayError):
    pass


class GatewayConfigError(GatewayError):
    pass


class DetectionValidationError(GatewayError):
    pass


# --- images -------------------------------------------------------------


def image_size(image: bytes) -> tuple[int, int]:
    with Image.open(io.BytesIO(image)) as im:
        return im.size


def check_image(image: bytes) -> tuple[int, int]:
    """Fully decode an image payload; raises ``ValueError`` if it is unreadable."""
    try:
        with Image.open(io.BytesIO(image)) as im:
            im.load()
            return im.size
    except Exception as exc:
        raise ValueError(f"unreadable image: {exc}") from None


def encode_png(im: Image.Image) -> bytes:
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def _mime(image: bytes) -> str:
    if image.startswith(b"\xff\xd8"):
        return "image/jpeg"
    if image.startswith(b"RIFF") and image[8:12] == b"WEBP":
        return "image/webp"
    return "image/png"


def b64(image: bytes) -> str:
    return base64.b64encode(image).decode("ascii")


def data_url(image: bytes) -> str:
    return f"data:{_mime(image)};base64,{b64(image)}"


def _check_box(box: Sequence[float], width: int, height: int) -> None:
    if len(box) != 4:
        raise ValueError(f"box must have 4 coordinates, got {list(box)}")
    x0, y0, x1, y1 = box
    if not all(math.isfinite(v) for v in box):
        raise ValueError(f"non-finite box {list(box)}")
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise ValueError(f"box {list(box)} outside image {width}x{height}")
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"degenerate box {list(box)}")


def crop(image: bytes, box: Sequence[float]) -> bytes:
    """Cut the pixel extent of ``box`` out of ``image`` and return it as PNG."""
    with Image.open(io.BytesIO(image)) as im:
        im.load()
        _check_box(box, *im.size)
        x0, y0 = math.floor(box[0]), math.floor(box[1])
        x1, y1 = math.ceil(box[2]), math.ceil(box[3])
        return encode_png(im.crop((x0, y0, x1, y1)))


@dataclass(frozen=True)
class Detection:
    label: str
    box: tuple[float, float, float, float]
    confidence: float

    def to_dict(self) -> dict:
        return {"label": self.label, "box": list(self.box), "confidence": self.confidence}


# --- request construction (shared with fixture writers) -----------------


@dataclass(frozen=True)
class RequestSpec:
    method: str
    url: str
    json: Optional[dict] = None
    params: Optional[dict] = None


def chat_request(endpoint: EndpointConfig, prompt: str, images: Sequence[bytes]) -> RequestSpec:
    content: list[dict] = [{"type": "image_url", "image_url": {"url": data_url(img)}} for img in images]
    content.append({"type": "text", "text": prompt})
    body = {
        "model": endpoint.model_name,
        "messages": [{"role": "user", "content": content}],
        "temperature": endpoint.temperature,
        "max_tokens": endpoint.max_output,
    }
    return RequestSpec("POST", f"{endpoint.base_url}/v1/chat/completions", json=body)


def embed_request(endpoint: EndpointConfig, image: bytes) -> RequestSpec:
    return RequestSpec(
        "POST", f"{endpoint.base_url}/v1/embeddings", json={"model": endpoint.model_name, "input": [b64(image)]}
    )


def ground_request(
    endpoint: EndpointConfig, image: bytes, labels: Sequence[str], box_threshold: float, text_threshold: float
) -> RequestSpec:
    body = {
        "image_b64": b64(image),
        "labels": list(labels),
        "box_threshold": box_threshold,
        "text_threshold": text_threshold,
    }
    return RequestSpec("POST", f"{endpoint.base_url}/ground", json=body)


def ocr_request(endpoint: EndpointConfig, image: bytes) -> RequestSpec:
    return RequestSpec("POST", f"{endpoint.base_url}/ocr", json={"image_b64": b64(image)})


# --- client -------------------------------------------------------------


class CallCounter:
    """Thread-safe tally of outbound requests, keyed by caller-chosen tags."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts: Counter = Counter()

    def add(self, key: str, n: int = 1) -> None:
        with self._lock:
            self._counts[key] += n

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(sorted(self._counts.items()))

    def __getitem__(self, key: str) -> int:
        with self._lock:
            return self._counts.get(key, 0)


class Gateway:
    """Shared HTTP client for every model endpoint.

    ``transport`` lets tests plug in :class:`FixtureTransport` or an
    ``httpx.MockTransport``; ``sleep`` is the backoff hook.
    """

    def __init__(
        self,
        transport: Optional[httpx.BaseTransport] = None,
        *,
        counter: Optional[CallCounter] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._http = httpx.Client(transport=transport)
        self.counter = counter or CallCounter()
        self._sleep = sleep
        self._caps: dict[str, threading.BoundedSemaphore] = {}
        self._caps_lock = threading.Lock()

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _cap(self, endpoint: EndpointConfig) -> threading.BoundedSemaphore:
        with self._caps_lock:
            sem = self._caps.get(endpoint.name)
            if sem is None:
                sem = self._caps[endpoint.name] = threading.BoundedSemaphore(endpoint.concurrency)
            return sem

    def send(
        self,
        endpoint: EndpointConfig,
        operation: str,
        spec: RequestSpec,
        *,
        tag: Optional[str] = None,
        headers: Optional[dict] = None,
        raw: bool = False,
    ) -> Any:
        """Issue ``spec`` with retries and return the decoded JSON body (or text when ``raw``)."""
        headers = dict(headers or {})
        if endpoint.token:
            headers["Authorization"] = f"Bearer {endpoint.token}"
        tag = tag or endpoint.name
        attempts = 0
        last: Optional[GatewayError] = None
        ctx = {"endpoint": endpoint.name, "operation": operation}
        with self._cap(endpoint):
            while attempts <= endpoint.max_retries:
                if attempts:
                    self._sleep(endpoint.backoff * 2 ** (attempts - 1))
                attempts += 1
                self.counter.add(tag)
                try:
                    resp = self._http.request(
                        spec.method,
                        spec.url,
                        json=spec.json,
                        params=spec.params,
                        headers=headers,
                        timeout=endpoint.timeout,
                    )
                except httpx.TimeoutException as exc:
                    last = GatewayTimeout(f"timeout: {exc}", attempts=attempts, **ctx)
                    logger.warning("%s", last)
                    continue
                except httpx.TransportError as exc:
                    last = TransportError(f"{type(exc).__name__}: {exc}", attempts=attempts, **ctx)
                    logger.warning("%s", last)
                    continue
                if resp.status_code in RETRYABLE_STATUS:
                    last = TransportError(f"HTTP {resp.status_code}", status=resp.status_code, attempts=attempts, **ctx)
                    logger.warning("%s", last)
                    continue
                if not 200 <= resp.status_code < 300:
                    raise StatusError(
                        f"HTTP {resp.status_code}: {resp.text[:200]}", status=resp.status_code, attempts=attempts, **ctx
                    )
                if raw:
                    return resp.text
                try:
                    return resp.json()
                except ValueError:
                    raise MalformedResponse(f"non-JSON body: {resp.text[:200]!r}", attempts=attempts, **ctx) from None
        assert last is not None
        raise last

    # operations --------------------------------------------------------

    def chat_vision(self, endpoint: EndpointConfig, prompt: str, images: Sequence[bytes] = (), *, tag=None) -> str:
        if not prompt.strip():
            raise ValueError("prompt must be nonempty")
        body = self.send(endpoint, "chat_vision", chat_request(endpoint, prompt, images), tag=tag)
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponse(
                "missing choices[0].message.content", endpoint=endpoint.name, operation="chat_vision", attempts=1
            ) from None
        if not isinstance(text, str):
            raise MalformedResponse(
                "message content is not a string", endpoint=endpoint.name, operation="chat_vision", attempts=1
            )
        return text

    def embed_image(
        self, endpoint: EndpointConfig, image: bytes, *, expected_dim: Optional[int] = None, tag=None
    ) -> list[float]:
        body = self.send(endpoint, "embed_image", embed_request(endpoint, image), tag=tag)
        ctx = {"endpoint": endpoint.name, "operation": "embed_image", "attempts": 1}
        try:
            vec = body["data"][0]["embedding"]
            vec = [float(v) for v in vec]
        except (KeyError, IndexError, TypeError, ValueError):
            raise MalformedResponse("missing or non-numeric data[0].embedding", **ctx) from None
        if not vec:
            raise MalformedResponse("empty embedding", **ctx)
        if expected_dim is not None and len(vec) != expected_dim:
            raise GatewayConfigError(f"embedding dim {len(vec)} does not match index dim {expected_dim}", **ctx)
        return vec

    def ground(
        self,
        endpoint: EndpointConfig,
        image: bytes,
        labels: Sequence[str],
        box_threshold: float = 0.5,
        text_threshold: float = 0.5,
        *,
        tag=None,
    ) -> list[Detection]:
        if not labels:
            raise ValueError("labels must be nonempty")
        for name, v in (("box_threshold", box_threshold), ("text_threshold", text_threshold)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        width, height = image_size(image)
        body = self.send(
            endpoint, "ground", ground_request(endpoint, image, labels, box_threshold, text_threshold), tag=tag
        )
        ctx = {"endpoint": endpoint.name, "operation": "ground", "attempts": 1}
        try:
            raw = body["detections"]
            detections = [
                Detection(str(d["label"]), tuple(float(v) for v in d["box"]), float(d["score"])) for d in raw
            ]
        except (KeyError, TypeError, ValueError):
            raise MalformedResponse("malformed detections list", **ctx) from None
        for det in detections:
            try:
                _check_box(det.box, width, height)
            except ValueError as exc:
                raise DetectionValidationError(f"{det.label}: {exc}", **ctx) from None
            if not 0.0 <= det.confidence <= 1.0:
                raise DetectionValidationError(f"{det.label}: confidence {det.confidence} outside [0, 1]", **ctx)
        return detections

    def ocr(self, endpoint: EndpointConfig, image: bytes, *, tag=None) -> str:
        body = self.send(endpoint, "ocr", ocr_request(endpoint, image), tag=tag)
        try:
            text = body["text"]
        except (KeyError, TypeError):
            raise MalformedResponse("missing text", endpoint=endpoint.name, operation="ocr", attempts=1) from None
        if not isinstance(text, str):
            raise MalformedResponse("text is not a string", endpoint=endpoint.name, operation="ocr", attempts=1)
        return text.strip()


# --- deterministic fixture transport ------------------------------------


class UnknownFixtureError(AssertionError):
    """A request with no recorded response reached the fixture transport."""


def _canonical_body(content: bytes) -> Any:
    if not content:
        return None
    try:
        return json.loads(content)
    except ValueError:
        return hashlib.sha256(content).hexdigest()


def request_digest(method: str, url: str, params: Optional[dict] = None, body: Any = None) -> str:
    """Stable digest of a request: method, host, path, sorted query and JSON body."""
    u = httpx.URL(url, params=params) if params else httpx.URL(url)
    query = sorted(u.params.multi_items())
    key = json.dumps(
        {"method": method.upper(), "host": u.host, "port": u.port, "path": u.path, "query": query, "body": body},
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(key.encode("utf-8")).hexdigest()


def spec_digest(spec: RequestSpec) -> str:
    return request_digest(spec.method, spec.url, spec.params, spec.json)


def _digest_httpx(request: httpx.Request) -> str:
    return request_digest(request.method, str(request.url), None, _canonical_body(request.content))


def _elide(value: Any) -> Any:
    """Shorten base64 blobs so fixture files stay readable."""
    if isinstance(value, dict):
        return {k: _elide(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_elide(v) for v in value]
    if isinstance(value, str) and len(value) > 120:
        return f"<{len(value)} chars sha256:{hashlib.sha256(value.encode()).hexdigest()[:12]}>"
    return value


@dataclass(frozen=True)
class CallRecord:
    method: str
    host: str
    path: str
    digest: str


class FixtureStore:
    """A directory of ``<digest>.json`` response files."""

    def __init__(self, root):
        from pathlib import Path

        self.root = Path(root)

    def path_for(self, digest: str):
        return self.root / f"{digest}.json"

    def put(self, digest: str, status: int, body: Any, request_summary: Optional[dict] = None) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        doc = {"request": request_summary or {}, "status": status, "body": body}
        self.path_for(digest).write_text(json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False) + "\n")

    def add(self, spec: RequestSpec, body: Any, status: int = 200) -> str:
        digest = spec_digest(spec)
        summary = {"method": spec.method, "url": spec.url, "params": spec.params, "json": _elide(spec.json)}
        self.put(digest, status, body, summary)
        return digest

    def get(self, digest: str) -> Optional[dict]:
        p = self.path_for(digest)
        if not p.exists():
            return None
        return json.loads(p.read_text())


class FixtureTransport(httpx.BaseTransport):
    """Replays recorded responses by request digest and logs every call."""

    def __init__(self, root):
        self.store = FixtureStore(root)
        self._lock = threading.Lock()
        self.calls: list[CallRecord] = []

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        request.read()
        digest = _digest_httpx(request)
        with self._lock:
            self.calls.append(CallRecord(request.method, request.url.host, request.url.path, digest))
            doc = self.store.get(digest)
        if doc is None:
            raise UnknownFixtureError(f"no fixture for {request.method} {request.url} (digest {digest})")
        return httpx.Response(doc["status"], json=doc["body"], request=request)

    def calls_by_host(self) -> dict[str, int]:
        with self._lock:
            return dict(Counter(c.host for c in self.calls))


class RecordingTransport(httpx.BaseTransport):
    """Answers via ``handler(request) -> (status, body)`` and writes each exchange to a store."""

    def __init__(self, handler: Callable[[httpx.Request], tuple[int, Any]], root):
        self.handler = handler
        self.store = FixtureStore(root)
        self._lock = threading.Lock()

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        request.read()
        status, body = self.handler(request)
        digest = _digest_httpx(request)
        summary = {
            "method": request.method,
            "url": str(request.url),
            "json": _elide(_canonical_body(request.content)),
        }
        with self._lock:
            self.store.put(digest, status, body, summary)
        return httpx.Response(status, json=body, request=request)
