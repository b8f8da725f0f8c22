"""Access to chat, embedding, image-generation and OOD-probability services.

Live providers speak JSON over HTTP (OpenAI-compatible for chat and
embeddings). Mock providers are deterministic functions of their inputs and
back every offline run and test.
"""
from __future__ import annotations

import hashlib
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import httpx
import numpy as np

from pas.errors import ProtocolError, TransportError
from pas.io import stable_hex, stable_int

log = logging.getLogger(__name__)

KINDS = ("chat", "text_embed", "image_embed", "image_gen", "ood_prob")
BACKOFF_BASE = 0.25
BACKOFF_CAP = 8.0
PROB_SUM_TOL = 1e-6


def offline_mode() -> bool:
    return os.environ.get("PAS_OFFLINE", "") not in ("", "0")


@dataclass(frozen=True)
class ProviderEndpoint:
    kind: str
    base_url: str = ""
    model_name: str = ""
    auth_token: str | None = field(default=None, repr=False)
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4

    def violations(self, where: str = "endpoint") -> list[str]:
        out = []
        if self.kind not in KINDS:
            out.append(f"{where}: unknown kind {self.kind!r}")
        if not self.timeout > 0:
            out.append(f"{where}: timeout must be > 0")
        if self.max_retries < 0:
            out.append(f"{where}: max_retries must be >= 0")
        if self.max_in_flight < 1:
            out.append(f"{where}: max_in_flight must be >= 1")
        return out

    @classmethod
    def from_json(cls, row: Mapping) -> "ProviderEndpoint":
        return cls(
            kind=row["kind"],
            base_url=row.get("base_url", ""),
            model_name=row.get("model_name", ""),
            auth_token=row.get("auth_token"),
            timeout=float(row.get("timeout", 60.0)),
            max_retries=int(row.get("max_retries", 3)),
            max_in_flight=int(row.get("max_in_flight", 4)),
        )

    def to_json(self, redact: bool = True) -> dict:
        return {
            "kind": self.kind,
            "base_url": self.base_url,
            "model_name": self.model_name,
            "auth_token": ("***" if self.auth_token else None) if redact else self.auth_token,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
            "max_in_flight": self.max_in_flight,
        }


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple((r, t) for r, t in self.messages))
        if not self.messages:
            raise ValueError("chat request needs at least one message")
        if self.messages[0][0] not in ("system", "user"):
            raise ValueError("first message must come from system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")

    @property
    def prompt(self) -> str:
        return self.messages[-1][1]


@dataclass(frozen=True)
class OODProbRow:
    image_id: str
    p: np.ndarray
    p_no: np.ndarray

    def check(self, n_concepts: int | None = None) -> "OODProbRow":
        p, p_no = self.p, self.p_no
        if p.ndim != 1 or p.shape != p_no.shape:
            raise ProtocolError(f"image {self.image_id}: p/p_no shapes {p.shape} vs {p_no.shape}")
        if n_concepts is not None and len(p) != n_concepts:
            raise ProtocolError(f"image {self.image_id}: {len(p)} probabilities for {n_concepts} concepts")
        for name, v in (("p", p), ("p_no", p_no)):
            if not np.all(np.isfinite(v)) or v.min(initial=0.0) < 0 or v.max(initial=0.0) > 1:
                raise ProtocolError(f"image {self.image_id}: {name} has entries outside [0,1]")
        if abs(float(p.sum()) - 1.0) > PROB_SUM_TOL:
            raise ProtocolError(f"image {self.image_id}: p sums to {float(p.sum())!r}")
        return self

    @classmethod
    def from_json(cls, row: Mapping) -> "OODProbRow":
        return cls(str(row["image_id"]), np.asarray(row["p"], dtype=np.float64),
                   np.asarray(row["p_no"], dtype=np.float64))


@dataclass
class GenerationResult:
    uris: list[str]
    errors: int = 0


# -- provider plumbing ------------------------------------------------------

class Provider:
    """Shared bookkeeping: admission limit and a thread-safe call counter."""

    kind = ""

    def __init__(self, model_name: str = "", max_in_flight: int = 4):
        self.model_name = model_name
        self.calls = 0
        self._count_lock = threading.Lock()
        self._admission = threading.BoundedSemaphore(max(1, max_in_flight))

    def _count(self) -> None:
        with self._count_lock:
            self.calls += 1

    def _require(self, *kinds: str) -> None:
        if self.kind not in kinds:
            raise ProtocolError(f"{type(self).__name__} of kind {self.kind!r} cannot serve {'/'.join(kinds)}")


def backoff_delay(attempt: int, rng: random.Random) -> float:
    """Full-jitter exponential backoff for retry ``attempt`` (0-based)."""
    return rng.uniform(0, min(BACKOFF_CAP, BACKOFF_BASE * (2 ** attempt)))


_RETRY_STATUS = {408, 425, 429, 500, 502, 503, 504}


class HttpProvider(Provider):
    def __init__(self, endpoint: ProviderEndpoint, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        super().__init__(endpoint.model_name, endpoint.max_in_flight)
        problems = endpoint.violations()
        if problems:
            raise ValueError("; ".join(problems))
        self.endpoint = endpoint
        self.kind = endpoint.kind
        headers = {"Authorization": f"Bearer {endpoint.auth_token}"} if endpoint.auth_token else {}
        self._client = client or httpx.Client(timeout=endpoint.timeout)
        self._headers = headers
        self._sleep = sleep
        self._rng = random.Random(stable_int(endpoint.base_url, endpoint.model_name))
        self.attempts = 0

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        url = self.endpoint.base_url.rstrip("/") + path
        last: Exception | None = None
        self._count()
        with self._admission:
            for attempt in range(self.endpoint.max_retries + 1):
                if attempt:
                    self._sleep(backoff_delay(attempt - 1, self._rng))
                with self._count_lock:
                    self.attempts += 1
                try:
                    resp = self._client.post(url, json=payload, headers=self._headers,
                                             timeout=self.endpoint.timeout)
                except httpx.TransportError as exc:
                    last = exc
                    continue
                if resp.status_code in _RETRY_STATUS:
                    last = ProtocolError(f"{url}: HTTP {resp.status_code}", resp.status_code, resp.text[:500])
                    continue
                if not 200 <= resp.status_code < 300:
                    raise ProtocolError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}",
                                        resp.status_code, resp.text[:500])
                try:
                    return resp.json()
                except ValueError as exc:
                    raise ProtocolError(f"{url}: reply is not JSON", resp.status_code, resp.text[:500]) from exc
        if isinstance(last, ProtocolError):
            raise last
        raise TransportError(f"{url}: gave up after {self.endpoint.max_retries + 1} attempts: {last}")

    def complete(self, request: ChatRequest) -> str:
        self._require("chat")
        body = self._post("/v1/chat/completions", {
            "model": self.endpoint.model_name,
            "messages": [{"role": r, "content": t} for r, t in request.messages],
            "temperature": request.temperature,
            "seed": request.seed,
        })
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed chat reply: {str(body)[:200]}") from exc
        if not isinstance(text, str):
            raise ProtocolError("chat reply content is not text")
        return text

    def embed(self, items: Sequence[str]) -> list[np.ndarray | None]:
        self._require("text_embed", "image_embed")
        body = self._post("/v1/embeddings", {"model": self.endpoint.model_name, "input": list(items)})
        try:
            data = sorted(body["data"], key=lambda d: d["index"])
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed embedding reply: {str(body)[:200]}") from exc
        if len(data) != len(items):
            raise ProtocolError(f"{len(data)} embeddings for {len(items)} inputs")
        return [None if d.get("embedding") is None else np.asarray(d["embedding"], dtype=np.float64)
                for d in data]

    def generate(self, prompt: str, n: int, seed: int) -> GenerationResult:
        self._require("image_gen")
        body = self._post("/generate", {"prompt": prompt, "n": n, "seed": seed})
        uris = body.get("uris") if isinstance(body, dict) else None
        if not isinstance(uris, list):
            raise ProtocolError(f"malformed generation reply: {str(body)[:200]}")
        ok = [u for u in uris if isinstance(u, str) and u]
        return GenerationResult(ok, int(body.get("errors", 0)) + (n - len(ok) if len(ok) < n else 0))

    def ood_probs(self, image_uris: Sequence[str], concepts: Sequence[str]) -> list[OODProbRow]:
        self._require("ood_prob")
        body = self._post("/ood_probs", {"image_uris": list(image_uris), "concepts": list(concepts)})
        rows = body.get("rows", body) if isinstance(body, dict) else body
        if not isinstance(rows, list):
            raise ProtocolError(f"malformed OOD reply: {str(body)[:200]}")
        try:
            return [OODProbRow.from_json(r) for r in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed OOD row: {exc}") from exc


# -- mocks ------------------------------------------------------------------

def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def fingerprint(kind: str, seed: int, prompt: str) -> tuple[str, int, str]:
    return (kind, seed, prompt_hash(prompt))


class MockMiss(KeyError):
    """A scripted mock was asked something its script does not cover."""


class ScriptedChat(Provider):
    """Replies looked up by (kind, seed, hash of the last message)."""

    kind = "chat"

    def __init__(self, script: Mapping[tuple[str, int, str], str], model_name: str = "scripted"):
        super().__init__(model_name)
        self.script = dict(script)

    def complete(self, request: ChatRequest) -> str:
        self._count()
        key = fingerprint("chat", request.seed, request.prompt)
        if key not in self.script:
            raise MockMiss(f"no scripted reply for seed={request.seed} prompt={request.prompt[:60]!r}")
        return self.script[key]


class FunctionChat(Provider):
    """Replies computed by ``fn(request)``; the function must be deterministic."""

    kind = "chat"

    def __init__(self, fn: Callable[[ChatRequest], str], model_name: str = "function"):
        super().__init__(model_name)
        self.fn = fn
        self.requests: list[ChatRequest] = []
        self._log_lock = threading.Lock()

    def complete(self, request: ChatRequest) -> str:
        self._count()
        with self._log_lock:
            self.requests.append(request)
        return self.fn(request)


_ADJECTIVES = ("golden", "crimson", "spotted", "alpine", "coastal", "smoky", "northern", "royal",
               "little", "striped", "desert", "velvet")
_NOUNS = ("finch", "heron", "plover", "warbler", "kestrel", "lark", "tern", "owl", "wren", "ibis",
          "curlew", "shrike")
_SCENES = ("at dawn near a misty river", "on a crowded market table", "under soft studio light",
           "beside a weathered wooden fence", "in the middle of a snowy field", "on a sunlit balcony")


class OfflineChat(Provider):
    """Stand-in language model for offline runs.

    Routes on the phrasing of the default prompt templates: verdict requests,
    caption requests, expansion requests ("similar to"), broad category lists,
    and everything else as concept generation over a fixed universe.
    """

    kind = "chat"

    def __init__(self, model_name: str = "offline-chat", universe: int = 50, sample: int = 12,
                 reject: Sequence[str] = ()):
        super().__init__(model_name)
        rng = random.Random(1234)
        names = [f"{a.title()} {n.title()}" for a in _ADJECTIVES for n in _NOUNS]
        rng.shuffle(names)
        self.universe = names[:universe]
        self.sample = sample
        self.reject = tuple(s.lower() for s in reject)

    def complete(self, request: ChatRequest) -> str:
        self._count()
        prompt = request.prompt
        low = prompt.lower()
        rng = random.Random(stable_int(self.model_name, request.seed, prompt))
        if "yes or no" in low:
            concept = _quoted(prompt) or ""
            return "No." if any(s in concept.lower() for s in self.reject) else "Yes."
        if "caption" in low:
            concept = _quoted(prompt) or "the subject"
            return f"A {concept.lower()} {rng.choice(_SCENES)}."
        if "similar to" in low:
            concept = _quoted(prompt) or ""
            if concept not in self.universe:
                return ""
            i = self.universe.index(concept)
            sib = self.universe[i + 1:i + 4]
            return "\n".join(f"- {s}" for s in sib)
        if "general object categories" in low:
            return "\n".join(f"{n}. {w}" for n, w in enumerate(
                ("animal", "plant", "building", "vehicle", "person", "food", "tool", "text", "landscape"), 1))
        pool = self.universe[: max(1, int(len(self.universe) * 0.6))]
        picked = rng.sample(pool, min(self.sample, len(pool)))
        return "Here are some concepts:\n" + "\n".join(f"{n}. {c}" for n, c in enumerate(picked, 1))


def _quoted(text: str) -> str | None:
    m = re.search(r'"([^"]+)"', text)
    return m.group(1) if m else None


class HashEmbedder(Provider):
    """Maps each item to a pseudo-random unit vector seeded by its hash."""

    def __init__(self, dim: int = 128, kind: str = "text_embed", model_name: str = "hash-embed",
                 overrides: Mapping[str, np.ndarray] | None = None):
        super().__init__(model_name)
        self.kind = kind
        self.dim = dim
        self.overrides = dict(overrides or {})

    def vector(self, item: str) -> np.ndarray:
        if item in self.overrides:
            return np.asarray(self.overrides[item], dtype=np.float64)
        v = np.random.default_rng(stable_int(self.model_name, item)).standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed(self, items: Sequence[str]) -> list[np.ndarray | None]:
        self._count()
        return [self.vector(i) for i in items]


class MockImageGen(Provider):
    kind = "image_gen"

    def __init__(self, model_name: str = "mock-gen", fail: Callable[[str, int, int], bool] | None = None):
        super().__init__(model_name)
        self.fail = fail

    def generate(self, prompt: str, n: int, seed: int) -> GenerationResult:
        self._count()
        uris, errors = [], 0
        for i in range(n):
            if self.fail is not None and self.fail(prompt, seed, i):
                errors += 1
                continue
            uris.append(f"mock://synth/{stable_hex(prompt, seed, i)}.png")
        return GenerationResult(uris, errors)


class MockOOD(Provider):
    """Deterministic probability rows; a row depends only on (uri, concept list)."""

    kind = "ood_prob"

    def __init__(self, model_name: str = "mock-ood", outlier_rate: float = 0.15):
        super().__init__(model_name)
        self.outlier_rate = outlier_rate

    def row(self, uri: str, concepts: Sequence[str], tag: str) -> OODProbRow:
        rng = np.random.default_rng(stable_int(self.model_name, uri, tag))
        logits = rng.standard_normal(len(concepts)) * 2.0
        p = np.exp(logits - logits.max())
        p /= p.sum()
        outlier = rng.random() < self.outlier_rate
        p_no = rng.beta(5.0, 1.5, len(concepts)) if outlier else rng.beta(1.2, 6.0, len(concepts))
        return OODProbRow(uri, p, p_no)

    def ood_probs(self, image_uris: Sequence[str], concepts: Sequence[str]) -> list[OODProbRow]:
        self._count()
        tag = stable_hex(*concepts)
        return [self.row(u, concepts, tag) for u in image_uris]


class FailingProvider(Provider):
    """Raises TransportError for every call; for failure-path tests."""

    def __init__(self, kind: str, model_name: str = "failing"):
        super().__init__(model_name)
        self.kind = kind

    def _fail(self, *args, **kwargs):
        self._count()
        raise TransportError(f"{self.model_name}: unreachable")

    complete = embed = generate = ood_probs = _fail


def make_provider(endpoint: ProviderEndpoint, offline: bool | None = None, **mock_options) -> Provider:
    """Live HTTP provider for ``endpoint``, or its mock when offline."""
    if offline is None:
        offline = offline_mode()
    if not offline:
        return HttpProvider(endpoint)
    name = endpoint.model_name or f"offline-{endpoint.kind}"
    if endpoint.kind == "chat":
        return OfflineChat(name, **mock_options)
    if endpoint.kind in ("text_embed", "image_embed"):
        return HashEmbedder(mock_options.get("dim", 128), endpoint.kind, name)
    if endpoint.kind == "image_gen":
        return MockImageGen(name)
    if endpoint.kind == "ood_prob":
        return MockOOD(name)
    raise ValueError(f"unknown provider kind {endpoint.kind!r}")


def _as_provider(p) -> Provider:
    return HttpProvider(p) if isinstance(p, ProviderEndpoint) else p


# -- operations ---------------------------------------------------------------

def chat_complete(provider, request: ChatRequest) -> str:
    return _as_provider(provider).complete(request)


def embed_batch(provider, items: Sequence[str], batch_size: int = 64) -> list[np.ndarray | None]:
    """One raw vector per item (``None`` where the service failed that item)."""
    if not items:
        raise ValueError("nothing to embed")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    provider = _as_provider(provider)
    out: list[np.ndarray | None] = []
    for start in range(0, len(items), batch_size):
        out.extend(provider.embed(items[start:start + batch_size]))
    if len(out) != len(items):
        raise ProtocolError(f"{len(out)} embeddings for {len(items)} items")
    dims = {v.shape for v in out if v is not None}
    if len(dims) > 1:
        raise ProtocolError(f"inconsistent embedding dimensions {sorted(dims)}")
    return out


def generate_images(provider, prompt: str, n: int, seed: int) -> GenerationResult:
    if n < 1:
        raise ValueError("n must be positive")
    result = _as_provider(provider).generate(prompt, n, seed)
    if not result.uris:
        raise ProtocolError(f"image generation produced nothing for {prompt[:60]!r}")
    return result


def ood_probabilities(provider, image_uris: Sequence[str], concept_list: Sequence[str],
                      batch_size: int = 100) -> list[OODProbRow]:
    if not concept_list:
        raise ValueError("concept list is empty")
    provider = _as_provider(provider)
    rows: list[OODProbRow] = []
    for start in range(0, len(image_uris), batch_size):
        chunk = image_uris[start:start + batch_size]
        got = provider.ood_probs(chunk, concept_list)
        if len(got) != len(chunk):
            raise ProtocolError(f"{len(got)} OOD rows for {len(chunk)} images")
        rows.extend(r.check(len(concept_list)) for r in got)
    return rows


# -- reply parsing ------------------------------------------------------------

_MARKER = re.compile(r"^\s*(?:[-*•+>]+|\(?\d+[.)\]:]|\(?[a-zA-Z][.)](?=\s))\s*")
_PREAMBLE = re.compile(r":\s*$")


def parse_concept_list(reply: str) -> list[str]:
    """Concept strings from a list-shaped reply, in order of first appearance.

    An empty result is the empty-reply signal.
    """
    out: list[str] = []
    seen: set[str] = set()
    for raw in (reply or "").splitlines():
        line = raw.strip()
        if not line or _PREAMBLE.search(line):
            continue
        had_marker = bool(_MARKER.match(line))
        line = _MARKER.sub("", line, count=1).strip()
        line = line.replace("**", "").replace("__", "").strip()
        if had_marker:
            # "Paella: saffron rice dish" / "Paella - rice" -> "Paella"
            line = re.split(r"\s+[-–—]\s+|:\s+", line, maxsplit=1)[0]
        parts = [line]
        if "," in line:
            parts = [p.strip() for p in line.split(",")]
            parts = [re.sub(r"^(?:and|or)\s+", "", p) for p in parts]
        for part in parts:
            part = part.strip().strip("\"'`“”‘’").strip().rstrip(".;")
            if part and part not in seen:
                seen.add(part)
                out.append(part)
    return out


_AFFIRM = {"true", "yes"}
_NEGATE = {"false", "no"}


def parse_bool_verdict(reply: str) -> bool | None:
    """True/False from the first decisive token, ``None`` when unparseable."""
    for tok in re.findall(r"[a-z]+", (reply or "").lower()):
        if tok in _AFFIRM:
            return True
        if tok in _NEGATE:
            return False
    return None
