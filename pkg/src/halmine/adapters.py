"""Model adapter contracts and the evaluation operations built on them.

Five adapter families feed the pipeline: a yes/no VLM, an open-vocabulary
detector, a conditioned single-step image generator, text/image embedders
(semantic and perceptual) and a query-writing chat LLM. Remote adapters
speak a minimal JSON request/response protocol over HTTP; synthetic stubs
(see :mod:`halmine.stubs`) implement the same contracts deterministically.
"""
from __future__ import annotations

import base64
import json
import threading
import urllib.error
import urllib.request
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .prompts import MAIN_TEMPLATE_ID, QuestionBank
from .types import Evaluation, ObjectSpec


class AdapterError(Exception):
    """Non-retryable adapter failure (bad dimensions, bad configuration)."""


class AdapterTransportError(AdapterError):
    """Retryable transport failure; distinct from an invalid model answer."""


@dataclass(frozen=True)
class VlmCapabilities:
    answer_only: bool = False
    yes_probability: bool = True
    differentiable: bool = False

    def __post_init__(self) -> None:
        if self.differentiable and not self.yes_probability:
            raise AdapterError("a differentiable VLM must expose yes-probabilities")


@dataclass(frozen=True)
class VlmReply:
    text: str
    p_yes: Optional[float] = None       # renormalized over {yes, no} answer tokens
    p_yes_raw: Optional[float] = None   # raw affirmative-token probability


class VlmAdapter(ABC):
    model_id: str
    capabilities: VlmCapabilities = VlmCapabilities()
    max_concurrency: Optional[int] = None

    @abstractmethod
    def answer(self, image: bytes, question: str, *, object_name: Optional[str] = None) -> VlmReply:
        """Reply to a yes/no question about the image.

        ``object_name`` is a hint for synthetic stubs; real adapters only see
        the rendered question.
        """


class DetectorAdapter(ABC):
    model_id: str
    score_only: bool = True
    differentiable: bool = False
    max_concurrency: Optional[int] = None

    @abstractmethod
    def propose(self, image: bytes, object_name: str) -> Sequence[float]:
        """Per-region confidences for the object; may be empty."""


class GeneratorAdapter(ABC):
    model_id: str
    latent_dim: int
    text_dims: tuple
    deterministic: bool = True
    max_concurrency: Optional[int] = None

    @abstractmethod
    def generate(self, conditioning: "Conditioning") -> bytes:
        """Render the image for the given conditioning."""

    def encode_prompt(self, text: str) -> list:
        """Text-conditioning vectors for a prompt, one per declared text dim."""
        raise AdapterError(f"generator {self.model_id} has no prompt encoder")


class EmbedderAdapter(ABC):
    model_id: str
    dim: int
    max_concurrency: Optional[int] = None

    @abstractmethod
    def embed_text(self, text: str) -> np.ndarray:
        """Unit-norm embedding of a text query."""

    @abstractmethod
    def embed_image(self, image: bytes) -> np.ndarray:
        """Unit-norm embedding of image bytes."""


class PerceptualAdapter(ABC):
    """Perceptual similarity for near-duplicate checks; symmetric, in [0, 1]."""

    model_id: str
    max_concurrency: Optional[int] = None

    @abstractmethod
    def embed(self, image: bytes) -> np.ndarray:
        ...

    @abstractmethod
    def similarity(self, a: np.ndarray, b: np.ndarray) -> float:
        ...


class LlmAdapter(ABC):
    model_id: str
    max_concurrency: Optional[int] = None

    @abstractmethod
    def chat(self, messages: Sequence[dict]) -> str:
        """Messages are {"role": system|user|assistant, "content": str}."""


@dataclass
class Conditioning:
    """Inputs that deterministically fix the generator output."""

    latent: np.ndarray
    text_conditionings: list
    init_prompt_id: Optional[str] = None

    def __post_init__(self) -> None:
        self.latent = np.asarray(self.latent, dtype=np.float64)
        self.text_conditionings = [np.asarray(t, dtype=np.float64) for t in self.text_conditionings]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.latent] + list(self.text_conditionings))

    def copy(self) -> "Conditioning":
        return Conditioning(
            self.latent.copy(),
            [t.copy() for t in self.text_conditionings],
            self.init_prompt_id,
        )

    @classmethod
    def unflatten(cls, values: np.ndarray, latent_dim: int, text_dims: Sequence[int],
                  init_prompt_id: Optional[str] = None) -> "Conditioning":
        values = np.asarray(values, dtype=np.float64)
        parts, off = [], latent_dim
        latent = values[:latent_dim]
        for d in text_dims:
            parts.append(values[off:off + d])
            off += d
        if off != values.size:
            raise AdapterError(f"conditioning size {values.size} does not match {latent_dim}+{tuple(text_dims)}")
        return cls(latent, parts, init_prompt_id)


def check_conditioning(gen: GeneratorAdapter, c: Conditioning) -> None:
    if c.latent.shape != (gen.latent_dim,):
        raise AdapterError(f"latent dim {c.latent.shape} != declared ({gen.latent_dim},)")
    dims = tuple(t.shape[0] for t in c.text_conditionings)
    if dims != tuple(gen.text_dims):
        raise AdapterError(f"text conditioning dims {dims} != declared {tuple(gen.text_dims)}")


# Optional differentiable surfaces implemented by the synthetic stubs. The
# optimizer requires these; real adapters may provide them via their own
# backends.

class DifferentiableVlm(ABC):
    @abstractmethod
    def p_yes_and_grad(self, x: np.ndarray, object_name: str) -> tuple:
        """(p_yes, d p_yes / d x) for an image given as a parameter vector."""


class DifferentiableDetector(ABC):
    @abstractmethod
    def p_det_and_grad(self, x: np.ndarray, object_name: str) -> tuple:
        """(p_det, d p_det / d x); p_det is the max over region scores."""


class DifferentiableGenerator(ABC):
    @abstractmethod
    def generate_vector(self, conditioning: Conditioning) -> np.ndarray:
        """Image as a parameter vector (float64, no codec round-trip)."""

    @abstractmethod
    def vjp(self, conditioning: Conditioning, grad_x: np.ndarray) -> np.ndarray:
        """Pull an image-space gradient back to the flattened conditioning."""


@dataclass
class AdapterSuite:
    """The adapter bundle one pipeline run operates with."""

    vlm: VlmAdapter
    detector: DetectorAdapter
    embedder: EmbedderAdapter
    perceptual: PerceptualAdapter
    generator: Optional[GeneratorAdapter] = None
    llm: Optional[LlmAdapter] = None
    limiter: AdapterLimiter = field(default_factory=lambda: AdapterLimiter())


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def parse_yes_no(text: str) -> str:
    """Parse an answer from the first reply token, case-insensitively.

    Tokens starting with "yes"/"no" (after stripping punctuation) count;
    anything else is "invalid". Invalid never counts as "no".
    """
    for token in text.strip().split():
        word = "".join(ch for ch in token if ch.isalpha()).lower()
        if not word:
            continue
        if word.startswith("yes"):
            return "yes"
        if word.startswith("no"):
            return "no"
        return "invalid"
    return "invalid"


def ask_yes_no(vlm: VlmAdapter, image: bytes, obj: ObjectSpec, bank: QuestionBank,
               template_id: str = MAIN_TEMPLATE_ID, *, with_suffix: bool = True) -> Evaluation:
    """Ask the standard existence question and parse the verdict."""
    question = bank.render(template_id, obj.name, with_suffix=with_suffix)
    reply = vlm.answer(image, question, object_name=obj.name)
    answer = parse_yes_no(reply.text)
    supports_p = vlm.capabilities.yes_probability
    return Evaluation(
        model_id=vlm.model_id,
        prompt_template_id=template_id,
        p_yes=reply.p_yes if supports_p else None,
        p_yes_raw=reply.p_yes_raw if supports_p else None,
        answer=answer,
        prompt_text=question,
    )


def detect(det: DetectorAdapter, image: bytes, obj: ObjectSpec) -> float:
    """Detector confidence: max over proposed regions, 0 with no proposals."""
    scores = [float(s) for s in det.propose(image, obj.name)]
    for s in scores:
        if not 0.0 <= s <= 1.0:
            raise AdapterError(f"detector score {s} outside [0, 1]")
    return max(scores, default=0.0)


def generate(gen: GeneratorAdapter, conditioning: Conditioning) -> bytes:
    check_conditioning(gen, conditioning)
    return gen.generate(conditioning)


class AdapterLimiter:
    """Caps in-flight calls per adapter at its declared max concurrency."""

    def __init__(self):
        self._locks: dict = {}
        self._guard = threading.Lock()

    def slot(self, adapter) -> threading.Semaphore:
        limit = getattr(adapter, "max_concurrency", None)
        with self._guard:
            key = id(adapter)
            if key not in self._locks:
                self._locks[key] = threading.BoundedSemaphore(limit) if limit else _Unlimited()
            return self._locks[key]


class _Unlimited:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------------------
# Remote adapters: minimal JSON-over-HTTP protocol
# ---------------------------------------------------------------------------

def _post_json(endpoint: str, payload: dict, timeout: float) -> dict:
    body = json.dumps(payload).encode("utf-8")
    req = urllib.request.Request(endpoint, data=body, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
        raise AdapterTransportError(f"request to {endpoint} failed: {exc}") from exc


class RemoteVlm(VlmAdapter):
    """POST {question, image_b64} -> {text, p_yes?, p_yes_raw?}."""

    def __init__(self, model_id: str, endpoint: str, *, yes_probability: bool = True,
                 max_concurrency: Optional[int] = None, timeout: float = 60.0):
        self.model_id = model_id
        self.endpoint = endpoint
        self.capabilities = VlmCapabilities(yes_probability=yes_probability)
        self.max_concurrency = max_concurrency
        self.timeout = timeout

    def answer(self, image: bytes, question: str, *, object_name: Optional[str] = None) -> VlmReply:
        out = _post_json(self.endpoint, {
            "question": question,
            "image_b64": base64.b64encode(image).decode("ascii"),
        }, self.timeout)
        return VlmReply(text=out["text"], p_yes=out.get("p_yes"), p_yes_raw=out.get("p_yes_raw"))


class RemoteDetector(DetectorAdapter):
    """POST {object, image_b64} -> {scores: [..]}."""

    def __init__(self, model_id: str, endpoint: str, *, max_concurrency: Optional[int] = None,
                 timeout: float = 60.0):
        self.model_id = model_id
        self.endpoint = endpoint
        self.max_concurrency = max_concurrency
        self.timeout = timeout

    def propose(self, image: bytes, object_name: str) -> Sequence[float]:
        out = _post_json(self.endpoint, {
            "object": object_name,
            "image_b64": base64.b64encode(image).decode("ascii"),
        }, self.timeout)
        return [float(s) for s in out.get("scores", [])]


class RemoteLlm(LlmAdapter):
    """POST {messages} -> {text}."""

    def __init__(self, model_id: str, endpoint: str, *, max_concurrency: Optional[int] = None,
                 timeout: float = 120.0):
        self.model_id = model_id
        self.endpoint = endpoint
        self.max_concurrency = max_concurrency
        self.timeout = timeout

    def chat(self, messages: Sequence[dict]) -> str:
        out = _post_json(self.endpoint, {"messages": list(messages)}, self.timeout)
        return out["text"]
