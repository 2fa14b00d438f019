"""Deterministic synthetic adapters for desk-scale runs and tests.

The stub family treats an image as a parameter vector ``x`` serialized
losslessly as a 32-bit float TIFF. The vector is laid out as

    x = [ semantic (S) | perceptual (P) | hallucination feature | object feature ]

The stub VLM is a logistic probe over ``x`` (by default reading the
hallucination coordinate), the stub detector takes the max of logistic
region scores (by default reading the object coordinate), and the stub
generator is an affine map from the flattened conditioning. Everything is
differentiable end to end so the conditioning optimizer can be checked
against finite differences.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .adapters import (
    Conditioning,
    DetectorAdapter,
    DifferentiableDetector,
    DifferentiableGenerator,
    DifferentiableVlm,
    EmbedderAdapter,
    GeneratorAdapter,
    LlmAdapter,
    PerceptualAdapter,
    VlmAdapter,
    VlmCapabilities,
    VlmReply,
    check_conditioning,
)
from .store import decode_image


def _seed_from(*parts: str) -> int:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _sigmoid(t: float) -> float:
    if t >= 0:
        return 1.0 / (1.0 + np.exp(-t))
    e = np.exp(t)
    return float(e / (1.0 + e))


# ---------------------------------------------------------------------------
# Vector <-> image codec
# ---------------------------------------------------------------------------

def vector_to_image_bytes(x: np.ndarray) -> bytes:
    """Serialize a parameter vector as a 1-row float32 TIFF."""
    arr = np.asarray(x, dtype=np.float32).reshape(1, -1)
    img = Image.fromarray(arr, mode="F")
    buf = io.BytesIO()
    img.save(buf, format="TIFF")
    return buf.getvalue()


def image_bytes_to_vector(data: bytes) -> np.ndarray:
    """Recover the parameter vector from stub image bytes."""
    img = decode_image(data)
    if img.mode != "F":
        raise ValueError(f"stub images are float rasters, got mode {img.mode!r}")
    return np.asarray(img, dtype=np.float64).reshape(-1)


@dataclass(frozen=True)
class StubLayout:
    """Coordinate layout of the stub image vector."""

    semantic_dim: int = 24
    perceptual_dim: int = 8

    @property
    def hal_index(self) -> int:
        return self.semantic_dim + self.perceptual_dim

    @property
    def obj_index(self) -> int:
        return self.semantic_dim + self.perceptual_dim + 1

    @property
    def image_dim(self) -> int:
        return self.semantic_dim + self.perceptual_dim + 2

    def semantic(self, x: np.ndarray) -> np.ndarray:
        return x[: self.semantic_dim]

    def perceptual(self, x: np.ndarray) -> np.ndarray:
        return x[self.semantic_dim : self.semantic_dim + self.perceptual_dim]


# Canonical probe strengths shared by the pipeline-level stub world.
VLM_GAIN, VLM_BIAS = 7.0, -3.5
DET_GAIN, DET_BIAS = 8.0, -4.0


class StubVlm(VlmAdapter, DifferentiableVlm):
    """Logistic yes-probability probe: p_yes = sigmoid(w . x + b)."""

    capabilities = VlmCapabilities(yes_probability=True, differentiable=True)

    def __init__(self, weight: np.ndarray, bias: float, model_id: str = "stub-vlm"):
        self.model_id = model_id
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = float(bias)

    @classmethod
    def canonical(cls, layout: StubLayout, model_id: str = "stub-vlm") -> "StubVlm":
        """The mined-against model: hallucinates on the hallucination feature."""
        w = np.zeros(layout.image_dim)
        w[layout.hal_index] = VLM_GAIN
        return cls(w, VLM_BIAS, model_id)

    @classmethod
    def faithful(cls, layout: StubLayout, model_id: str = "stub-vlm-faithful") -> "StubVlm":
        """A non-hallucinating model: answers yes only on the object feature."""
        w = np.zeros(layout.image_dim)
        w[layout.obj_index] = DET_GAIN
        return cls(w, DET_BIAS, model_id)

    def p_yes(self, x: np.ndarray) -> float:
        return _sigmoid(float(self.weight @ x) + self.bias)

    def p_yes_and_grad(self, x: np.ndarray, object_name: str) -> tuple:
        p = self.p_yes(x)
        return p, p * (1.0 - p) * self.weight

    def answer(self, image: bytes, question: str, *, object_name: Optional[str] = None) -> VlmReply:
        p = self.p_yes(image_bytes_to_vector(image))
        return VlmReply(text="Yes" if p >= 0.5 else "No", p_yes=p, p_yes_raw=p)


class CannedVlm(VlmAdapter):
    """Fixed-output VLM for unit tests: one reply text and optional p_yes."""

    def __init__(self, text: str, p_yes: Optional[float] = None, model_id: str = "canned-vlm"):
        self.model_id = model_id
        self.capabilities = VlmCapabilities(yes_probability=p_yes is not None)
        self._text = text
        self._p = p_yes

    def answer(self, image: bytes, question: str, *, object_name: Optional[str] = None) -> VlmReply:
        return VlmReply(text=self._text, p_yes=self._p, p_yes_raw=self._p)


class StubDetector(DetectorAdapter, DifferentiableDetector):
    """Region scores are logistic probes; confidence is their maximum."""

    differentiable = True

    def __init__(self, box_weights: np.ndarray, box_biases: np.ndarray, model_id: str = "stub-detector"):
        self.model_id = model_id
        self.box_weights = np.atleast_2d(np.asarray(box_weights, dtype=np.float64))
        self.box_biases = np.atleast_1d(np.asarray(box_biases, dtype=np.float64))

    @classmethod
    def canonical(cls, layout: StubLayout, model_id: str = "stub-detector") -> "StubDetector":
        v = np.zeros((1, layout.image_dim))
        v[0, layout.obj_index] = DET_GAIN
        return cls(v, np.array([DET_BIAS]), model_id)

    def scores(self, x: np.ndarray) -> np.ndarray:
        t = self.box_weights @ x + self.box_biases
        return 1.0 / (1.0 + np.exp(-t))

    def propose(self, image: bytes, object_name: str) -> Sequence[float]:
        return [float(s) for s in self.scores(image_bytes_to_vector(image))]

    def p_det_and_grad(self, x: np.ndarray, object_name: str) -> tuple:
        s = self.scores(x)
        j = int(np.argmax(s))
        p = float(s[j])
        return p, p * (1.0 - p) * self.box_weights[j]


class StubGenerator(GeneratorAdapter, DifferentiableGenerator):
    """Affine map from the flattened conditioning: x = A u + bias."""

    deterministic = True

    def __init__(self, matrix: np.ndarray, bias: np.ndarray, latent_dim: int,
                 text_dims: Sequence[int], model_id: str = "stub-generator",
                 prompt_encoder=None):
        self.model_id = model_id
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.latent_dim = int(latent_dim)
        self.text_dims = tuple(int(d) for d in text_dims)
        self._prompt_encoder = prompt_encoder
        u_dim = self.latent_dim + sum(self.text_dims)
        if self.matrix.shape != (self.bias.size, u_dim):
            raise ValueError(f"matrix shape {self.matrix.shape} != ({self.bias.size}, {u_dim})")

    @classmethod
    def canonical(cls, layout: StubLayout, latent_dim: int = 6, seed: int = 0,
                  model_id: str = "stub-generator", prompt_encoder=None) -> "StubGenerator":
        """Pipeline generator: text conditioning drives the semantic block,
        the latent drives the perceptual block, and dense random rows drive
        the two feature coordinates so the optimizer has a path to them."""
        rng = np.random.default_rng(_seed_from("stub-generator", str(seed)))
        S, P = layout.semantic_dim, layout.perceptual_dim
        u_dim = latent_dim + S
        a = np.zeros((layout.image_dim, u_dim))
        a[:S, latent_dim:] = np.eye(S)
        a[S:S + P, :latent_dim] = rng.normal(0.0, 0.5, (P, latent_dim))
        a[layout.hal_index] = rng.normal(0.0, 0.35, u_dim)
        a[layout.obj_index] = rng.normal(0.0, 0.1, u_dim)
        bias = np.zeros(layout.image_dim)
        return cls(a, bias, latent_dim, (S,), model_id, prompt_encoder=prompt_encoder)

    def encode_prompt(self, text: str) -> list:
        if self._prompt_encoder is not None:
            return list(self._prompt_encoder(text))
        rng = np.random.default_rng(_seed_from(self.model_id, "prompt", text))
        return [rng.normal(0.0, 1.0, d) for d in self.text_dims]

    def generate_vector(self, conditioning: Conditioning) -> np.ndarray:
        check_conditioning(self, conditioning)
        return self.matrix @ conditioning.flatten() + self.bias

    def generate(self, conditioning: Conditioning) -> bytes:
        return vector_to_image_bytes(self.generate_vector(conditioning))

    def vjp(self, conditioning: Conditioning, grad_x: np.ndarray) -> np.ndarray:
        return self.matrix.T @ np.asarray(grad_x, dtype=np.float64)


class StubEmbedder(EmbedderAdapter):
    """Semantic embeddings: normalized semantic block for images, a seeded
    Gaussian direction for text."""

    def __init__(self, layout: StubLayout, model_id: str = "stub-embedder"):
        self.model_id = model_id
        self.layout = layout
        self.dim = layout.semantic_dim

    def embed_text(self, text: str) -> np.ndarray:
        rng = np.random.default_rng(_seed_from(self.model_id, "text", text))
        v = rng.normal(0.0, 1.0, self.dim)
        return v / np.linalg.norm(v)

    def embed_image(self, image: bytes) -> np.ndarray:
        x = image_bytes_to_vector(image)
        sem = self.layout.semantic(x)
        n = np.linalg.norm(sem)
        if n == 0:
            raise ValueError("stub image has a zero semantic block")
        return sem / n


class StubPerceptual(PerceptualAdapter):
    """Perceptual similarity: cosine of the perceptual block, clipped to [0, 1]."""

    def __init__(self, layout: StubLayout, model_id: str = "stub-perceptual"):
        self.model_id = model_id
        self.layout = layout

    def embed(self, image: bytes) -> np.ndarray:
        x = image_bytes_to_vector(image)
        per = self.layout.perceptual(x)
        n = np.linalg.norm(per)
        if n == 0:
            raise ValueError("stub image has a zero perceptual block")
        return per / n

    def similarity(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.clip(np.dot(a, b), 0.0, 1.0))


# ---------------------------------------------------------------------------
# Query-writing LLM stub
# ---------------------------------------------------------------------------

# Example caption sets for well-known objects so stub output lines up with
# the documented protocol examples.
_EXAMPLE_CAPTIONS = {
    "hummingbird": [
        "Close-up of a bird feeder hanging in a lush garden.",
        "A garden filled with vibrant red flowers.",
        "Green foliage glistening after a rainfall.",
        "A bird feeder surrounded by blooming plants.",
        "Red tubular flowers swaying in the breeze.",
    ],
    "firetruck": [
        "A fire station with bright red doors.",
        "Close-up of a spinning emergency siren light.",
        "Firefighters conducting a training drill.",
        "A tall ladder reaching up the side of a building.",
        "Protective gear hanging neatly in a station locker room.",
    ],
    "mountainbike": [
        "A winding trail cutting through a dense forest.",
        "A helmet resting on a tree stump beside a path.",
        "Sunlight filtering through trees along a forest trail.",
        "A backpack leaning against a wooden signpost on a hillside.",
        "A group of friends hiking through mountainous terrain.",
    ],
}

_SCENES = [
    "garden", "workbench", "harbor", "meadow", "kitchen counter", "forest trail",
    "city square", "window sill", "riverbank", "workshop", "market stall", "courtyard",
]
_SUBJECTS = [
    "A weathered wooden fence", "Scattered autumn leaves", "A row of clay pots",
    "Gleaming metal tools", "Soft morning light", "Stacked wicker baskets",
    "A winding gravel path", "Faded painted signage", "Dew-covered grass",
    "Folded linen cloth", "A cluster of smooth stones", "An old rope coil",
]


def _filler_caption(object_name: str, index: int) -> str:
    rng = np.random.default_rng(_seed_from("stub-llm", object_name, str(index)))
    subject = _SUBJECTS[int(rng.integers(len(_SUBJECTS)))]
    scene = _SCENES[int(rng.integers(len(_SCENES)))]
    return f"{subject} near a {scene}, scene {index + 1}."


class StubLlm(LlmAdapter):
    """Deterministic numbered prompt lists.

    ``bad_replies`` makes the first N replies come back one line short, to
    exercise regeneration handling.
    """

    def __init__(self, expected_count: int = 50, bad_replies: int = 0,
                 preamble: str = "", model_id: str = "stub-llm"):
        self.model_id = model_id
        self.expected_count = expected_count
        self.preamble = preamble
        self._bad_remaining = bad_replies

    def prompts_for(self, object_name: str) -> list:
        base = _EXAMPLE_CAPTIONS.get(object_name.lower(), [])
        prompts = list(base[: self.expected_count])
        i = 0
        while len(prompts) < self.expected_count:
            prompts.append(_filler_caption(object_name, i))
            i += 1
        return prompts

    def chat(self, messages: Sequence[dict]) -> str:
        object_name = None
        for m in messages:
            if m["role"] == "user" and m["content"].startswith("object:"):
                object_name = m["content"].split(":", 1)[1].strip()
                break
        if object_name is None:
            raise ValueError("stub LLM expects an 'object: <name>' user turn")
        prompts = self.prompts_for(object_name)
        if self._bad_remaining > 0:
            self._bad_remaining -= 1
            prompts = prompts[:-1]
        lines = [f"{i + 1}: {p}" for i, p in enumerate(prompts)]
        body = "\n".join(lines)
        return f"{self.preamble}\n{body}" if self.preamble else body


# ---------------------------------------------------------------------------
# Randomized differentiable instances for optimizer benches
# ---------------------------------------------------------------------------

@dataclass
class OptInstance:
    """A self-contained differentiable stack plus an initial conditioning."""

    vlm: StubVlm
    detector: StubDetector
    generator: StubGenerator
    init: Conditioning
    layout: StubLayout


def opt_instance(seed: int, *, latent_dim: int = 4, text_dims: Sequence[int] = (4, 4),
                 dense_probes: bool = False, init_p_yes: Optional[tuple] = (0.02, 0.08),
                 init_p_det: Optional[tuple] = None) -> OptInstance:
    """Build a random stub stack for gradient checks and optimization runs.

    With ``dense_probes`` the VLM weight and three detector boxes are dense
    random directions (gradient-check regime). Otherwise the VLM reads one
    dominant coordinate so 25 clipped steps can actually flip the verdict,
    and biases are solved so the initial probabilities land in the requested
    ranges.
    """
    rng = np.random.default_rng(_seed_from("opt-instance", str(seed)))
    layout = StubLayout(semantic_dim=6, perceptual_dim=2)
    m = layout.image_dim
    u_dim = latent_dim + sum(text_dims)

    a = np.eye(m, u_dim) + rng.normal(0.0, 0.05, (m, u_dim))
    gen = StubGenerator(a, np.full(m, 0.5), latent_dim, text_dims)

    z0 = rng.normal(0.0, 1.0, latent_dim)
    texts0 = [rng.normal(0.0, 1.0, d) for d in text_dims]
    init = Conditioning(z0, texts0)
    x0 = gen.generate_vector(init)

    if dense_probes:
        w = rng.normal(0.0, 1.0, m)
        w *= 2.0 / np.linalg.norm(w)
        b = float(rng.normal(0.0, 1.0))
        vlm = StubVlm(w, b)
        boxes = rng.normal(0.0, 0.8, (3, m))
        biases = np.array([-2.0, -4.0, -6.0]) + rng.normal(0.0, 0.3, 3)
        det = StubDetector(boxes, biases)
    else:
        # Dominant coordinates inside the text-conditioned block, so the full
        # step size (no latent damping) applies along the escape direction.
        hi = min(m, u_dim)
        k = int(rng.integers(latent_dim, hi))
        j = int(rng.integers(latent_dim, hi - 1))
        if j >= k:
            j += 1
        # The object-feature coordinate j is decoupled: the generator maps it
        # one-to-one and the VLM probe ignores it, so detector confidence
        # moves only when the detector term itself pushes it.
        a[j, :] = 0.0
        a[:, j] = 0.0
        a[j, j] = 1.0
        gen = StubGenerator(a, np.full(m, 0.5), latent_dim, text_dims)
        x0 = gen.generate_vector(init)

        w = rng.normal(0.0, 0.05, m)
        w[k] += 2.0
        w[j] = 0.0
        p0 = float(rng.uniform(*init_p_yes))
        b = float(np.log(p0 / (1.0 - p0)) - w @ x0)
        vlm = StubVlm(w, b)

        v = np.zeros(m)
        v[j] = 1.5
        if init_p_det is None:
            pd0 = float(rng.uniform(0.002, 0.03))
        else:
            pd0 = float(rng.uniform(*init_p_det))
        c = float(np.log(pd0 / (1.0 - pd0)) - v @ x0)
        det = StubDetector(v[None, :], np.array([c]))

    return OptInstance(vlm=vlm, detector=det, generator=gen, init=init, layout=layout)
