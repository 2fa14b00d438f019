"""Shared domain model used by every pipeline stage.

All types serialize to plain dicts with deterministic key order so that
record files are byte-identical across re-runs of the same configuration.
Embeddings are stored L2-normalized; similarity is then a plain dot product.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

DATASET_TAGS = ("imagenet", "coco", "objects365", "openimages")
FREQUENCY_SPLITS = ("common", "q10", "median", "rare")
QUERY_KINDS = ("text", "image")
QUERY_ORIGINS = ("llm", "optimized")
ANSWERS = ("yes", "no", "invalid")

# Lineage stage tags. "generated" marks optimizer outputs, "ingest" marks
# externally supplied images (e.g. verified positives).
LINEAGE_STAGES = ("exploration", "exploitation", "generated", "ingest")


class DomainError(ValueError):
    """Invalid value for one of the domain types."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise DomainError(msg)


def stable_id(*parts: str) -> str:
    """Deterministic opaque identifier derived from its parts."""
    h = hashlib.sha256(("\x1f".join(parts)).encode("utf-8")).hexdigest()
    return h[:16]


def slugify(name: str) -> str:
    """Filesystem-safe slug for object names ("fire truck" -> "fire-truck")."""
    out = []
    for ch in name.strip().lower():
        if ch.isalnum():
            out.append(ch)
        elif out and out[-1] != "-":
            out.append("-")
    return "".join(out).strip("-") or "object"


def as_unit_vector(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """L2-normalize, rejecting zero vectors."""
    v = np.asarray(values, dtype=np.float64)
    n = float(np.linalg.norm(v))
    _require(n > 0.0, "cannot normalize a zero vector")
    return v / n


def dumps_canonical(obj: Any) -> str:
    """Canonical JSON used for all persisted records and hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class ObjectSpec:
    """One mineable object category."""

    name: str
    dataset_tag: str
    frequency_split: Optional[str] = None

    def __post_init__(self) -> None:
        _require(bool(self.name.strip()), "object name must be non-empty")
        _require(self.dataset_tag in DATASET_TAGS, f"unknown dataset tag {self.dataset_tag!r}")
        if self.frequency_split is not None:
            _require(
                self.dataset_tag == "openimages",
                "frequency_split is only defined for openimages objects",
            )
            _require(
                self.frequency_split in FREQUENCY_SPLITS,
                f"unknown frequency split {self.frequency_split!r}",
            )

    @property
    def slug(self) -> str:
        return slugify(self.name)

    def to_dict(self) -> dict:
        d: dict = {"name": self.name, "dataset_tag": self.dataset_tag}
        if self.frequency_split is not None:
            d["frequency_split"] = self.frequency_split
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectSpec":
        return cls(d["name"], d["dataset_tag"], d.get("frequency_split"))


@dataclass
class Query:
    """A text or image query with provenance and a unit-norm embedding."""

    id: str
    object: ObjectSpec
    kind: str
    payload: str
    embedding: np.ndarray
    origin: str
    init_prompt_id: Optional[str] = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        _require(self.kind in QUERY_KINDS, f"unknown query kind {self.kind!r}")
        _require(self.origin in QUERY_ORIGINS, f"unknown origin {self.origin!r}")
        self.embedding = np.asarray(self.embedding, dtype=np.float64)

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "object": self.object.to_dict(),
            "kind": self.kind,
            "payload": self.payload,
            "embedding": [float(x) for x in self.embedding],
            "origin": self.origin,
        }
        if self.init_prompt_id is not None:
            d["init_prompt_id"] = self.init_prompt_id
        if self.flags:
            d["flags"] = dict(sorted(self.flags.items()))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Query":
        return cls(
            id=d["id"],
            object=ObjectSpec.from_dict(d["object"]),
            kind=d["kind"],
            payload=d["payload"],
            embedding=np.asarray(d["embedding"], dtype=np.float64),
            origin=d["origin"],
            init_prompt_id=d.get("init_prompt_id"),
            flags=d.get("flags", {}),
        )


@dataclass
class Evaluation:
    """A single (model, prompt) verdict about one image.

    Detector-only evaluations leave ``answer``/``p_yes`` unset; VLM
    evaluations leave ``p_det`` unset. ``p_yes`` is the probability
    renormalized over the yes/no answer tokens, ``p_yes_raw`` the raw
    next-token probability of the affirmative token when available.
    """

    model_id: str
    prompt_template_id: Optional[str] = None
    p_yes: Optional[float] = None
    p_yes_raw: Optional[float] = None
    answer: Optional[str] = None
    p_det: Optional[float] = None
    prompt_text: Optional[str] = None

    def __post_init__(self) -> None:
        for name in ("p_yes", "p_yes_raw", "p_det"):
            v = getattr(self, name)
            if v is not None:
                _require(0.0 <= v <= 1.0, f"{name} must be within [0, 1], got {v}")
        if self.answer is not None:
            _require(self.answer in ANSWERS, f"unknown answer {self.answer!r}")

    def to_dict(self) -> dict:
        d: dict = {"model_id": self.model_id}
        for name in ("prompt_template_id", "p_yes", "p_yes_raw", "answer", "p_det", "prompt_text"):
            v = getattr(self, name)
            if v is not None:
                d[name] = float(v) if isinstance(v, float) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Evaluation":
        return cls(
            model_id=d["model_id"],
            prompt_template_id=d.get("prompt_template_id"),
            p_yes=d.get("p_yes"),
            p_yes_raw=d.get("p_yes_raw"),
            answer=d.get("answer"),
            p_det=d.get("p_det"),
            prompt_text=d.get("prompt_text"),
        )


@dataclass(frozen=True)
class Lineage:
    """Where an image came from: a stage tag plus its parent reference.

    Exactly one of ``parent_query_id``/``parent_image_id`` is set except for
    stage "ingest", which has no parent.
    """

    stage: str
    parent_query_id: Optional[str] = None
    parent_image_id: Optional[str] = None

    def __post_init__(self) -> None:
        _require(self.stage in LINEAGE_STAGES, f"unknown lineage stage {self.stage!r}")
        n_parents = (self.parent_query_id is not None) + (self.parent_image_id is not None)
        if self.stage == "ingest":
            _require(n_parents == 0, "ingest lineage carries no parent")
        else:
            _require(n_parents == 1, f"{self.stage} lineage needs exactly one parent")

    def to_dict(self) -> dict:
        d: dict = {"stage": self.stage}
        if self.parent_query_id is not None:
            d["parent_query_id"] = self.parent_query_id
        if self.parent_image_id is not None:
            d["parent_image_id"] = self.parent_image_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Lineage":
        return cls(d["stage"], d.get("parent_query_id"), d.get("parent_image_id"))


@dataclass
class ImageRecord:
    """One retrieved or generated image with its evaluations and lineage."""

    id: str
    uri: str
    content_hash: str
    lineage: Lineage
    embedding: Optional[np.ndarray] = None
    perceptual_embedding: Optional[np.ndarray] = None
    evaluations: list = field(default_factory=list)
    passed_filter: Optional[bool] = None

    def to_dict(self) -> dict:
        d: dict = {
            "id": self.id,
            "uri": self.uri,
            "content_hash": self.content_hash,
            "lineage": self.lineage.to_dict(),
        }
        if self.embedding is not None:
            d["embedding"] = [float(x) for x in self.embedding]
        if self.perceptual_embedding is not None:
            d["perceptual_embedding"] = [float(x) for x in self.perceptual_embedding]
        if self.evaluations:
            d["evaluations"] = [e.to_dict() for e in self.evaluations]
        if self.passed_filter is not None:
            d["passed_filter"] = self.passed_filter
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRecord":
        emb = d.get("embedding")
        per = d.get("perceptual_embedding")
        return cls(
            id=d["id"],
            uri=d["uri"],
            content_hash=d["content_hash"],
            lineage=Lineage.from_dict(d["lineage"]),
            embedding=None if emb is None else np.asarray(emb, dtype=np.float64),
            perceptual_embedding=None if per is None else np.asarray(per, dtype=np.float64),
            evaluations=[Evaluation.from_dict(e) for e in d.get("evaluations", [])],
            passed_filter=d.get("passed_filter"),
        )

    def latest(self, model_id: str) -> Optional[Evaluation]:
        """Most recent evaluation by the given model, if any."""
        for e in reversed(self.evaluations):
            if e.model_id == model_id:
                return e
        return None


@dataclass
class Cluster:
    """A set of images grouped as one systematic hallucination."""

    id: str
    object: ObjectSpec
    members: list
    seeds: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.members)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "object": self.object.to_dict(),
            "members": list(self.members),
            "seeds": list(self.seeds),
            "size": self.size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Cluster":
        return cls(
            id=d["id"],
            object=ObjectSpec.from_dict(d["object"]),
            members=list(d["members"]),
            seeds=list(d.get("seeds", [])),
        )
