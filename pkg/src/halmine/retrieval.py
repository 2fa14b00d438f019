"""Exploration and exploitation over a pluggable embedding kNN index.

Both phases share one loop: retrieve ranked neighbors with an over-fetch
margin, drop perceptual near-duplicates greedily in rank order, then gate
each candidate through the detector and the VLM filter policy. Every
evaluated candidate is recorded (rejects included); survivors are the
records that pass the policy.
"""
from __future__ import annotations

import urllib.request
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .adapters import AdapterSuite, ask_yes_no, detect
from .prompts import MAIN_TEMPLATE_ID, QuestionBank
from .store import DecodeError, RunStore
from .types import Evaluation, ImageRecord, Lineage, ObjectSpec, Query


class IndexError_(Exception):
    """Index adapter failure; aborts the stage resumably."""


class FetchError(Exception):
    """Image bytes could not be retrieved for a hit."""


@dataclass(frozen=True)
class IndexHit:
    item_id: str
    uri: str
    similarity: float


class IndexAdapter(ABC):
    index_id: str

    @property
    @abstractmethod
    def size(self) -> int:
        ...

    @abstractmethod
    def query(self, embedding: np.ndarray, k: int, overfetch: int = 1) -> Sequence[IndexHit]:
        """Top k*overfetch hits sorted by descending similarity."""


class SyntheticIndex(IndexAdapter):
    """In-memory exact-similarity index over a modest image collection."""

    def __init__(self, item_ids: Sequence[str], uris: Sequence[str],
                 embeddings: np.ndarray, index_id: str = "synthetic-index"):
        self.index_id = index_id
        self.item_ids = list(item_ids)
        self.uris = list(uris)
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        if self.embeddings.shape[0] != len(self.item_ids):
            raise IndexError_("embedding count does not match item count")

    @classmethod
    def from_directory(cls, path: Path, embedder, pattern: str = "*",
                       index_id: str = "synthetic-index") -> "SyntheticIndex":
        """Build from a directory of images, embedding each file."""
        files = sorted(p for p in Path(path).glob(pattern) if p.is_file())
        ids, uris, embs = [], [], []
        for p in files:
            ids.append(p.stem)
            uris.append(str(p))
            embs.append(embedder.embed_image(p.read_bytes()))
        if not embs:
            raise IndexError_(f"no images found under {path}")
        return cls(ids, uris, np.stack(embs), index_id=index_id)

    @property
    def size(self) -> int:
        return len(self.item_ids)

    def query(self, embedding: np.ndarray, k: int, overfetch: int = 1) -> list:
        sims = np.clip(self.embeddings @ np.asarray(embedding, dtype=np.float64), -1.0, 1.0)
        n = min(max(k * max(overfetch, 1), 0), self.size)
        order = sorted(range(self.size), key=lambda i: (-sims[i], self.item_ids[i]))[:n]
        return [IndexHit(self.item_ids[i], self.uris[i], float(sims[i])) for i in order]


@dataclass(frozen=True)
class FilterPolicy:
    """Which evaluated candidates count as successes.

    hallucination: keep iff p_det <= det_reject and the VLM answers yes.
    reverse:       keep iff p_det >= det_accept and the VLM answers no.
    """

    mode: str = "hallucination"
    det_reject: float = 0.1
    det_accept: float = 0.5

    def __post_init__(self) -> None:
        if self.mode not in ("hallucination", "reverse"):
            raise ValueError(f"unknown filter mode {self.mode!r}")
        for name in ("det_reject", "det_accept"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")

    def detector_passes(self, p_det: float) -> bool:
        if self.mode == "hallucination":
            return p_det <= self.det_reject
        return p_det >= self.det_accept

    def keep(self, p_det: float, answer: Optional[str]) -> bool:
        if not self.detector_passes(p_det):
            return False
        return answer == ("yes" if self.mode == "hallucination" else "no")


@dataclass(frozen=True)
class RetrievalConfig:
    explore_k: int = 20
    exploit_k: int = 50
    dedup_threshold: float = 0.9
    overfetch_factor: int = 3
    max_fetch_retries: int = 2

    def __post_init__(self) -> None:
        if not 0.0 < self.dedup_threshold <= 1.0:
            raise ValueError("dedup_threshold must lie in (0, 1]")
        if self.overfetch_factor < 1:
            raise ValueError("overfetch_factor must be >= 1")


def fetch_uri(uri: str, max_retries: int = 2, timeout: float = 30.0) -> bytes:
    """Load image bytes for a hit; local paths or http(s), with retries."""
    last: Exception = FetchError(f"no attempt for {uri}")
    for _ in range(1 + max_retries):
        try:
            if uri.startswith(("http://", "https://")):
                with urllib.request.urlopen(uri, timeout=timeout) as resp:
                    return resp.read()
            path = Path(uri[len("file://"):] if uri.startswith("file://") else uri)
            return path.read_bytes()
        except OSError as exc:
            last = exc
    raise FetchError(f"could not fetch {uri}: {last}")


def dedup(items: Sequence, perceptual, threshold: float = 0.9,
          seed_embedding: Optional[np.ndarray] = None,
          embedding_of: Optional[Callable] = None) -> list:
    """Greedy near-duplicate removal in rank order.

    An item is dropped iff its perceptual similarity to any already-retained
    item, or to the seed embedding when given, exceeds the threshold.
    """
    if embedding_of is None:
        embedding_of = lambda item: item  # noqa: E731 - items are embeddings
    retained: list = []
    retained_embs: list = []
    for item in items:
        emb = embedding_of(item)
        if seed_embedding is not None and perceptual.similarity(emb, seed_embedding) > threshold:
            continue
        if any(perceptual.similarity(emb, r) > threshold for r in retained_embs):
            continue
        retained.append(item)
        retained_embs.append(emb)
    return retained


@dataclass
class RetrievalStats:
    evaluated: int = 0
    dedup_drops: int = 0
    duplicate_content_skips: int = 0
    fetch_failures: int = 0
    decode_failures: int = 0
    detector_rejects: int = 0
    vlm_rejects: int = 0
    survivors: int = 0

    def to_dict(self) -> dict:
        return dict(sorted(self.__dict__.items()))


@dataclass
class RetrievalResult:
    records: list = field(default_factory=list)     # every evaluated candidate
    survivors: list = field(default_factory=list)   # records passing the policy
    stats: RetrievalStats = field(default_factory=RetrievalStats)


class _Evaluator:
    """Detector/VLM evaluation with per-content caching within a stage run."""

    def __init__(self, suite: AdapterSuite, bank: QuestionBank, obj: ObjectSpec,
                 template_id: str = MAIN_TEMPLATE_ID):
        self.suite = suite
        self.bank = bank
        self.obj = obj
        self.template_id = template_id
        self._det_cache: dict = {}
        self._vlm_cache: dict = {}

    def detector(self, content_hash: str, data: bytes) -> Evaluation:
        if content_hash not in self._det_cache:
            with self.suite.limiter.slot(self.suite.detector):
                p = detect(self.suite.detector, data, self.obj)
            self._det_cache[content_hash] = Evaluation(
                model_id=self.suite.detector.model_id, p_det=p
            )
        return self._det_cache[content_hash]

    def vlm(self, content_hash: str, data: bytes) -> Evaluation:
        if content_hash not in self._vlm_cache:
            with self.suite.limiter.slot(self.suite.vlm):
                self._vlm_cache[content_hash] = ask_yes_no(
                    self.suite.vlm, data, self.obj, self.bank, self.template_id
                )
        return self._vlm_cache[content_hash]


def _retrieve_batch(parent_lineage: Lineage, embedding: np.ndarray, k: int,
                    index: IndexAdapter, suite: AdapterSuite, policy: FilterPolicy,
                    store: RunStore, evaluator: _Evaluator, cfg: RetrievalConfig,
                    seen_hashes: set, stats: RetrievalStats,
                    seed_perceptual: Optional[np.ndarray],
                    fetcher: Callable) -> RetrievalResult:
    """Shared exploration/exploitation inner loop for one query or seed."""
    hits = index.query(embedding, k, cfg.overfetch_factor)
    batch = RetrievalResult(stats=stats)
    retained = 0
    kept_perceptual: list = []
    for hit in hits:
        if retained >= k:
            break
        try:
            data = fetcher(hit.uri)
        except FetchError:
            stats.fetch_failures += 1
            continue
        try:
            cached = store.put_image(data, parent_lineage, uri=hit.uri)
        except DecodeError:
            stats.decode_failures += 1
            continue
        if cached.content_hash in seen_hashes:
            stats.duplicate_content_skips += 1
            continue
        perceptual_emb = suite.perceptual.embed(data)
        if seed_perceptual is not None and \
                suite.perceptual.similarity(perceptual_emb, seed_perceptual) > cfg.dedup_threshold:
            stats.dedup_drops += 1
            continue
        if any(suite.perceptual.similarity(perceptual_emb, p) > cfg.dedup_threshold
               for p in kept_perceptual):
            stats.dedup_drops += 1
            continue
        retained += 1
        kept_perceptual.append(perceptual_emb)
        seen_hashes.add(cached.content_hash)
        stats.evaluated += 1

        record = ImageRecord(
            id=cached.id,
            uri=hit.uri,
            content_hash=cached.content_hash,
            lineage=parent_lineage,
            embedding=suite.embedder.embed_image(data),
            perceptual_embedding=perceptual_emb,
        )
        det_eval = evaluator.detector(cached.content_hash, data)
        record.evaluations.append(det_eval)
        p_det = det_eval.p_det if det_eval.p_det is not None else 0.0
        if not policy.detector_passes(p_det):
            stats.detector_rejects += 1
            record.passed_filter = False
        else:
            vlm_eval = evaluator.vlm(cached.content_hash, data)
            record.evaluations.append(vlm_eval)
            record.passed_filter = policy.keep(p_det, vlm_eval.answer)
            if not record.passed_filter:
                stats.vlm_rejects += 1
        batch.records.append(record)
        if record.passed_filter:
            stats.survivors += 1
            batch.survivors.append(record)
    return batch


def explore(queries: Sequence[Query], index: IndexAdapter, suite: AdapterSuite,
            policy: FilterPolicy, store: RunStore, bank: QuestionBank,
            cfg: RetrievalConfig = RetrievalConfig(),
            template_id: str = MAIN_TEMPLATE_ID,
            fetcher: Optional[Callable] = None) -> RetrievalResult:
    """Retrieve explore_k deduplicated neighbors per query and filter them."""
    if not queries:
        return RetrievalResult()
    if fetcher is None:
        fetcher = lambda uri: fetch_uri(uri, cfg.max_fetch_retries)  # noqa: E731
    obj = queries[0].object
    evaluator = _Evaluator(suite, bank, obj, template_id)
    out = RetrievalResult()
    seen: set = set()
    for query in queries:
        lineage = Lineage("exploration", parent_query_id=query.id)
        batch = _retrieve_batch(
            lineage, query.embedding, cfg.explore_k, index, suite, policy, store,
            evaluator, cfg, seen, out.stats, seed_perceptual=None, fetcher=fetcher,
        )
        out.records.extend(batch.records)
        out.survivors.extend(batch.survivors)
    return out


def exploit(successes: Sequence[ImageRecord], index: IndexAdapter, suite: AdapterSuite,
            policy: FilterPolicy, store: RunStore, bank: QuestionBank, obj: ObjectSpec,
            cfg: RetrievalConfig = RetrievalConfig(),
            template_id: str = MAIN_TEMPLATE_ID,
            fetcher: Optional[Callable] = None) -> RetrievalResult:
    """Retrieve exploit_k neighbors per exploration success, keyed to it.

    The seed image itself (and near-duplicates of it) are excluded; each
    survivor carries the seed record id as pre-cluster key.
    """
    if fetcher is None:
        fetcher = lambda uri: fetch_uri(uri, cfg.max_fetch_retries)  # noqa: E731
    evaluator = _Evaluator(suite, bank, obj, template_id)
    out = RetrievalResult()
    seen: set = set()
    for success in successes:
        if success.embedding is None:
            raise IndexError_(f"success record {success.id} lacks an image embedding")
        lineage = Lineage("exploitation", parent_image_id=success.id)
        batch = _retrieve_batch(
            lineage, success.embedding, cfg.exploit_k, index, suite, policy, store,
            evaluator, cfg, seen, out.stats, seed_perceptual=success.perceptual_embedding,
            fetcher=fetcher,
        )
        out.records.extend(batch.records)
        out.survivors.extend(batch.survivors)
    return out
