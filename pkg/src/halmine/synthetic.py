"""Self-checking planted worlds for desk-scale synthetic runs.

A planted world is an image collection with known ground truth: a fraction
of items carry the hallucination feature (stub VLM answers yes) without the
object feature (stub detector stays quiet). Items cluster into per-query
cohorts in both the semantic space (so kNN retrieval finds them) and the
perceptual space (so near-duplicate checks keep them and agglomerative
merging groups them), while cohort perceptual centers are orthogonal so
clusters never merge across cohorts.

The builder verifies its own margins and raises if a sampled world violates
them, so downstream assertions rest on checked constructions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .adapters import AdapterSuite
from .retrieval import SyntheticIndex
from .store import content_digest, decode_image
from .stubs import (
    StubDetector,
    StubEmbedder,
    StubGenerator,
    StubLayout,
    StubLlm,
    StubPerceptual,
    StubVlm,
    vector_to_image_bytes,
)
from .types import ObjectSpec


class WorldConstructionError(AssertionError):
    """A sampled world violated one of its margins; use another seed."""


@dataclass
class PlantedItem:
    item_id: str
    data: bytes
    content_hash: str
    planted: bool
    has_object: bool
    uri: str = ""


@dataclass
class PlantedWorld:
    layout: StubLayout
    object: ObjectSpec
    suite: AdapterSuite
    items: list
    n_queries: int
    prompts: list
    expected_query_count: int

    @property
    def planted_hashes(self) -> set:
        """Ground truth: hallucination feature present, object absent."""
        return {it.content_hash for it in self.items if it.planted and not it.has_object}

    def index_in_memory(self) -> SyntheticIndex:
        embs = np.stack([self.suite.embedder.embed_image(it.data) for it in self.items])
        uris = [it.uri or f"mem://{it.item_id}" for it in self.items]
        return SyntheticIndex([it.item_id for it in self.items], uris, embs)

    def fetcher(self):
        """Resolve mem:// uris from item bytes; falls back to file paths."""
        from .retrieval import FetchError, fetch_uri

        blobs = {f"mem://{it.item_id}": it.data for it in self.items}

        def fetch(uri: str) -> bytes:
            if uri in blobs:
                return blobs[uri]
            if uri.startswith("mem://"):
                raise FetchError(f"unknown in-memory uri {uri}")
            return fetch_uri(uri)

        return fetch

    def write_images(self, directory: Path) -> Path:
        """Write items as files and the ground truth as truth.json."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        truth = {}
        for it in self.items:
            path = directory / f"{it.item_id}.tiff"
            path.write_bytes(it.data)
            it.uri = str(path)
            truth[it.item_id] = {
                "content_hash": it.content_hash,
                "planted": it.planted,
                "has_object": it.has_object,
            }
        (directory / "truth.json").write_text(json.dumps(truth, sort_keys=True, indent=1))
        return directory


def canonical_suite(layout: StubLayout, *, expected_query_count: int = 50,
                    generator_seed: int = 0) -> AdapterSuite:
    """The canonical stub adapter bundle for a layout."""
    embedder = StubEmbedder(layout)
    generator = StubGenerator.canonical(
        layout, seed=generator_seed,
        prompt_encoder=lambda text: [embedder.embed_text(text)],
    )
    return AdapterSuite(
        vlm=StubVlm.canonical(layout),
        detector=StubDetector.canonical(layout),
        embedder=embedder,
        perceptual=StubPerceptual(layout),
        generator=generator,
        llm=StubLlm(expected_count=expected_query_count),
    )


def build_planted_world(seed: int = 7, *, object_name: str = "leopard",
                        dataset_tag: str = "imagenet", n_queries: int = 50,
                        planted_queries: int = 34, cohort_size: int = 20,
                        planted_per_cohort: int = 6, n_decoys: int = 1000,
                        layout: Optional[StubLayout] = None) -> PlantedWorld:
    """Build a world of n_queries*cohort_size targeted items plus decoys.

    Defaults give 2,000 items with 204 planted (10.2%) spread over 34 of the
    50 query cohorts.
    """
    layout = layout or StubLayout(semantic_dim=24, perceptual_dim=64)
    if layout.perceptual_dim < n_queries:
        raise WorldConstructionError(
            "perceptual_dim must be >= n_queries for orthogonal cohort centers"
        )
    obj = ObjectSpec(object_name, dataset_tag)
    suite = canonical_suite(layout, expected_query_count=n_queries)
    prompts = suite.llm.prompts_for(object_name)
    assert len(prompts) == n_queries

    rng = np.random.default_rng(seed)
    S, P = layout.semantic_dim, layout.perceptual_dim
    t = np.stack([suite.embedder.embed_text(p) for p in prompts])

    # Orthogonal perceptual cohort centers: rows of a random orthogonal matrix.
    q_mat, _ = np.linalg.qr(rng.normal(size=(P, P)))
    centers = q_mat[:n_queries]

    sem_noise = 0.25
    per_noise = 0.7

    items: list = []

    def add_item(sem: np.ndarray, per: np.ndarray, planted: bool, has_object: bool) -> None:
        x = np.zeros(layout.image_dim)
        x[:S] = sem
        x[S:S + P] = per
        x[layout.hal_index] = 1.0 if planted else 0.0
        x[layout.obj_index] = 1.0 if has_object else 0.0
        data = vector_to_image_bytes(x)
        chash = content_digest(decode_image(data))
        items.append(PlantedItem(
            item_id=f"syn-{len(items):05d}", data=data, content_hash=chash,
            planted=planted, has_object=has_object,
        ))

    for q in range(n_queries):
        n_planted = planted_per_cohort if q < planted_queries else 0
        n_obj = (cohort_size - n_planted + 1) // 2
        for i in range(cohort_size):
            sem = t[q] + rng.normal(0.0, sem_noise / np.sqrt(S), S)
            per = centers[q] + rng.normal(0.0, per_noise / np.sqrt(P), P)
            planted = i < n_planted
            has_object = (not planted) and (i < n_planted + n_obj)
            add_item(sem, per, planted, has_object)

    decoy_kinds = ["plain", "object", "both"]
    for d in range(n_decoys):
        sem = rng.normal(0.0, 0.6 / np.sqrt(S), S)
        per_dir = rng.normal(size=P)
        per = per_dir / np.linalg.norm(per_dir) + rng.normal(0.0, per_noise / np.sqrt(P), P)
        kind = decoy_kinds[d % 3] if d % 5 else "both"
        add_item(sem, per, planted=(kind == "both"), has_object=(kind in ("object", "both")))

    world = PlantedWorld(
        layout=layout, object=obj, suite=suite, items=items,
        n_queries=n_queries, prompts=prompts, expected_query_count=n_queries,
    )
    _verify_world(world, t, cohort_size, planted_queries, planted_per_cohort)
    return world


def _verify_world(world: PlantedWorld, t: np.ndarray, cohort_size: int,
                  planted_queries: int, planted_per_cohort: int) -> None:
    """Fail fast if the sampled world lacks the margins the tests rely on."""
    suite, layout = world.suite, world.layout
    items = world.items
    n_queries = world.n_queries

    embs = np.stack([suite.embedder.embed_image(it.data) for it in items])
    pers = np.stack([suite.perceptual.embed(it.data) for it in items])

    # 1. Retrieval exactness: top-cohort_size for each query is its cohort.
    for q in range(n_queries):
        sims = embs @ t[q]
        top = set(np.argsort(-sims)[:cohort_size])
        cohort = set(range(q * cohort_size, (q + 1) * cohort_size))
        if top != cohort:
            raise WorldConstructionError(f"query {q}: retrieval top-{cohort_size} is not its cohort")

    # 2. No intra-cohort perceptual near-duplicates (margin below 0.9), and
    #    mean intra-cohort distance far enough below the merge ceiling that
    #    average linkage reliably joins cohort pre-clusters.
    for q in range(n_queries):
        idx = range(q * cohort_size, (q + 1) * cohort_size)
        block = pers[list(idx)]
        sims = block @ block.T
        off = sims[~np.eye(cohort_size, dtype=bool)]
        if off.max() > 0.88:
            raise WorldConstructionError(f"cohort {q}: near-duplicate margin violated ({off.max():.3f})")
        mean_distance = float(np.mean(1.0 - off))
        if mean_distance > 0.45:
            raise WorldConstructionError(
                f"cohort {q}: mean intra-cohort distance {mean_distance:.3f} too close to ceiling"
            )

    # 3. Planted items of different cohorts stay well apart perceptually.
    planted_idx = [i for i, it in enumerate(items) if it.planted and i < n_queries * cohort_size]
    for a_pos, a in enumerate(planted_idx):
        block = pers[planted_idx[a_pos + 1:]]
        if len(block) == 0:
            continue
        sims = block @ pers[a]
        cohort_a = a // cohort_size
        foreign = [s for b, s in zip(planted_idx[a_pos + 1:], sims) if b // cohort_size != cohort_a]
        if foreign and max(foreign) > 0.39:
            raise WorldConstructionError("cross-cohort perceptual margin violated")

    # 4. Filters agree with ground truth for every item.
    for it in items:
        reply = suite.vlm.answer(it.data, "", object_name=world.object.name)
        p_det = max(suite.detector.propose(it.data, world.object.name), default=0.0)
        is_success = (reply.text == "Yes") and (p_det <= 0.1)
        if is_success != (it.planted and not it.has_object):
            raise WorldConstructionError(f"item {it.item_id}: filter truth mismatch")

    actual = sum(1 for it in items if it.planted and not it.has_object)
    if actual != planted_queries * planted_per_cohort:
        raise WorldConstructionError(
            f"ground truth count {actual} != {planted_queries * planted_per_cohort}"
            " (decoys must not be clean planted items)"
        )
