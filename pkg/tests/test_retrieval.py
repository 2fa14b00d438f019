import numpy as np
import pytest

from halmine.prompts import load_question_bank
from halmine.retrieval import (
    FilterPolicy,
    RetrievalConfig,
    SyntheticIndex,
    dedup,
    explore,
    exploit,
    fetch_uri,
    FetchError,
)
from halmine.store import RunStore
from halmine.stubs import StubLayout, StubPerceptual
from halmine.synthetic import build_planted_world
from halmine.types import ObjectSpec


@pytest.fixture(scope="module")
def world():
    return build_planted_world(seed=7)


@pytest.fixture(scope="module")
def world_run(tmp_path_factory, world):
    """Exploration executed once against the planted world."""
    tmp = tmp_path_factory.mktemp("world-run")
    store = RunStore(tmp, "retrieval-run", config={"seed": 7}, embedding_dim=24)
    bank = load_question_bank()
    index = world.index_in_memory()
    from halmine.llm_queries import generate_text_queries
    from halmine.prompts import hallucination_protocol

    queries = generate_text_queries(
        world.suite.llm, world.suite.embedder, world.object, hallucination_protocol()
    )
    policy = FilterPolicy(mode="hallucination")
    result = explore(queries, index, world.suite, policy, store, bank,
                     fetcher=world.fetcher())
    return store, bank, index, queries, policy, result


class TestFilterPolicy:
    def test_hallucination_predicate(self):
        p = FilterPolicy(mode="hallucination")
        assert p.keep(0.05, "yes")
        assert p.keep(0.1, "yes")
        assert not p.keep(0.11, "yes")
        assert not p.keep(0.05, "no")
        assert not p.keep(0.05, "invalid")

    def test_reverse_predicate(self):
        p = FilterPolicy(mode="reverse")
        assert p.keep(0.5, "no")
        assert p.keep(0.9, "no")
        assert not p.keep(0.4, "no")
        assert not p.keep(0.9, "yes")
        assert not p.keep(0.9, "invalid")

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            FilterPolicy(det_reject=0.0)
        with pytest.raises(ValueError):
            FilterPolicy(det_accept=1.0)
        with pytest.raises(ValueError):
            FilterPolicy(mode="other")


class TestSyntheticIndex:
    def test_sorted_descending_and_bounded(self, world):
        index = world.index_in_memory()
        emb = world.suite.embedder.embed_image(world.items[0].data)
        hits = index.query(emb, 10, overfetch=2)
        assert len(hits) == 20
        sims = [h.similarity for h in hits]
        assert sims == sorted(sims, reverse=True)
        assert all(-1.0 <= s <= 1.0 for s in sims)

    def test_from_directory(self, tmp_path, world):
        for it in world.items[:5]:
            (tmp_path / f"{it.item_id}.tiff").write_bytes(it.data)
        index = SyntheticIndex.from_directory(tmp_path, world.suite.embedder, "*.tiff")
        assert index.size == 5
        emb = world.suite.embedder.embed_image(world.items[0].data)
        hits = index.query(emb, 1)
        assert hits[0].item_id == world.items[0].item_id
        assert hits[0].similarity == pytest.approx(1.0)


class TestDedup:
    def unit(self, v):
        v = np.asarray(v, dtype=float)
        return v / np.linalg.norm(v)

    def test_all_near_duplicates_keep_first(self, layout):
        per = StubPerceptual(layout)
        base = self.unit(np.arange(1, layout.perceptual_dim + 1))
        items = [self.unit(base + 0.01 * i) for i in range(6)]
        sims = [per.similarity(a, b) for a in items for b in items]
        assert min(sims) > 0.95
        retained = dedup(items, per, threshold=0.9)
        assert len(retained) == 1
        assert retained[0] is items[0]

    def test_all_distant_retained(self, layout):
        per = StubPerceptual(layout)
        items = [self.unit(np.eye(layout.perceptual_dim)[i]) for i in range(layout.perceptual_dim)]
        retained = dedup(items, per, threshold=0.9)
        assert len(retained) == len(items)

    def test_seed_excludes_self(self, layout):
        per = StubPerceptual(layout)
        seed = self.unit(np.arange(1, layout.perceptual_dim + 1))
        items = [seed.copy(), self.unit(np.eye(layout.perceptual_dim)[0])]
        retained = dedup(items, per, threshold=0.9, seed_embedding=seed)
        assert len(retained) == 1

    def test_retained_pair_free_brute_force(self, layout):
        """Greedy result verified duplicate-free by exhaustive pairwise check."""
        per = StubPerceptual(layout)
        rng = np.random.default_rng(0)
        for trial in range(200):
            items = [self.unit(rng.normal(size=layout.perceptual_dim)) for _ in range(20)]
            retained = dedup(items, per, threshold=0.9)
            for i in range(len(retained)):
                for j in range(i + 1, len(retained)):
                    assert per.similarity(retained[i], retained[j]) <= 0.9
            # dropping respects rank order: each dropped item collides with
            # an earlier retained item
            retained_ids = {id(r) for r in retained}
            kept_so_far = []
            for item in items:
                if id(item) in retained_ids:
                    kept_so_far.append(item)
                else:
                    assert any(per.similarity(item, k) > 0.9 for k in kept_so_far)


class TestExplore:
    def test_survivors_equal_planted_truth(self, world, world_run):
        _, _, _, _, _, result = world_run
        survivor_hashes = {r.content_hash for r in result.survivors}
        assert survivor_hashes == world.planted_hashes
        assert all(r.passed_filter for r in result.survivors)

    def test_filter_invariant_on_survivors(self, world_run):
        _, _, _, _, _, result = world_run
        for rec in result.survivors:
            det = next(e for e in rec.evaluations if e.p_det is not None)
            vlm = next(e for e in rec.evaluations if e.answer is not None)
            assert det.p_det <= 0.1
            assert vlm.answer == "yes"

    def test_rejects_recorded_with_evaluations(self, world_run):
        _, _, _, _, _, result = world_run
        rejects = [r for r in result.records if not r.passed_filter]
        assert rejects, "planted world must produce rejects"
        assert all(r.evaluations for r in rejects)
        detector_rejects = [
            r for r in rejects
            if r.evaluations[0].p_det is not None and r.evaluations[0].p_det > 0.1
        ]
        assert detector_rejects
        assert all(len(r.evaluations) == 1 for r in detector_rejects)

    def test_output_bounded_by_queries_times_k(self, world_run):
        _, _, _, queries, _, result = world_run
        assert len(result.records) <= len(queries) * 20

    def test_full_prefilter_volume(self, world_run):
        # disjoint planted cohorts: 50 queries x 20 retained, no duplicates
        _, _, _, _, _, result = world_run
        assert len(result.records) == 1000

    def test_lineage_points_to_queries(self, world_run):
        _, _, _, queries, _, result = world_run
        qids = {q.id for q in queries}
        assert all(r.lineage.stage == "exploration" for r in result.records)
        assert all(r.lineage.parent_query_id in qids for r in result.records)


class TestReverseMode:
    def test_reverse_policy_filters(self, world, tmp_path, bank):
        store = RunStore(tmp_path, "rev-run", config={}, embedding_dim=24)
        index = world.index_in_memory()
        from halmine.llm_queries import generate_text_queries
        from halmine.prompts import hallucination_protocol

        queries = generate_text_queries(
            world.suite.llm, world.suite.embedder, world.object, hallucination_protocol()
        )
        result = explore(queries, index, world.suite, FilterPolicy(mode="reverse"),
                         store, bank, fetcher=world.fetcher())
        assert result.survivors, "reverse mode should find object images the VLM denies"
        for rec in result.survivors:
            det = next(e for e in rec.evaluations if e.p_det is not None)
            vlm = next(e for e in rec.evaluations if e.answer is not None)
            assert det.p_det >= 0.5
            assert vlm.answer == "no"


class TestExploit:
    def test_parent_recorded_and_survivors_planted(self, world, world_run):
        store, bank, index, _, policy, explored = world_run
        result = exploit(explored.survivors, index, world.suite, policy, store,
                         bank, world.object, fetcher=world.fetcher())
        assert {r.content_hash for r in result.survivors} == world.planted_hashes
        seed_ids = {r.id for r in explored.survivors}
        for rec in result.records:
            assert rec.lineage.stage == "exploitation"
            assert rec.lineage.parent_image_id in seed_ids
        assert len(result.records) <= len(explored.survivors) * 50

    def test_zero_survivors_for_object_neighborhood(self, world, tmp_path, bank):
        # a seed whose neighbors all contain the object yields an empty pre-cluster
        store = RunStore(tmp_path, "exploit-run2", config={}, embedding_dim=24)
        obj_items = [it for it in world.items if it.has_object and not it.planted][:20]
        directory = tmp_path / "imgs"
        directory.mkdir()
        for it in obj_items:
            (directory / f"{it.item_id}.tiff").write_bytes(it.data)
        index = SyntheticIndex.from_directory(directory, world.suite.embedder, "*.tiff")
        from halmine.types import ImageRecord, Lineage
        seed_item = obj_items[0]
        seed = ImageRecord(
            id="seed-0", uri="", content_hash="0" * 64,
            lineage=Lineage("exploration", parent_query_id="q0"),
            embedding=world.suite.embedder.embed_image(seed_item.data),
            perceptual_embedding=world.suite.perceptual.embed(seed_item.data),
        )
        result = exploit([seed], index, world.suite, FilterPolicy(), store, bank, world.object)
        assert result.survivors == []
        assert result.stats.detector_rejects > 0


class TestFetch:
    def test_missing_file_raises_after_retries(self, tmp_path):
        with pytest.raises(FetchError):
            fetch_uri(str(tmp_path / "nope.tiff"), max_retries=2)

    def test_file_uri_scheme(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"abc")
        assert fetch_uri(f"file://{p}") == b"abc"
        assert fetch_uri(str(p)) == b"abc"

    def test_unreachable_uris_counted_not_fatal(self, world, tmp_path, bank):
        store = RunStore(tmp_path, "fetch-run", config={}, embedding_dim=24)
        items = world.items[:10]
        embs = np.stack([world.suite.embedder.embed_image(it.data) for it in items])
        # half the uris point nowhere
        uris = []
        for i, it in enumerate(items):
            if i % 2 == 0:
                p = tmp_path / f"{it.item_id}.tiff"
                p.write_bytes(it.data)
                uris.append(str(p))
            else:
                uris.append(str(tmp_path / "missing" / f"{it.item_id}.tiff"))
        index = SyntheticIndex([it.item_id for it in items], uris, embs)
        from halmine.types import Query
        q = Query(id="q0", object=world.object, kind="text", payload="p",
                  embedding=embs[0], origin="llm")
        result = explore([q], index, world.suite, FilterPolicy(), store, bank,
                         RetrievalConfig(explore_k=10, max_fetch_retries=1))
        assert result.stats.fetch_failures == 5
        assert len(result.records) == 5
