import pytest

from halmine.analysis import EvalItem, ReplayVerdictSource
from halmine.benchmark import PositiveImage
from halmine.finetune import (
    FinetuneConfig,
    export_dataset,
    load_export,
    split_validation,
    write_export,
)
from halmine.prompts import load_question_bank
from halmine.types import Cluster, ObjectSpec


@pytest.fixture(scope="module")
def bank():
    return load_question_bank()


def cluster(obj, cid, size):
    return Cluster(id=cid, object=obj, members=[f"{cid}-m{i:03d}" for i in range(size)])


class TestSplitValidation:
    def setup_method(self):
        self.obj = ObjectSpec("dam", "objects365")

    def test_largest_cluster_held_out(self):
        clusters = [cluster(self.obj, "c-small", 34), cluster(self.obj, "c-big", 57)]
        split = split_validation({"dam": clusters})
        assert split.validation_cluster["dam"] == "c-big"
        assert len(split.validation_members["dam"]) == 57
        assert len(split.train_pool["dam"]) == 34

    def test_tie_breaks_on_id(self):
        clusters = [cluster(self.obj, "c-b", 10), cluster(self.obj, "c-a", 10)]
        split = split_validation({"dam": clusters})
        assert split.validation_cluster["dam"] == "c-a"

    def test_single_cluster_object_flagged(self):
        split = split_validation({"dam": [cluster(self.obj, "c-only", 12)]})
        assert split.train_pool["dam"] == []
        assert split.flagged_empty_train == ["dam"]

    def test_zero_cluster_object_excluded(self):
        split = split_validation({"dam": []})
        assert split.excluded_objects == ["dam"]
        assert "dam" not in split.train_pool

    def test_validation_and_train_disjoint(self):
        clusters = [cluster(self.obj, f"c{i}", 5 + i) for i in range(6)]
        split = split_validation({"dam": clusters})
        val = split.validation_members["dam"]
        train = set(split.train_pool["dam"])
        assert val & train == set()
        assert val | train == {m for c in clusters for m in c.members}


def make_pool(obj, n, prefix="n"):
    return [
        EvalItem(record_id=f"{prefix}{i:04d}", object=obj, content_hash=f"h{prefix}{i:04d}")
        for i in range(n)
    ]


def all_no_sources(items, ids=("holdout-a", "holdout-b")):
    rids = [i.record_id for i in items]
    return [ReplayVerdictSource(mid, {"main": {"yes": 0}}, rids) for mid in ids]


def positives_for(obj, n):
    return [PositiveImage(object=obj, content_hash=f"p{i:04d}", verified=True)
            for i in range(n)]


class TestExportDataset:
    def setup_method(self):
        self.obj = ObjectSpec("dam", "objects365")
        self.cfg = FinetuneConfig(seed=13)

    def test_counts_under_sufficient_supply(self, bank):
        pool = {"dam": make_pool(self.obj, 500)}
        positives = {"dam": positives_for(self.obj, 600)}
        result = export_dataset(pool, positives, self.cfg, bank,
                                holdout_vlms=all_no_sources(pool["dam"]))
        assert result.per_object["dam"] == {"negatives": 200, "positives": 400}
        assert len(result.negatives) == 200
        assert len(result.positives) == 400

    def test_ratio_two_to_one(self, bank):
        pool = {"dam": make_pool(self.obj, 1000)}
        positives = {"dam": positives_for(self.obj, 1000)}
        result = export_dataset(pool, positives, self.cfg, bank,
                                holdout_vlms=all_no_sources(pool["dam"]))
        assert len(result.positives) == 2 * len(result.negatives)

    def test_short_supply_not_padded(self, bank):
        pool = {"dam": make_pool(self.obj, 50)}
        positives = {"dam": positives_for(self.obj, 30)}
        result = export_dataset(pool, positives, self.cfg, bank,
                                holdout_vlms=all_no_sources(pool["dam"]))
        assert result.per_object["dam"] == {"negatives": 50, "positives": 30}

    def test_benchmark_negatives_excluded(self, bank):
        pool = {"dam": make_pool(self.obj, 300)}
        banned = {item.content_hash for item in pool["dam"][:100]}
        result = export_dataset(pool, {"dam": positives_for(self.obj, 400)}, self.cfg,
                                bank, holdout_vlms=all_no_sources(pool["dam"]),
                                benchmark_hashes=banned)
        exported = {s.content_hash for s in result.negatives}
        assert exported & banned == set()
        assert len(result.negatives) == 200

    def test_validation_members_excluded(self, bank):
        pool = {"dam": make_pool(self.obj, 250)}
        held = {item.record_id for item in pool["dam"][:100]}
        result = export_dataset(pool, {"dam": positives_for(self.obj, 400)}, self.cfg,
                                bank, holdout_vlms=all_no_sources(pool["dam"]),
                                validation_members=held)
        exported_ids = {s.content_hash for s in result.negatives}
        banned_hashes = {item.content_hash for item in pool["dam"][:100]}
        assert exported_ids & banned_hashes == set()
        assert len(result.negatives) == 150

    def test_holdout_yes_disqualifies(self, bank):
        pool = {"dam": make_pool(self.obj, 100)}
        rids = [i.record_id for i in pool["dam"]]
        says_no = ReplayVerdictSource("holdout-a", {"main": {"yes": 0}}, rids)
        says_yes_on_40 = ReplayVerdictSource("holdout-b", {"main": {"yes": 40}}, rids)
        result = export_dataset(pool, {"dam": positives_for(self.obj, 10)}, self.cfg,
                                bank, holdout_vlms=[says_no, says_yes_on_40])
        assert len(result.negatives) == 60

    def test_invalid_holdout_reply_disqualifies(self, bank):
        pool = {"dam": make_pool(self.obj, 10)}
        rids = [i.record_id for i in pool["dam"]]
        sometimes_invalid = ReplayVerdictSource("holdout-a", {"main": {"yes": 0, "invalid": 3}},
                                                rids)
        says_no = ReplayVerdictSource("holdout-b", {"main": {"yes": 0}}, rids)
        result = export_dataset(pool, {"dam": positives_for(self.obj, 10)}, self.cfg,
                                bank, holdout_vlms=[sometimes_invalid, says_no])
        assert len(result.negatives) == 7

    def test_seeded_determinism_byte_identical(self, bank, tmp_path):
        pool = {"dam": make_pool(self.obj, 500)}
        positives = {"dam": positives_for(self.obj, 600)}

        def run(path):
            result = export_dataset(pool, positives, self.cfg, bank,
                                    holdout_vlms=all_no_sources(pool["dam"]))
            write_export(path, result)
            return path.read_bytes()

        assert run(tmp_path / "a.records") == run(tmp_path / "b.records")

    def test_different_seed_different_sample(self, bank):
        pool = {"dam": make_pool(self.obj, 500)}
        positives = {"dam": positives_for(self.obj, 600)}
        a = export_dataset(pool, positives, FinetuneConfig(seed=1), bank,
                           holdout_vlms=all_no_sources(pool["dam"]))
        b = export_dataset(pool, positives, FinetuneConfig(seed=2), bank,
                           holdout_vlms=all_no_sources(pool["dam"]))
        assert {s.content_hash for s in a.negatives} != {s.content_hash for s in b.negatives}

    def test_rows_carry_question_and_target(self, bank, tmp_path):
        pool = {"dam": make_pool(self.obj, 10)}
        result = export_dataset(pool, {"dam": positives_for(self.obj, 10)}, self.cfg,
                                bank, holdout_vlms=all_no_sources(pool["dam"]))
        path = tmp_path / "out.records"
        write_export(path, result)
        header, samples = load_export(path)
        assert header["schema"] == "finetune-export"
        assert "benchmark_exclusion_digest" in header
        for row in samples:
            assert row["question"] == \
                "Can you see a dam in this image? Please answer only with yes or no."
            assert row["answer"] in ("No", "Yes")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FinetuneConfig(negatives_per_object=0)
