import io

import numpy as np
import pytest
from PIL import Image

from halmine.store import (
    DecodeError,
    RunStore,
    StageCompleteError,
    config_hash,
)
from halmine.types import Lineage

from conftest import make_stub_image


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def tiff_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="TIFF")
    return buf.getvalue()


INGEST = Lineage("ingest")


class TestPutImage:
    def test_same_bytes_stored_once(self, run_store, layout):
        data = make_stub_image(layout, seed=1)
        a = run_store.put_image(data, INGEST)
        b = run_store.put_image(data, INGEST)
        assert a.id == b.id
        assert a.content_hash == b.content_hash

    def test_distinct_images_distinct_hashes(self, run_store, layout):
        a = run_store.put_image(make_stub_image(layout, seed=1), INGEST)
        b = run_store.put_image(make_stub_image(layout, seed=2), INGEST)
        assert a.content_hash != b.content_hash
        assert a.id != b.id

    def test_truncated_stream_rejected(self, run_store, layout):
        data = make_stub_image(layout, seed=3)
        with pytest.raises(DecodeError):
            run_store.put_image(data[: len(data) // 2], INGEST)
        with pytest.raises(DecodeError):
            run_store.put_image(b"not an image at all", INGEST)

    def test_reencoded_pixels_collapse(self, run_store):
        arr = (np.arange(64, dtype=np.uint8).reshape(8, 8) * 3) % 251
        a = run_store.put_image(png_bytes(arr), INGEST)
        b = run_store.put_image(tiff_bytes(arr), INGEST)
        assert a.content_hash == b.content_hash

    def test_bytes_roundtrip(self, run_store, layout):
        data = make_stub_image(layout, seed=4)
        rec = run_store.put_image(data, INGEST)
        assert run_store.cache.load_bytes(rec.content_hash) == data
        assert run_store.cache.load_record(rec.content_hash).id == rec.id

    def test_fanout_layout(self, run_store, layout):
        rec = run_store.put_image(make_stub_image(layout, seed=5), INGEST)
        blob = run_store.workdir / "cache" / "images" / rec.content_hash[:2] / rec.content_hash
        assert blob.exists()


class TestAppendRecords:
    def test_zero_records(self, run_store):
        run_store.reset_stage("explore", "image-record")
        assert run_store.append_records("explore", "leopard", []) == 0
        assert not run_store.manifest.is_complete("explore")

    def test_count_returned(self, run_store):
        run_store.reset_stage("explore", "image-record")
        rows = [{"id": f"r{i}"} for i in range(1000)]
        assert run_store.append_records("explore", "leopard", rows) == 1000
        assert len(run_store.read_records("explore", "leopard")) == 1000

    def test_append_after_completion_rejected(self, run_store):
        run_store.reset_stage("explore", "image-record")
        run_store.append_records("explore", "leopard", [{"id": "r0"}])
        run_store.manifest.mark_complete("explore", counts={"leopard": 1})
        with pytest.raises(StageCompleteError):
            run_store.append_records("explore", "leopard", [{"id": "r1"}])
        with pytest.raises(StageCompleteError):
            run_store.reset_stage("explore", "image-record")

    def test_rewrite_is_byte_identical(self, tmp_path):
        rows = [{"id": f"r{i}", "value": i * 0.1} for i in range(50)]

        def write(run_id):
            store = RunStore(tmp_path, run_id, config={"seed": 0}, embedding_dim=8)
            store.reset_stage("explore", "image-record")
            store.append_records("explore", "obj", rows)
            return (store.stage_dir("explore") / "obj.records").read_bytes()

        assert write("run-a") == write("run-b")

    def test_schema_header_written(self, run_store):
        run_store.reset_stage("explore", "image-record")
        schema = (run_store.stage_dir("explore") / "schema.json").read_text()
        assert "image-record" in schema and "version" in schema


class TestManifest:
    def test_manifest_persistence(self, tmp_path):
        store = RunStore(tmp_path, "r1", config={"a": 1}, embedding_dim=24)
        store.manifest.mark_complete("gen-queries", counts={"leopard": 50})
        reopened = RunStore(tmp_path, "r1")
        assert reopened.manifest.is_complete("gen-queries")
        assert reopened.manifest.stage_info("gen-queries")["counts"] == {"leopard": 50}
        assert reopened.manifest.embedding_dim == 24

    def test_unknown_run_rejected(self, tmp_path):
        with pytest.raises(Exception):
            RunStore(tmp_path, "missing-run")

    def test_config_hash_stable_and_order_free(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})
