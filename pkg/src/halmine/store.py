"""Content-addressed image cache, append-only record stores, run manifest.

Layout:

    <workdir>/cache/images/<hh>/<hash>            raw image bytes
    <workdir>/cache/images/<hh>/<hash>.meta.json  decode metadata + first-put record
    <workdir>/runs/<run_id>/manifest              run manifest (JSON)
    <workdir>/runs/<run_id>/<stage>/schema.json   versioned schema header
    <workdir>/runs/<run_id>/<stage>/<object>.records  one JSON record per line

Record files are written with canonical JSON so a re-run with unchanged
config and upstream records is byte-identical. Stage record files allow a
single writer (file lock) and any number of readers; the image cache allows
concurrent writers because identical content lands on identical paths.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from filelock import FileLock
from PIL import Image, UnidentifiedImageError

from .types import ImageRecord, Lineage, dumps_canonical, stable_id

SCHEMA_VERSION = 1


class StoreError(Exception):
    """Base error for storage operations."""


class DecodeError(StoreError):
    """Input bytes do not decode to a valid raster image."""


class HashCollisionError(StoreError):
    """Same content hash, different decoded content. Should never happen."""


class StageCompleteError(StoreError):
    """Write attempted against a stage already marked complete."""


class UnknownImageError(StoreError):
    """Content hash not present in the cache."""


def decode_image(data: bytes) -> Image.Image:
    """Decode and fully load image bytes, raising DecodeError on failure."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
        return img
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"image decode failed: {exc}") from exc


def content_digest(img: Image.Image) -> str:
    """Digest of the decoded raster (mode, size, raw pixel bytes).

    Hashing decoded content rather than the byte stream makes re-encodings
    of identical pixels collapse onto one cache entry.
    """
    h = hashlib.sha256()
    h.update(img.mode.encode("ascii"))
    h.update(f":{img.width}x{img.height}:".encode("ascii"))
    h.update(img.tobytes())
    return h.hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


@dataclass(frozen=True)
class CachedImage:
    content_hash: str
    path: Path
    mode: str
    width: int
    height: int


class ImageCache:
    """Two-level fan-out content-addressed store for raw image bytes."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _paths(self, content_hash: str) -> tuple[Path, Path]:
        d = self.root / content_hash[:2]
        return d / content_hash, d / f"{content_hash}.meta.json"

    def put(self, data: bytes, lineage: Lineage, *, uri: str = "") -> ImageRecord:
        """Store bytes once per content hash and return the image record.

        Repeated puts of identical content return the record created by the
        first put (first lineage wins).
        """
        img = decode_image(data)
        chash = content_digest(img)
        blob_path, meta_path = self._paths(chash)
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            if (meta["mode"], meta["width"], meta["height"]) != (img.mode, img.width, img.height):
                raise HashCollisionError(
                    f"content hash {chash} already stored with different decoded content"
                )
            return ImageRecord.from_dict(meta["record"])
        record = ImageRecord(
            id=stable_id("image", chash),
            uri=uri,
            content_hash=chash,
            lineage=lineage,
        )
        blob_path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(blob_path, data)
        meta = {
            "mode": img.mode,
            "width": img.width,
            "height": img.height,
            "record": record.to_dict(),
        }
        _atomic_write(meta_path, dumps_canonical(meta).encode("utf-8"))
        return record

    def has(self, content_hash: str) -> bool:
        return self._paths(content_hash)[0].exists()

    def load_bytes(self, content_hash: str) -> bytes:
        blob_path, _ = self._paths(content_hash)
        if not blob_path.exists():
            raise UnknownImageError(f"no cached image for hash {content_hash}")
        return blob_path.read_bytes()

    def load_record(self, content_hash: str) -> ImageRecord:
        _, meta_path = self._paths(content_hash)
        if not meta_path.exists():
            raise UnknownImageError(f"no cached image for hash {content_hash}")
        return ImageRecord.from_dict(json.loads(meta_path.read_text())["record"])


class RunManifest:
    """Per-run manifest: config snapshot, stage markers, record counts."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._data: dict = {}
        if self.path.exists():
            self._data = json.loads(self.path.read_text())

    @classmethod
    def create(cls, path: Path, run_id: str, config: dict, embedding_dim: int) -> "RunManifest":
        m = cls(path)
        if not m._data:
            m._data = {
                "run_id": run_id,
                "config": config,
                "config_hash": config_hash(config),
                "embedding_dim": embedding_dim,
                "stages": {},
            }
            m.save()
        return m

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(self.path, json.dumps(self._data, sort_keys=True, indent=1).encode("utf-8"))

    @property
    def run_id(self) -> str:
        return self._data["run_id"]

    @property
    def config(self) -> dict:
        return self._data["config"]

    @property
    def config_hash(self) -> str:
        return self._data["config_hash"]

    @property
    def embedding_dim(self) -> int:
        return self._data["embedding_dim"]

    def stage_info(self, stage: str) -> dict:
        return self._data["stages"].get(stage, {})

    def is_complete(self, stage: str) -> bool:
        return bool(self.stage_info(stage).get("complete"))

    def mark_complete(self, stage: str, counts: Optional[dict] = None, info: Optional[dict] = None) -> None:
        entry = self._data["stages"].setdefault(stage, {})
        entry["complete"] = True
        if counts is not None:
            entry["counts"] = dict(sorted(counts.items()))
        if info:
            entry["info"] = info
        self.save()

    def clear_stage(self, stage: str) -> None:
        self._data["stages"].pop(stage, None)
        self.save()


def config_hash(config: dict) -> str:
    return hashlib.sha256(dumps_canonical(config).encode("utf-8")).hexdigest()[:16]


class RunStore:
    """Facade over cache, manifest and per-stage record files for one run."""

    def __init__(self, workdir: Path, run_id: str, *, config: Optional[dict] = None,
                 embedding_dim: Optional[int] = None):
        self.workdir = Path(workdir)
        self.run_id = run_id
        self.run_dir = self.workdir / "runs" / run_id
        self.cache = ImageCache(self.workdir / "cache" / "images")
        manifest_path = self.run_dir / "manifest"
        if config is not None:
            self.manifest = RunManifest.create(
                manifest_path, run_id, config, embedding_dim if embedding_dim is not None else 0
            )
        else:
            if not manifest_path.exists():
                raise StoreError(f"run {run_id} does not exist under {self.workdir}")
            self.manifest = RunManifest(manifest_path)

    # -- images ------------------------------------------------------------

    def put_image(self, data: bytes, lineage: Lineage, *, uri: str = "") -> ImageRecord:
        return self.cache.put(data, lineage, uri=uri)

    # -- stage record files --------------------------------------------------

    def stage_dir(self, stage: str) -> Path:
        return self.run_dir / stage

    def _records_path(self, stage: str, object_slug: str) -> Path:
        return self.stage_dir(stage) / f"{object_slug}.records"

    def reset_stage(self, stage: str, schema: str) -> None:
        """Clear a not-yet-complete stage so it restarts from scratch."""
        if self.manifest.is_complete(stage):
            raise StageCompleteError(f"stage {stage!r} is complete; refusing reset")
        d = self.stage_dir(stage)
        if d.exists():
            for p in sorted(d.iterdir()):
                p.unlink()
        d.mkdir(parents=True, exist_ok=True)
        header = {"schema": schema, "version": SCHEMA_VERSION, "stage": stage}
        _atomic_write(d / "schema.json", dumps_canonical(header).encode("utf-8"))

    def append_records(self, stage: str, object_slug: str, rows: Sequence[dict]) -> int:
        """Durably append rows to a stage record file; error once complete."""
        if self.manifest.is_complete(stage):
            raise StageCompleteError(
                f"stage {stage!r} already marked complete; re-run would duplicate records"
            )
        path = self._records_path(stage, object_slug)
        path.parent.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(path) + ".lock")
        with lock:
            with open(path, "a", encoding="utf-8") as fh:
                for row in rows:
                    fh.write(dumps_canonical(row))
                    fh.write("\n")
                fh.flush()
                os.fsync(fh.fileno())
        return len(rows)

    def read_records(self, stage: str, object_slug: str) -> list[dict]:
        path = self._records_path(stage, object_slug)
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]

    def iter_stage_records(self, stage: str) -> Iterable[tuple[str, dict]]:
        d = self.stage_dir(stage)
        if not d.exists():
            return
        for path in sorted(d.glob("*.records")):
            slug = path.stem
            for line in path.read_text(encoding="utf-8").splitlines():
                if line:
                    yield slug, json.loads(line)

    def stage_object_slugs(self, stage: str) -> list[str]:
        d = self.stage_dir(stage)
        if not d.exists():
            return []
        return sorted(p.stem for p in d.glob("*.records"))
