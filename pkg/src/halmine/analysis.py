"""Quantitative summaries over mined records.

Metric code consumes per-record verdicts through a small VerdictSource
interface so the same aggregation paths run against live adapters or
against shipped replay fixtures encoding published rates. Denominators
exclude invalid replies everywhere; invalid replies are counted and
reported, never treated as "no".
"""
from __future__ import annotations

import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, Optional, Sequence

import numpy as np

from .prompts import MAIN_TEMPLATE_ID, QuestionBank
from .types import Cluster, ObjectSpec

DATASET_TAGS_ICO = ("imagenet", "coco", "objects365")


@dataclass(frozen=True)
class EvalItem:
    """One image to evaluate: identity plus the object asked about."""

    record_id: str
    object: ObjectSpec
    content_hash: str = ""


class VerdictSource(ABC):
    """Yes/no/invalid verdicts for (item, template) pairs."""

    model_id: str = "verdict-source"

    @abstractmethod
    def verdict(self, item: EvalItem, template_id: str = MAIN_TEMPLATE_ID) -> str:
        ...


class AdapterVerdictSource(VerdictSource):
    """Live evaluation through a VLM adapter, cached per content hash."""

    def __init__(self, vlm, bank: QuestionBank, store, fallback_bytes: Optional[dict] = None):
        from .adapters import ask_yes_no  # local import avoids a cycle at import time

        self._ask = ask_yes_no
        self.vlm = vlm
        self.model_id = vlm.model_id
        self.bank = bank
        self.store = store
        self.fallback_bytes = fallback_bytes or {}
        self._cache: dict = {}

    def _load(self, item: EvalItem) -> bytes:
        if item.content_hash in self.fallback_bytes:
            return self.fallback_bytes[item.content_hash]
        return self.store.cache.load_bytes(item.content_hash)

    def verdict(self, item: EvalItem, template_id: str = MAIN_TEMPLATE_ID) -> str:
        key = (item.content_hash or item.record_id, item.object.name, template_id)
        if key not in self._cache:
            ev = self._ask(self.vlm, self._load(item), item.object, self.bank, template_id)
            self._cache[key] = ev.answer
        return self._cache[key]


class ReplayVerdictSource(VerdictSource):
    """Deterministic verdicts realizing fixed per-template yes/invalid counts.

    Items are ranked by record id; the first ``yes`` ranks answer yes, the
    last ``invalid`` ranks are invalid, the rest answer no. This realizes a
    published rate exactly for the fixture's item count.
    """

    def __init__(self, model_id: str, counts: Dict[str, dict], item_ids: Sequence[str]):
        self.model_id = model_id
        self.counts = counts
        self._rank = {rid: i for i, rid in enumerate(sorted(item_ids))}
        self._n = len(item_ids)

    def verdict(self, item: EvalItem, template_id: str = MAIN_TEMPLATE_ID) -> str:
        spec = self.counts.get(template_id)
        if spec is None:
            raise KeyError(f"replay fixture has no counts for template {template_id!r}")
        rank = self._rank[item.record_id]
        n_yes = int(spec.get("yes", 0))
        n_invalid = int(spec.get("invalid", 0))
        if rank < n_yes:
            return "yes"
        if rank >= self._n - n_invalid:
            return "invalid"
        return "no"


def replay_items(n: int, obj: Optional[ObjectSpec] = None, prefix: str = "r") -> list:
    obj = obj or ObjectSpec("replay object", "coco")
    return [EvalItem(record_id=f"{prefix}{i:05d}", object=obj) for i in range(n)]


def load_replay_fixture(name: str) -> dict:
    text = resources.files("halmine.data.replay").joinpath(name).read_text(encoding="utf-8")
    return json.loads(text)


# ---------------------------------------------------------------------------
# Transfer rate
# ---------------------------------------------------------------------------

@dataclass
class TransferReport:
    source_run_id: str
    target_model_id: str
    n_images: int
    yes_count: int
    invalid_count: int
    unreliable: bool = False

    @property
    def transfer_rate(self) -> float:
        valid = self.n_images - self.invalid_count
        return self.yes_count / valid if valid else 0.0

    def to_dict(self) -> dict:
        return {
            "source_run_id": self.source_run_id,
            "target_model_id": self.target_model_id,
            "n_images": self.n_images,
            "yes_count": self.yes_count,
            "invalid_count": self.invalid_count,
            "transfer_rate": self.transfer_rate,
            "unreliable": self.unreliable,
        }


def transfer_rate(items: Sequence[EvalItem], verdicts: VerdictSource,
                  template_id: str = MAIN_TEMPLATE_ID,
                  source_run_id: str = "") -> TransferReport:
    """Fraction of mined images that also trigger a yes on the target model."""
    yes = invalid = 0
    for item in items:
        answer = verdicts.verdict(item, template_id)
        if answer == "yes":
            yes += 1
        elif answer == "invalid":
            invalid += 1
    report = TransferReport(
        source_run_id=source_run_id,
        target_model_id=verdicts.model_id,
        n_images=len(items),
        yes_count=yes,
        invalid_count=invalid,
    )
    if not items or invalid > 0.5 * len(items):
        report.unreliable = True
    return report


# ---------------------------------------------------------------------------
# True positive rate over verified-positive images
# ---------------------------------------------------------------------------

@dataclass
class TprReport:
    per_dataset: dict = field(default_factory=dict)     # tag -> rate over valid
    macro_average: Optional[float] = None
    excluded_objects: list = field(default_factory=list)
    missing_datasets: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_dataset": dict(sorted(self.per_dataset.items())),
            "macro_average": self.macro_average,
            "excluded_objects": sorted(self.excluded_objects),
            "missing_datasets": sorted(self.missing_datasets),
        }


def tpr_ico(positives_by_object: Dict[str, Sequence[EvalItem]], verdicts: VerdictSource,
            template_id: str = MAIN_TEMPLATE_ID) -> TprReport:
    """Per-dataset TPR (yes over valid) and the macro average across datasets.

    Objects with zero positives are excluded and reported.
    """
    report = TprReport()
    counts: dict = {}
    for obj_name, items in sorted(positives_by_object.items()):
        if not items:
            report.excluded_objects.append(obj_name)
            continue
        tag = items[0].object.dataset_tag
        yes, valid = counts.get(tag, (0, 0))
        for item in items:
            answer = verdicts.verdict(item, template_id)
            if answer == "yes":
                yes += 1
                valid += 1
            elif answer == "no":
                valid += 1
        counts[tag] = (yes, valid)
    for tag, (yes, valid) in sorted(counts.items()):
        if valid:
            report.per_dataset[tag] = yes / valid
    report.missing_datasets = [t for t in DATASET_TAGS_ICO if t not in report.per_dataset]
    present = [report.per_dataset[t] for t in DATASET_TAGS_ICO if t in report.per_dataset]
    if present:
        report.macro_average = float(np.mean(present))
    return report


# ---------------------------------------------------------------------------
# Prompt-suite transfer
# ---------------------------------------------------------------------------

@dataclass
class PromptSuiteReport:
    per_template: dict = field(default_factory=dict)    # template id -> rate
    mean: Optional[float] = None
    std: Optional[float] = None
    n_items: int = 0

    def to_dict(self) -> dict:
        return {
            "per_template": dict(sorted(self.per_template.items())),
            "mean": self.mean,
            "std": self.std,
            "n_items": self.n_items,
        }


def prompt_transfer(items: Sequence[EvalItem], verdicts: VerdictSource,
                    template_ids: Sequence[str]) -> PromptSuiteReport:
    """Yes-rate per question template plus mean and sample std across templates.

    The spread is the sample standard deviation (n-1 denominator), matching
    the convention the published per-column spreads follow.
    """
    report = PromptSuiteReport(n_items=len(items))
    for tid in template_ids:
        yes = valid = 0
        for item in items:
            answer = verdicts.verdict(item, tid)
            if answer == "yes":
                yes += 1
                valid += 1
            elif answer == "no":
                valid += 1
        report.per_template[tid] = yes / valid if valid else 0.0
    rates = [report.per_template[t] for t in template_ids]
    if rates:
        report.mean = float(np.mean(rates))
        report.std = float(np.std(rates, ddof=1)) if len(rates) > 1 else 0.0
    return report


# ---------------------------------------------------------------------------
# Minimum query distance histogram
# ---------------------------------------------------------------------------

@dataclass
class MinDistanceHistogram:
    raw: list = field(default_factory=list)
    bin_edges: list = field(default_factory=list)
    counts: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"raw": self.raw, "bin_edges": self.bin_edges, "counts": self.counts}


def min_query_distance(record_embeddings: Sequence[np.ndarray],
                       query_embeddings: Sequence[np.ndarray],
                       bins: int = 20) -> MinDistanceHistogram:
    """Per record, the minimum 1 - dot(query, record) over the text queries.

    Embeddings must be unit-norm so the dot product is the cosine.
    """
    if not len(query_embeddings):
        raise ValueError("at least one query embedding required")
    q = np.stack([np.asarray(e, dtype=np.float64) for e in query_embeddings])
    raw = []
    for emb in record_embeddings:
        sims = q @ np.asarray(emb, dtype=np.float64)
        raw.append(float(1.0 - sims.max()))
    counts, edges = np.histogram(raw, bins=bins, range=(0.0, 2.0))
    return MinDistanceHistogram(
        raw=raw,
        bin_edges=[float(e) for e in edges],
        counts=[int(c) for c in counts],
    )


# ---------------------------------------------------------------------------
# Frequency-split aggregation and mining totals
# ---------------------------------------------------------------------------

def frequency_report(clusters: Sequence[Cluster], objects: Sequence[ObjectSpec]) -> dict:
    """Average success images per object, grouped by frequency split.

    Only objects carrying a split tag participate; splits with no objects
    are absent from the report.
    """
    totals = {obj.name: 0 for obj in objects if obj.frequency_split is not None}
    split_of = {obj.name: obj.frequency_split for obj in objects
                if obj.frequency_split is not None}
    for cluster in clusters:
        name = cluster.object.name
        if name in totals:
            totals[name] += cluster.size
    out: dict = {}
    for name, total in totals.items():
        split = split_of[name]
        bucket = out.setdefault(split, {"objects": 0, "total_images": 0})
        bucket["objects"] += 1
        bucket["total_images"] += total
    for split, bucket in out.items():
        bucket["mean_images_per_object"] = bucket["total_images"] / bucket["objects"]
    return dict(sorted(out.items()))


def mining_summary(clusters: Sequence[Cluster], objects: Sequence[ObjectSpec]) -> dict:
    """Mining totals: images, clusters, and the two averages.

    avg_images_per_cluster is defined as total_images / total_clusters, so
    the identity avg * clusters == images holds exactly.
    """
    total_images = sum(c.size for c in clusters)
    total_clusters = len(clusters)
    return {
        "total_images": total_images,
        "total_clusters": total_clusters,
        "avg_clusters_per_object": total_clusters / len(objects) if objects else 0.0,
        "avg_images_per_cluster": total_images / total_clusters if total_clusters else 0.0,
    }


# ---------------------------------------------------------------------------
# Report writing
# ---------------------------------------------------------------------------

def write_columnar(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    """Tab-separated columnar text report."""
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)
