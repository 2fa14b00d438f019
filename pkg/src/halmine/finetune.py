"""Mitigation fine-tuning dataset export.

Per object the largest mined cluster is held out for validation; the
remaining records form the train pool. Negatives are sampled from the pool
(seeded, deterministic) after requiring both holdout models to answer no
and excluding every benchmark negative; positives come from the verified
manifest. Exported rows pair the standard question with the target token.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .analysis import EvalItem, VerdictSource
from .prompts import MAIN_TEMPLATE_ID, QuestionBank
from .types import Cluster, ObjectSpec, dumps_canonical


@dataclass(frozen=True)
class FinetuneConfig:
    negatives_per_object: int = 200
    positives_per_object: int = 400
    holdout_model_ids: tuple = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.negatives_per_object <= 0 or self.positives_per_object <= 0:
            raise ValueError("per-object sample counts must be positive")


@dataclass
class ValidationSplit:
    validation_cluster: dict = field(default_factory=dict)   # object -> cluster id
    validation_members: dict = field(default_factory=dict)   # object -> set of ids
    train_pool: dict = field(default_factory=dict)           # object -> [record ids]
    flagged_empty_train: list = field(default_factory=list)
    excluded_objects: list = field(default_factory=list)

    def all_validation_members(self) -> set:
        out: set = set()
        for members in self.validation_members.values():
            out |= members
        return out


def split_validation(clusters_by_object: Dict[str, Sequence[Cluster]]) -> ValidationSplit:
    """Hold out one whole cluster per object: the largest, ties by id.

    All other cluster members form that object's train pool. Objects with no
    clusters are excluded; single-cluster objects end up with an empty train
    pool and are flagged.
    """
    split = ValidationSplit()
    for name in sorted(clusters_by_object):
        clusters = list(clusters_by_object[name])
        if not clusters:
            split.excluded_objects.append(name)
            continue
        chosen = min(clusters, key=lambda c: (-c.size, c.id))
        split.validation_cluster[name] = chosen.id
        split.validation_members[name] = set(chosen.members)
        pool = [m for c in clusters if c.id != chosen.id for m in c.members]
        split.train_pool[name] = pool
        if not pool:
            split.flagged_empty_train.append(name)
    return split


@dataclass
class ExportSample:
    content_hash: str
    object: ObjectSpec
    question: str
    answer: str                 # "No" for mined negatives, "Yes" for positives

    def to_dict(self) -> dict:
        return {
            "image": self.content_hash,
            "object": self.object.to_dict(),
            "question": self.question,
            "answer": self.answer,
        }


@dataclass
class ExportResult:
    samples: list = field(default_factory=list)
    per_object: dict = field(default_factory=dict)     # name -> {negatives, positives}
    header: dict = field(default_factory=dict)

    @property
    def negatives(self) -> list:
        return [s for s in self.samples if s.answer == "No"]

    @property
    def positives(self) -> list:
        return [s for s in self.samples if s.answer == "Yes"]


def _object_rng(seed: int, object_name: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{object_name}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def export_dataset(pool: Dict[str, Sequence[EvalItem]], positives: Dict[str, list],
                   cfg: FinetuneConfig, bank: QuestionBank,
                   holdout_vlms: Sequence[VerdictSource] = (),
                   benchmark_hashes: Optional[set] = None,
                   validation_members: Optional[set] = None,
                   template_id: str = MAIN_TEMPLATE_ID) -> ExportResult:
    """Sample per-object negatives and positives into prompt/answer rows.

    Negatives must carry a "no" from every holdout model, must not appear in
    the benchmark, and must not belong to a validation cluster. Short supply
    exports fewer samples; nothing is padded.
    """
    benchmark_hashes = benchmark_hashes or set()
    validation_members = validation_members or set()
    result = ExportResult()

    for name in sorted(pool):
        items = sorted(pool[name], key=lambda i: i.content_hash or i.record_id)
        eligible = []
        for item in items:
            if item.content_hash in benchmark_hashes:
                continue
            if item.record_id in validation_members or item.content_hash in validation_members:
                continue
            if any(v.verdict(item, template_id) != "no" for v in holdout_vlms):
                continue
            eligible.append(item)
        rng = _object_rng(cfg.seed, name)
        n_neg = min(cfg.negatives_per_object, len(eligible))
        chosen_idx = sorted(rng.choice(len(eligible), size=n_neg, replace=False).tolist()) \
            if eligible else []
        for idx in chosen_idx:
            item = eligible[idx]
            result.samples.append(ExportSample(
                content_hash=item.content_hash or item.record_id,
                object=item.object,
                question=bank.render(template_id, item.object.name),
                answer="No",
            ))
        verified = sorted(
            (p for p in positives.get(name, []) if p.verified),
            key=lambda p: p.content_hash,
        )
        n_pos = min(cfg.positives_per_object, len(verified))
        pos_idx = sorted(rng.choice(len(verified), size=n_pos, replace=False).tolist()) \
            if verified else []
        for idx in pos_idx:
            pos = verified[idx]
            result.samples.append(ExportSample(
                content_hash=pos.content_hash,
                object=pos.object,
                question=bank.render(template_id, pos.object.name),
                answer="Yes",
            ))
        result.per_object[name] = {"negatives": n_neg, "positives": n_pos}

    result.header = {
        "schema": "finetune-export",
        "version": 1,
        "config": {
            "negatives_per_object": cfg.negatives_per_object,
            "positives_per_object": cfg.positives_per_object,
            "holdout_model_ids": sorted(cfg.holdout_model_ids) or
                sorted(v.model_id for v in holdout_vlms),
            "seed": cfg.seed,
        },
        "benchmark_exclusion_digest": _digest(benchmark_hashes),
        "validation_exclusion_digest": _digest(validation_members),
        "n_negatives": len(result.negatives),
        "n_positives": len(result.positives),
    }
    return result


def _digest(values: set) -> str:
    h = hashlib.sha256()
    for v in sorted(values):
        h.update(str(v).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()[:16]


def write_export(path: Path, result: ExportResult) -> None:
    """Header line then one sample per line."""
    lines = [dumps_canonical(result.header)]
    lines += [dumps_canonical(s.to_dict()) for s in result.samples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_export(path: Path) -> tuple:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    samples = [json.loads(line) for line in lines[1:] if line]
    return header, samples
