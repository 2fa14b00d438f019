"""Existence-QA benchmark construction and evaluation.

Benchmark negatives are mined records that transfer to both holdout VLMs
(each answers yes) and that two human labelers independently verified as
object-free. Per object the negative count is capped to [min, max] with a
deterministic content-hash order, and an equal number of verified positives
is paired in. Evaluation reports accuracy over valid replies plus TNR, TPR
and their harmonic mean.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

from filelock import FileLock

from .analysis import EvalItem, VerdictSource
from .prompts import MAIN_TEMPLATE_ID
from .types import ObjectSpec, dumps_canonical

VERDICT_VALUES = ("yes", "no", "ambiguous")
DEFAULT_CAPS = (3, 50)


class LabelError(Exception):
    """Invalid or duplicate labeler verdict."""


@dataclass(frozen=True)
class LabelVerdict:
    image_id: str
    labeler_id: str
    verdict: str
    timestamp: str = ""

    def __post_init__(self) -> None:
        if self.verdict not in VERDICT_VALUES:
            raise LabelError(f"verdict must be one of {VERDICT_VALUES}, got {self.verdict!r}")

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "labeler_id": self.labeler_id,
            "verdict": self.verdict,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelVerdict":
        return cls(d["image_id"], d["labeler_id"], d["verdict"], d.get("timestamp", ""))


class LabelStore:
    """Append-only verdict log; one verdict per (image, labeler), immutable."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._seen: set = set()
        self._verdicts: list = []
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line:
                    v = LabelVerdict.from_dict(json.loads(line))
                    self._verdicts.append(v)
                    self._seen.add((v.image_id, v.labeler_id))

    def submit(self, verdict: LabelVerdict) -> None:
        key = (verdict.image_id, verdict.labeler_id)
        if key in self._seen:
            raise LabelError(
                f"labeler {verdict.labeler_id} already submitted a verdict for {verdict.image_id}"
            )
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(self.path) + ".lock"):
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(dumps_canonical(verdict.to_dict()) + "\n")
        self._seen.add(key)
        self._verdicts.append(verdict)

    def verdicts(self) -> list:
        return list(self._verdicts)

    def verdicts_for(self, image_id: str) -> list:
        return [v for v in self._verdicts if v.image_id == image_id]

    def has(self, image_id: str, labeler_id: str) -> bool:
        return (image_id, labeler_id) in self._seen


def ingest_labels(verdicts: Sequence[LabelVerdict]) -> Dict[str, str]:
    """Consensus per image: eligible | ineligible | pending.

    Eligible as a benchmark negative requires at least two labelers, all
    answering "no". Any "yes" or "ambiguous" verdict makes the image
    ineligible immediately; fewer than two all-"no" verdicts leave it
    pending. Duplicate (image, labeler) submissions are rejected.
    """
    by_image: Dict[str, dict] = {}
    for v in verdicts:
        entry = by_image.setdefault(v.image_id, {})
        if v.labeler_id in entry:
            raise LabelError(
                f"duplicate verdict for image {v.image_id} by labeler {v.labeler_id}"
            )
        entry[v.labeler_id] = v.verdict
    consensus = {}
    for image_id, entry in by_image.items():
        answers = list(entry.values())
        if any(a in ("yes", "ambiguous") for a in answers):
            consensus[image_id] = "ineligible"
        elif len(answers) >= 2:
            consensus[image_id] = "eligible"
        else:
            consensus[image_id] = "pending"
    return consensus


# ---------------------------------------------------------------------------
# Positive manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PositiveImage:
    object: ObjectSpec
    content_hash: str
    uri: str = ""
    verified: bool = False


def load_positives_manifest(path: Path) -> Dict[str, list]:
    """One JSON object per line: object fields plus content_hash/uri/verified."""
    out: Dict[str, list] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        obj = ObjectSpec(d["object"], d["dataset_tag"], d.get("frequency_split"))
        out.setdefault(obj.name, []).append(PositiveImage(
            object=obj,
            content_hash=d["content_hash"],
            uri=d.get("uri", ""),
            verified=bool(d.get("verified", False)),
        ))
    return out


# ---------------------------------------------------------------------------
# Benchmark construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkItem:
    image_id: str
    content_hash: str
    object: ObjectSpec
    ground_truth: str              # present | absent
    provenance: str                # mined-negative | ingested-positive

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "content_hash": self.content_hash,
            "object": self.object.to_dict(),
            "ground_truth": self.ground_truth,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkItem":
        return cls(d["image_id"], d["content_hash"], ObjectSpec.from_dict(d["object"]),
                   d["ground_truth"], d["provenance"])


@dataclass
class BenchmarkResult:
    items: list = field(default_factory=list)
    excluded_objects: dict = field(default_factory=dict)   # object -> reason
    per_object_negatives: dict = field(default_factory=dict)

    @property
    def negatives(self) -> list:
        return [i for i in self.items if i.ground_truth == "absent"]

    @property
    def positives(self) -> list:
        return [i for i in self.items if i.ground_truth == "present"]


def build_benchmark(candidates: Sequence[EvalItem], holdout_vlms: Sequence[VerdictSource],
                    labels: Dict[str, str], positives: Dict[str, list],
                    caps: tuple = DEFAULT_CAPS,
                    template_id: str = MAIN_TEMPLATE_ID) -> BenchmarkResult:
    """Select negatives, cap per object, and pair an equal positive count.

    A candidate negative qualifies iff every holdout VLM answers yes on it
    and the two-labeler consensus is "eligible". Objects with fewer than
    ``caps[0]`` qualifying negatives are dropped; more than ``caps[1]`` are
    truncated in content-hash order. Objects without enough verified
    positives are excluded with a diagnostic.
    """
    if len(holdout_vlms) != 2:
        raise ValueError("benchmark construction requires exactly two holdout models")
    min_n, max_n = caps
    result = BenchmarkResult()

    by_object: Dict[str, list] = {}
    objects: Dict[str, ObjectSpec] = {}
    for item in candidates:
        by_object.setdefault(item.object.name, []).append(item)
        objects[item.object.name] = item.object

    for name in sorted(by_object):
        eligible = []
        for item in by_object[name]:
            if labels.get(item.record_id, labels.get(item.content_hash)) != "eligible":
                continue
            if all(v.verdict(item, template_id) == "yes" for v in holdout_vlms):
                eligible.append(item)
        eligible.sort(key=lambda i: i.content_hash or i.record_id)
        if len(eligible) < min_n:
            result.excluded_objects[name] = (
                f"only {len(eligible)} qualifying negatives (minimum {min_n})"
            )
            continue
        negatives = eligible[:max_n]

        verified = sorted(
            (p for p in positives.get(name, []) if p.verified),
            key=lambda p: p.content_hash,
        )
        if len(verified) < len(negatives):
            result.excluded_objects[name] = (
                f"insufficient verified positives: {len(verified)} < {len(negatives)}"
            )
            continue
        obj = objects[name]
        for item in negatives:
            result.items.append(BenchmarkItem(
                image_id=item.record_id, content_hash=item.content_hash, object=obj,
                ground_truth="absent", provenance="mined-negative",
            ))
        for pos in verified[: len(negatives)]:
            result.items.append(BenchmarkItem(
                image_id=pos.content_hash, content_hash=pos.content_hash, object=obj,
                ground_truth="present", provenance="ingested-positive",
            ))
        result.per_object_negatives[name] = len(negatives)
    return result


def write_benchmark_manifest(path: Path, result: BenchmarkResult) -> None:
    """One item per line; header line carries the schema and counts."""
    header = {
        "schema": "benchmark-manifest",
        "version": 1,
        "n_negatives": len(result.negatives),
        "n_positives": len(result.positives),
        "n_items_total": len(result.items),
        "excluded_objects": dict(sorted(result.excluded_objects.items())),
    }
    lines = [dumps_canonical(header)]
    lines += [dumps_canonical(item.to_dict()) for item in result.items]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_benchmark_manifest(path: Path) -> BenchmarkResult:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    result = BenchmarkResult()
    for line in lines[1:]:
        if line:
            result.items.append(BenchmarkItem.from_dict(json.loads(line)))
    for item in result.negatives:
        result.per_object_negatives[item.object.name] = \
            result.per_object_negatives.get(item.object.name, 0) + 1
    return result


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def harmonic_mean_rates(tnr: float, tpr: float) -> float:
    """Harmonic mean of the two rates; 0 when both are 0 (trivial responders)."""
    if tnr == 0.0 and tpr == 0.0:
        return 0.0
    return 2.0 * tnr * tpr / (tnr + tpr)


@dataclass
class ExistenceQaReport:
    accuracy: Optional[float] = None
    tnr: Optional[float] = None
    tpr: Optional[float] = None
    hm: Optional[float] = None
    valid_rate: float = 0.0
    n_items: int = 0
    n_valid: int = 0
    n_absent_valid: int = 0
    n_present_valid: int = 0
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "tnr": self.tnr,
            "tpr": self.tpr,
            "hm": self.hm,
            "valid_rate": self.valid_rate,
            "n_items": self.n_items,
            "n_valid": self.n_valid,
            "n_absent_valid": self.n_absent_valid,
            "n_present_valid": self.n_present_valid,
            "flags": list(self.flags),
        }


def eval_existence_qa(verdicts: VerdictSource, items: Sequence[BenchmarkItem],
                      template_id: str = MAIN_TEMPLATE_ID) -> ExistenceQaReport:
    """Accuracy over valid replies plus TNR, TPR and their harmonic mean.

    Invalid replies are excluded from every denominator and surfaced via
    valid_rate. A single-class item set leaves the undefined rate absent
    and flags the report.
    """
    if not items:
        raise ValueError("cannot evaluate an empty item set")
    report = ExistenceQaReport(n_items=len(items))
    correct = 0
    correct_no = correct_yes = 0
    for item in items:
        answer = verdicts.verdict(
            EvalItem(record_id=item.image_id, object=item.object,
                     content_hash=item.content_hash),
            template_id,
        )
        if answer == "invalid":
            continue
        report.n_valid += 1
        if item.ground_truth == "absent":
            report.n_absent_valid += 1
            if answer == "no":
                correct_no += 1
                correct += 1
        else:
            report.n_present_valid += 1
            if answer == "yes":
                correct_yes += 1
                correct += 1
    report.valid_rate = report.n_valid / report.n_items
    if report.n_valid:
        report.accuracy = correct / report.n_valid
    if report.n_absent_valid:
        report.tnr = correct_no / report.n_absent_valid
    else:
        report.flags.append("no-absent-items")
    if report.n_present_valid:
        report.tpr = correct_yes / report.n_present_valid
    else:
        report.flags.append("no-present-items")
    if report.tnr is not None and report.tpr is not None:
        report.hm = harmonic_mean_rates(report.tnr, report.tpr)
    return report
