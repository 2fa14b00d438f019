"""Stage orchestration over one declarative run config.

Stages form a fixed DAG; each stage refuses to run before its upstreams,
restarts from scratch when incomplete, and becomes a no-op once its
completion marker is set. Outputs are canonical-JSON record files, so
re-running a stage against unchanged inputs is byte-identical.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from .adapters import AdapterSuite
from .analysis import (
    AdapterVerdictSource,
    EvalItem,
    frequency_report,
    min_query_distance,
    mining_summary,
    write_columnar,
)
from .benchmark import (
    LabelStore,
    build_benchmark,
    eval_existence_qa,
    ingest_labels,
    load_benchmark_manifest,
    load_positives_manifest,
    write_benchmark_manifest,
)
from .clustering import merge_clusters, precluster
from .config import ConfigError
from .finetune import export_dataset, split_validation, write_export
from .llm_queries import QueryGenerationFailed, generate_text_queries
from .optimize import optimize_query
from .prompts import hallucination_protocol, load_question_bank, reverse_protocol
from .retrieval import SyntheticIndex, explore, exploit, fetch_uri
from .store import RunStore, config_hash
from .stubs import StubLayout, StubVlm
from .synthetic import canonical_suite
from .types import (
    Cluster,
    ImageRecord,
    Lineage,
    ObjectSpec,
    Query,
    dumps_canonical,
    stable_id,
)

log = logging.getLogger("halmine")

STAGES = (
    "gen-queries", "opt-queries", "explore", "exploit", "cluster",
    "analyze", "build-bench", "eval-bench", "export-finetune",
)


class PipelineError(Exception):
    """Hard pipeline failure (exit code 1)."""


class DependencyError(PipelineError):
    """An upstream stage has not completed."""


def stage_dependencies(cfg: dict) -> dict:
    explore_deps = ["gen-queries"]
    if cfg["query_source"] in ("optimized", "both"):
        explore_deps.append("opt-queries")
    return {
        "gen-queries": [],
        "opt-queries": ["gen-queries"],
        "explore": explore_deps,
        "exploit": ["explore"],
        "cluster": ["exploit"],
        "analyze": ["cluster"],
        "build-bench": ["cluster"],
        "export-finetune": ["cluster"],
        "eval-bench": [],
    }


class PipelineContext:
    """Everything a stage runner needs, built once per invocation."""

    def __init__(self, cfg: dict, object_filter: Optional[list] = None):
        self.cfg = cfg
        self.workdir = Path(cfg["workdir"])
        self.store = RunStore(self.workdir, cfg["run_id"], config=cfg,
                              embedding_dim=self._embedding_dim(cfg))
        if self.store.manifest.config_hash != config_hash(cfg):
            raise ConfigError(
                "config does not match the run manifest; state a new run_id "
                "or restore the original config"
            )
        self.bank = load_question_bank()
        self.objects = cfgmod.objects_from(cfg, object_filter)
        self.suite = build_adapter_suite(cfg)
        self.policy = cfgmod.filter_policy(cfg)
        self.retrieval_cfg = cfgmod.retrieval_config(cfg)
        self._index = None

    @staticmethod
    def _embedding_dim(cfg: dict) -> int:
        if cfg["adapters"]["kind"] == "stub":
            return int(cfg["adapters"]["stub"]["semantic_dim"])
        return int(cfg["adapters"].get("embedding_dim", 0))

    @property
    def index(self):
        if self._index is None:
            spec = self.cfg["index"]
            if spec["kind"] != "directory":
                raise ConfigError(f"unknown index kind {spec['kind']!r}")
            if not spec["path"]:
                raise ConfigError("index.path is required for retrieval stages")
            self._index = SyntheticIndex.from_directory(
                Path(spec["path"]), self.suite.embedder, spec.get("pattern", "*")
            )
        return self._index

    def protocol(self):
        count = int(self.cfg["expected_query_count"])
        if self.cfg["mode"] == "reverse":
            return reverse_protocol(count if count != 50 else 20)
        return hallucination_protocol(count)

    def map_objects(self, fn):
        """Apply fn over objects, preserving object order in the output."""
        workers = int(self.cfg["workers"])
        if workers <= 1 or len(self.objects) <= 1:
            return [fn(obj) for obj in self.objects]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, self.objects))


def build_adapter_suite(cfg: dict) -> AdapterSuite:
    spec = cfg["adapters"]
    if spec["kind"] == "stub":
        stub = spec["stub"]
        layout = StubLayout(semantic_dim=int(stub["semantic_dim"]),
                            perceptual_dim=int(stub["perceptual_dim"]))
        return canonical_suite(layout, expected_query_count=int(cfg["expected_query_count"]),
                               generator_seed=int(cfg["seed"]))
    if spec["kind"] == "remote":
        required = ("vlm", "detector")
        for name in required:
            if name not in spec:
                raise ConfigError(f"remote adapter config missing {name!r}")
        raise ConfigError(
            "remote adapter suites need embedder/perceptual backends; "
            "configure adapters.kind=stub for desk-scale runs"
        )
    raise ConfigError(f"unknown adapter kind {spec['kind']!r}")


def holdout_sources(ctx: PipelineContext, role: str) -> list:
    """Two verdict sources for benchmark transfer or finetune filtering.

    Stub runs derive them from the stub family: benchmark holdouts also
    hallucinate on the planted feature, finetune holdouts are faithful
    object readers.
    """
    if ctx.cfg["adapters"]["kind"] != "stub":
        raise ConfigError("holdout models are only wired for stub runs")
    stub = ctx.cfg["adapters"]["stub"]
    layout = StubLayout(semantic_dim=int(stub["semantic_dim"]),
                        perceptual_dim=int(stub["perceptual_dim"]))
    if role == "benchmark":
        vlms = [StubVlm.canonical(layout, "stub-holdout-a"),
                StubVlm.canonical(layout, "stub-holdout-b")]
    else:
        vlms = [StubVlm.faithful(layout, "stub-faithful-a"),
                StubVlm.faithful(layout, "stub-faithful-b")]
    return [AdapterVerdictSource(v, ctx.bank, ctx.store) for v in vlms]


# ---------------------------------------------------------------------------
# Stage runners
# ---------------------------------------------------------------------------

def _run_gen_queries(ctx: PipelineContext) -> dict:
    protocol = ctx.protocol()
    counts: dict = {}
    failed: list = []

    def one(obj: ObjectSpec):
        try:
            queries = generate_text_queries(ctx.suite.llm, ctx.suite.embedder, obj, protocol)
            return obj, queries
        except QueryGenerationFailed as exc:
            log.warning("event=gen-queries-failed object=%s error=%s", obj.slug, exc)
            return obj, None

    for obj, queries in ctx.map_objects(one):
        if queries is None:
            failed.append(obj.name)
            continue
        rows = [q.to_dict() for q in queries]
        ctx.store.append_records("gen-queries", obj.slug, rows)
        counts[obj.slug] = len(rows)
        log.info("event=queries-generated object=%s count=%d", obj.slug, len(rows))
    return {"counts": counts, "info": {"failed_objects": failed} if failed else None}


def _load_queries(ctx: PipelineContext, stage: str, obj: ObjectSpec) -> list:
    return [Query.from_dict(d) for d in ctx.store.read_records(stage, obj.slug)]


def _run_opt_queries(ctx: PipelineContext) -> dict:
    ocfg = cfgmod.opt_config(ctx.cfg)
    counts: dict = {}
    dump_curves = bool(ctx.cfg.get("dump_loss_curves"))
    for obj in ctx.objects:
        prompts = _load_queries(ctx, "gen-queries", obj)
        rows = []
        traj_dir = ctx.store.run_dir / "trajectories" / obj.slug
        traj_dir.mkdir(parents=True, exist_ok=True)
        for prompt in prompts:
            seed = int(stable_id("opt-seed", str(ctx.cfg["seed"]), prompt.id), 16) % (2 ** 32)
            query, traj = optimize_query(ctx.suite, prompt, ocfg, store=ctx.store, seed=seed)
            rows.append(query.to_dict())
            (traj_dir / f"{prompt.id}.trajectory").write_text(
                dumps_canonical(traj.to_dict()) + "\n", encoding="utf-8"
            )
            if dump_curves:
                (traj_dir / f"{prompt.id}.losses.tsv").write_text(traj.loss_curve_text())
        ctx.store.append_records("opt-queries", obj.slug, rows)
        counts[obj.slug] = len(rows)
        log.info("event=queries-optimized object=%s count=%d", obj.slug, len(rows))
    return {"counts": counts}


def _queries_for_explore(ctx: PipelineContext, obj: ObjectSpec) -> list:
    source = ctx.cfg["query_source"]
    queries: list = []
    if source in ("llm", "both"):
        queries += _load_queries(ctx, "gen-queries", obj)
    if source in ("optimized", "both"):
        queries += _load_queries(ctx, "opt-queries", obj)
    return queries


def _image_fetcher(ctx: PipelineContext):
    cache = ctx.store.cache

    def fetch(uri: str) -> bytes:
        if uri.startswith("cache://"):
            return cache.load_bytes(uri[len("cache://"):])
        return fetch_uri(uri, ctx.retrieval_cfg.max_fetch_retries)

    return fetch


def _run_explore(ctx: PipelineContext) -> dict:
    counts: dict = {}
    stats_info: dict = {}
    fetcher = _image_fetcher(ctx)

    def one(obj: ObjectSpec):
        queries = _queries_for_explore(ctx, obj)
        result = explore(queries, ctx.index, ctx.suite, ctx.policy, ctx.store,
                         ctx.bank, ctx.retrieval_cfg, fetcher=fetcher)
        return obj, result

    for obj, result in ctx.map_objects(one):
        rows = [r.to_dict() for r in result.records]
        ctx.store.append_records("explore", obj.slug, rows)
        counts[obj.slug] = len(rows)
        stats_info[obj.slug] = result.stats.to_dict()
        log.info("event=explored object=%s candidates=%d survivors=%d",
                 obj.slug, len(result.records), len(result.survivors))
    return {"counts": counts, "info": {"stats": stats_info}}


def _survivors(ctx: PipelineContext, stage: str, obj: ObjectSpec) -> list:
    records = [ImageRecord.from_dict(d) for d in ctx.store.read_records(stage, obj.slug)]
    return [r for r in records if r.passed_filter]


def _run_exploit(ctx: PipelineContext) -> dict:
    counts: dict = {}
    stats_info: dict = {}
    fetcher = _image_fetcher(ctx)

    def one(obj: ObjectSpec):
        successes = _survivors(ctx, "explore", obj)
        result = exploit(successes, ctx.index, ctx.suite, ctx.policy, ctx.store,
                         ctx.bank, obj, ctx.retrieval_cfg, fetcher=fetcher)
        return obj, result

    for obj, result in ctx.map_objects(one):
        rows = [r.to_dict() for r in result.records]
        ctx.store.append_records("exploit", obj.slug, rows)
        counts[obj.slug] = len(rows)
        stats_info[obj.slug] = result.stats.to_dict()
        log.info("event=exploited object=%s candidates=%d survivors=%d",
                 obj.slug, len(result.records), len(result.survivors))
    return {"counts": counts, "info": {"stats": stats_info}}


def _run_cluster(ctx: PipelineContext) -> dict:
    counts: dict = {}
    min_size = int(ctx.cfg["clustering"]["min_cluster_size"])
    merge_dist = float(ctx.cfg["thresholds"]["merge"])
    for obj in ctx.objects:
        survivors = _survivors(ctx, "exploit", obj)
        seeds = {r.id for r in _survivors(ctx, "explore", obj)}
        pre = precluster(survivors, obj, known_parents=seeds)
        embeddings = {r.id: r.perceptual_embedding for r in survivors}
        outcome = merge_clusters(pre, embeddings, ctx.suite.perceptual,
                                 max_merge_distance=merge_dist, min_cluster_size=min_size)
        rows = [c.to_dict() for c in outcome.clusters]
        rows += [dict(c.to_dict(), dropped_small=True) for c in outcome.dropped_small]
        ctx.store.append_records("cluster", obj.slug, rows)
        counts[obj.slug] = len(outcome.clusters)
        log.info("event=clustered object=%s clusters=%d dropped_small=%d",
                 obj.slug, len(outcome.clusters), len(outcome.dropped_small))
    return {"counts": counts}


def _load_clusters(ctx: PipelineContext, obj: ObjectSpec, include_dropped: bool = False) -> list:
    out = []
    for row in ctx.store.read_records("cluster", obj.slug):
        if row.get("dropped_small") and not include_dropped:
            continue
        out.append(Cluster.from_dict(row))
    return out


def _run_analyze(ctx: PipelineContext) -> dict:
    reports = ctx.store.run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    all_clusters: list = []
    for obj in ctx.objects:
        all_clusters.extend(_load_clusters(ctx, obj))
    summary = mining_summary(all_clusters, ctx.objects)

    rows = []
    hist_payload = {}
    for obj in ctx.objects:
        queries = _load_queries(ctx, "gen-queries", obj)
        survivors = _survivors(ctx, "exploit", obj)
        if queries and survivors:
            hist = min_query_distance([r.embedding for r in survivors],
                                      [q.embedding for q in queries])
            hist_payload[obj.slug] = hist.to_dict()
            rows.append([obj.slug, len(survivors), float(np.mean(hist.raw)),
                         float(np.min(hist.raw)), float(np.max(hist.raw))])
    freq = frequency_report(all_clusters, ctx.objects)

    payload = {"mining": summary, "frequency_splits": freq}
    (reports / "summary.json").write_text(dumps_canonical(payload) + "\n", encoding="utf-8")
    (reports / "min_query_distance.json").write_text(
        dumps_canonical(hist_payload) + "\n", encoding="utf-8"
    )
    write_columnar(reports / "min_query_distance.tsv",
                   ["object", "survivors", "mean_distance", "min_distance", "max_distance"],
                   rows)
    log.info("event=analyzed clusters=%d images=%d",
             summary["total_clusters"], summary["total_images"])
    return {"counts": {"clusters": summary["total_clusters"],
                       "images": summary["total_images"]}}


def _candidate_items(ctx: PipelineContext, obj: ObjectSpec) -> list:
    return [
        EvalItem(record_id=r.id, object=obj, content_hash=r.content_hash)
        for r in _survivors(ctx, "exploit", obj)
    ]


def _labels_path(ctx: PipelineContext) -> Path:
    configured = ctx.cfg.get("labels_path")
    if configured:
        return Path(configured)
    return ctx.store.run_dir / "labels" / "verdicts.log"


def _run_build_bench(ctx: PipelineContext) -> dict:
    labels_path = _labels_path(ctx)
    if not labels_path.exists():
        raise PipelineError(
            f"benchmark construction needs labeler verdicts at {labels_path}; "
            "run the review server or point labels_path at a verdict log"
        )
    consensus = ingest_labels(LabelStore(labels_path).verdicts())
    manifest_path = Path(ctx.cfg["positives_manifest"] or "")
    if not manifest_path or not manifest_path.exists():
        raise PipelineError("positives_manifest is required to build a benchmark")
    positives = load_positives_manifest(manifest_path)

    candidates: list = []
    for obj in ctx.objects:
        candidates.extend(_candidate_items(ctx, obj))
    caps = tuple(ctx.cfg["benchmark"]["caps"])
    result = build_benchmark(candidates, holdout_sources(ctx, "benchmark"),
                             consensus, positives, caps=caps)
    out = ctx.store.run_dir / "benchmark"
    out.mkdir(parents=True, exist_ok=True)
    write_benchmark_manifest(out / "items.manifest", result)
    log.info("event=benchmark-built negatives=%d positives=%d excluded=%d",
             len(result.negatives), len(result.positives), len(result.excluded_objects))
    return {"counts": {"negatives": len(result.negatives),
                       "positives": len(result.positives)},
            "info": {"excluded_objects": result.excluded_objects} if result.excluded_objects else None}


def _positive_uri_map(ctx: PipelineContext) -> dict:
    path = Path(ctx.cfg["positives_manifest"] or "")
    if not path.exists():
        return {}
    uri_of: dict = {}
    for plist in load_positives_manifest(path).values():
        for p in plist:
            if p.uri:
                uri_of[p.content_hash] = p.uri
    return uri_of


def _ensure_positive_cached(ctx: PipelineContext, item, uri_of: dict) -> None:
    if item.content_hash and ctx.store.cache.has(item.content_hash):
        return
    uri = uri_of.get(item.content_hash)
    if uri:
        data = fetch_uri(uri, ctx.retrieval_cfg.max_fetch_retries)
        ctx.store.put_image(data, Lineage("ingest"), uri=uri)


def _run_eval_bench(ctx: PipelineContext) -> dict:
    manifest_path = Path(ctx.cfg.get("benchmark", {}).get("manifest", "") or
                         ctx.store.run_dir / "benchmark" / "items.manifest")
    if not manifest_path.exists():
        raise PipelineError(f"no benchmark manifest at {manifest_path}")
    result = load_benchmark_manifest(manifest_path)
    model = ctx.cfg.get("benchmark", {}).get("eval_model", "faithful")
    stub = ctx.cfg["adapters"]["stub"]
    layout = StubLayout(semantic_dim=int(stub["semantic_dim"]),
                        perceptual_dim=int(stub["perceptual_dim"]))
    vlm = StubVlm.faithful(layout) if model == "faithful" else StubVlm.canonical(layout)
    for item in result.items:
        if item.provenance == "ingested-positive":
            _ensure_positive_cached(ctx, item)
    source = AdapterVerdictSource(vlm, ctx.bank, ctx.store)
    report = eval_existence_qa(source, result.items)
    reports = ctx.store.run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    payload = dict(report.to_dict(), model_id=vlm.model_id,
                   n_items_symmetric=2 * len(result.negatives))
    (reports / "benchmark_eval.json").write_text(dumps_canonical(payload) + "\n",
                                                 encoding="utf-8")
    log.info("event=benchmark-evaluated model=%s accuracy=%s hm=%s",
             vlm.model_id, report.accuracy, report.hm)
    return {"counts": {"items": report.n_items}}


def _run_export_finetune(ctx: PipelineContext) -> dict:
    clusters_by_object = {}
    exploit_by_id: dict = {}
    for obj in ctx.objects:
        clusters_by_object[obj.name] = _load_clusters(ctx, obj, include_dropped=True)
        for r in _survivors(ctx, "exploit", obj):
            exploit_by_id[r.id] = (obj, r)
    split = split_validation(clusters_by_object)

    pool: dict = {}
    for name, member_ids in split.train_pool.items():
        items = []
        for mid in member_ids:
            obj, rec = exploit_by_id[mid]
            items.append(EvalItem(record_id=rec.id, object=obj, content_hash=rec.content_hash))
        pool[name] = items

    positives_path = Path(ctx.cfg["positives_manifest"] or "")
    positives = load_positives_manifest(positives_path) if positives_path.exists() else {}

    bench_manifest = ctx.store.run_dir / "benchmark" / "items.manifest"
    benchmark_hashes: set = set()
    if bench_manifest.exists():
        benchmark_hashes = {i.content_hash
                            for i in load_benchmark_manifest(bench_manifest).negatives}

    validation_members = split.all_validation_members()
    validation_hashes = {exploit_by_id[m][1].content_hash
                         for m in validation_members if m in exploit_by_id}

    fcfg = cfgmod.finetune_config(ctx.cfg)
    result = export_dataset(pool, positives, fcfg, ctx.bank,
                            holdout_vlms=holdout_sources(ctx, "finetune"),
                            benchmark_hashes=benchmark_hashes,
                            validation_members=validation_members | validation_hashes)
    out = ctx.store.run_dir / "finetune"
    out.mkdir(parents=True, exist_ok=True)
    write_export(out / "dataset.records", result)
    split_payload = {
        "validation_cluster": split.validation_cluster,
        "flagged_empty_train": split.flagged_empty_train,
        "excluded_objects": split.excluded_objects,
    }
    (out / "validation_split.json").write_text(dumps_canonical(split_payload) + "\n",
                                               encoding="utf-8")
    log.info("event=finetune-exported negatives=%d positives=%d",
             len(result.negatives), len(result.positives))
    return {"counts": {"negatives": len(result.negatives),
                       "positives": len(result.positives)}}


_RUNNERS = {
    "gen-queries": _run_gen_queries,
    "opt-queries": _run_opt_queries,
    "explore": _run_explore,
    "exploit": _run_exploit,
    "cluster": _run_cluster,
    "analyze": _run_analyze,
    "build-bench": _run_build_bench,
    "eval-bench": _run_eval_bench,
    "export-finetune": _run_export_finetune,
}

_STAGE_SCHEMAS = {
    "gen-queries": "query",
    "opt-queries": "query",
    "explore": "image-record",
    "exploit": "image-record",
    "cluster": "cluster",
    "analyze": "report",
    "build-bench": "benchmark-item",
    "eval-bench": "report",
    "export-finetune": "finetune-sample",
}


def run_stage(stage: str, cfg: dict, object_filter: Optional[list] = None) -> bool:
    """Run one stage; returns True if work was done, False for a no-op."""
    if stage not in _RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    ctx = PipelineContext(cfg, object_filter)
    manifest = ctx.store.manifest
    if manifest.is_complete(stage):
        log.info("event=stage-skipped stage=%s reason=already-complete", stage)
        return False
    for dep in stage_dependencies(cfg)[stage]:
        if not manifest.is_complete(dep):
            raise DependencyError(
                f"stage {stage!r} requires completed stage {dep!r}; run it first"
            )
    ctx.store.reset_stage(stage, _STAGE_SCHEMAS[stage])
    log.info("event=stage-started stage=%s objects=%d", stage, len(ctx.objects))
    outcome = _RUNNERS[stage](ctx) or {}
    manifest.mark_complete(stage, counts=outcome.get("counts"),
                           info=outcome.get("info"))
    log.info("event=stage-complete stage=%s", stage)
    return True


def run_all(cfg: dict, object_filter: Optional[list] = None,
            stages: Optional[list] = None) -> list:
    """Run the mining DAG in order; eval-bench only when a manifest exists."""
    order = [s for s in STAGES if s != "eval-bench"]
    if cfg["query_source"] == "llm":
        order.remove("opt-queries")
    if stages:
        order = [s for s in order if s in stages]
    executed = []
    for stage in order:
        if run_stage(stage, cfg, object_filter):
            executed.append(stage)
    return executed
