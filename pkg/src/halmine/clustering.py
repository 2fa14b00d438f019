"""Grouping of exploitation survivors into systematic-hallucination clusters.

Survivors sharing one seed image form a pre-cluster. Pre-clusters are then
merged agglomeratively with average linkage over perceptual distances
(distance = 1 - similarity) while the minimal inter-cluster average stays
within the merge threshold, and clusters below the minimum size are dropped
but reported.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .adapters import PerceptualAdapter
from .types import Cluster, ImageRecord, ObjectSpec, stable_id

MAX_MERGE_DISTANCE = 0.6
MIN_CLUSTER_SIZE = 5


class LineageCorruption(Exception):
    """A record points at a parent that does not exist."""


def precluster(records: Sequence[ImageRecord], obj: ObjectSpec,
               known_parents: Optional[set] = None) -> list:
    """One pre-cluster per exploitation seed, in first-seen seed order."""
    groups: Dict[str, list] = {}
    order: list = []
    for rec in records:
        parent = rec.lineage.parent_image_id
        if parent is None:
            raise LineageCorruption(f"record {rec.id} has no parent image id")
        if known_parents is not None and parent not in known_parents:
            raise LineageCorruption(f"record {rec.id} references unknown parent {parent}")
        if parent not in groups:
            groups[parent] = []
            order.append(parent)
        groups[parent].append(rec.id)
    return [
        Cluster(
            id=stable_id("precluster", obj.name, parent),
            object=obj,
            members=groups[parent],
            seeds=[parent],
        )
        for parent in order
    ]


@dataclass
class MergeOutcome:
    clusters: list = field(default_factory=list)       # size filter passed
    dropped_small: list = field(default_factory=list)  # reported, not lost

    @property
    def partition(self) -> list:
        return self.clusters + self.dropped_small


def pairwise_distances(member_ids: Sequence[str], embeddings: Dict[str, np.ndarray],
                       perceptual: PerceptualAdapter) -> np.ndarray:
    """Symmetric matrix of 1 - similarity over the given members."""
    n = len(member_ids)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            sim = perceptual.similarity(embeddings[member_ids[i]], embeddings[member_ids[j]])
            d[i, j] = d[j, i] = 1.0 - sim
    return d


def merge_clusters(preclusters: Sequence[Cluster], embeddings: Dict[str, np.ndarray],
                   perceptual: PerceptualAdapter,
                   max_merge_distance: float = MAX_MERGE_DISTANCE,
                   min_cluster_size: int = MIN_CLUSTER_SIZE) -> MergeOutcome:
    """Average-linkage agglomerative merge with a distance ceiling.

    Repeatedly merges the pair of clusters with the minimal average pairwise
    inter-cluster distance while that minimum stays within the ceiling. Ties
    break on the lexicographically smallest member ids of the pair, so the
    result is deterministic for fixed inputs. Singleton pre-clusters take
    part in merging; the size filter applies only at the end.
    """
    if not preclusters:
        return MergeOutcome()
    obj = preclusters[0].object
    for pc in preclusters:
        for member in pc.members:
            if member not in embeddings:
                raise LineageCorruption(f"no perceptual embedding for member {member}")

    member_ids: list = [m for pc in preclusters for m in pc.members]
    index_of = {m: i for i, m in enumerate(member_ids)}
    dmat = pairwise_distances(member_ids, embeddings, perceptual)

    members: list = [list(pc.members) for pc in preclusters]
    seeds: list = [list(pc.seeds) for pc in preclusters]
    keys: list = [min(pc.members) for pc in preclusters]

    def avg_distance(a: int, b: int) -> float:
        rows = [index_of[m] for m in members[a]]
        cols = [index_of[m] for m in members[b]]
        return float(dmat[np.ix_(rows, cols)].mean())

    n = len(members)
    dist: dict = {}
    for i in range(n):
        for j in range(i + 1, n):
            dist[(i, j)] = avg_distance(i, j)

    active = set(range(n))
    while len(active) > 1:
        best_pair, best_key = None, None
        for i in sorted(active):
            for j in sorted(active):
                if i >= j:
                    continue
                d = dist[(i, j)]
                key = (d, *sorted((keys[i], keys[j])))
                if best_key is None or key < best_key:
                    best_key, best_pair = key, (i, j)
        if best_pair is None or best_key[0] > max_merge_distance:
            break
        i, j = best_pair
        ni, nj = len(members[i]), len(members[j])
        new = len(members)
        members.append(members[i] + members[j])
        seeds.append(seeds[i] + seeds[j])
        keys.append(min(keys[i], keys[j]))
        active.discard(i)
        active.discard(j)
        for c in active:
            a, b = sorted((i, c)), sorted((j, c))
            dic = dist[(a[0], a[1])]
            djc = dist[(b[0], b[1])]
            dist[(c, new)] = (ni * dic + nj * djc) / (ni + nj)
        active.add(new)

    outcome = MergeOutcome()
    for idx in sorted(active, key=lambda c: keys[c]):
        cluster = Cluster(
            id=stable_id("cluster", obj.name, keys[idx]),
            object=obj,
            members=sorted(members[idx]),
            seeds=sorted(set(seeds[idx])),
        )
        if cluster.size >= min_cluster_size:
            outcome.clusters.append(cluster)
        else:
            outcome.dropped_small.append(cluster)
    return outcome
