"""Fully-connected relation graph and its factorization into subgraphs.

Every ordered pair of proposals is a candidate relation whose phrase region
is the union box of the two proposals.  Greedy NMS over those union boxes
(scored by the product of objectness) clusters candidates into subgraphs;
each candidate keeps its own triple ``(i, k, j)`` so no relation is dropped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .geometry import Box, boxes_to_array, nms_arrays, union_box, union_boxes


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness {self.objectness} outside [0, 1]")


@dataclass(frozen=True)
class RelationCandidate:
    subject: int
    object: int
    union: Box
    confidence: float


class GraphConsistencyError(ValueError):
    pass


def pair_index(i: int, j: int, n: int) -> int:
    """Position of the directed pair (i, j) in subject-major order."""
    if i == j:
        raise GraphConsistencyError(f"self pair ({i}, {i})")
    return i * (n - 1) + (j if j < i else j - 1)


def directed_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Subject and object index arrays of all N(N-1) ordered pairs, subject-major."""
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    mask = i != j
    return i[mask], j[mask]


def build_full_graph(proposals: Sequence[Proposal]) -> list[RelationCandidate]:
    out = []
    for i, pi in enumerate(proposals):
        for j, pj in enumerate(proposals):
            if i != j:
                out.append(RelationCandidate(i, j, union_box(pi.box, pj.box), pi.objectness * pj.objectness))
    return out


@dataclass
class ConnectionGraph:
    """Objects, subgraph boxes and one ``(i, k, j)`` triple per ordered pair."""

    obj_boxes: np.ndarray  # [N, 4]
    obj_scores: np.ndarray  # [N]
    sub_boxes: np.ndarray  # [K, 4]
    triples: np.ndarray  # [T, 3] int
    threshold: Optional[float] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_objects(self) -> int:
        return len(self.obj_boxes)

    @property
    def n_subgraphs(self) -> int:
        return len(self.sub_boxes)

    @cached_property
    def incidence(self) -> np.ndarray:
        """Unique (object, subgraph) incidence pairs [E, 2], sorted."""
        if len(self.triples) == 0:
            return np.zeros((0, 2), dtype=np.intp)
        e = np.concatenate([self.triples[:, [0, 1]], self.triples[:, [2, 1]]])
        return np.unique(e, axis=0)

    def S_of(self, i: int) -> set[int]:
        inc = self.incidence
        return set(inc[inc[:, 0] == i, 1].tolist())

    def O_of(self, k: int) -> set[int]:
        inc = self.incidence
        return set(inc[inc[:, 1] == k, 0].tolist())

    @property
    def objects(self) -> list[Proposal]:
        return [Proposal(Box.from_array(b), float(s)) for b, s in zip(self.obj_boxes, self.obj_scores)]

    @property
    def subgraphs(self) -> list[Box]:
        return [Box.from_array(b) for b in self.sub_boxes]

    def subgraph_of(self, i: int, j: int) -> int:
        return int(self.triples[pair_index(i, j, self.n_objects), 1])

    def has_triple(self, i: int, k: int, j: int) -> bool:
        n = self.n_objects
        if not (0 <= i < n and 0 <= j < n) or i == j:
            return False
        return int(self.triples[pair_index(i, j, n), 1]) == k

    def validate(self) -> None:
        n = self.n_objects
        if len(self.triples) != n * (n - 1):
            raise GraphConsistencyError(f"{len(self.triples)} triples for {n} objects")
        si, sj = directed_pairs(n)
        if not (np.array_equal(self.triples[:, 0], si) and np.array_equal(self.triples[:, 2], sj)):
            raise GraphConsistencyError("triples do not enumerate ordered pairs subject-major")
        k = self.triples[:, 1]
        if len(k) and (k.min() < 0 or k.max() >= self.n_subgraphs):
            raise GraphConsistencyError("triple references a missing subgraph")

    def to_json(self) -> dict:
        return {
            "objects": [{"box": b.tolist(), "score": float(s)} for b, s in zip(self.obj_boxes, self.obj_scores)],
            "subgraphs": [b.tolist() for b in self.sub_boxes],
            "triples": self.triples.tolist(),
            "threshold": self.threshold,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, d: dict) -> "ConnectionGraph":
        objs = d["objects"]
        return cls(
            obj_boxes=np.array([o["box"] for o in objs], dtype=np.float64).reshape(-1, 4),
            obj_scores=np.array([o["score"] for o in objs], dtype=np.float64),
            sub_boxes=np.array(d["subgraphs"], dtype=np.float64).reshape(-1, 4),
            triples=np.array(d["triples"], dtype=np.intp).reshape(-1, 3),
            threshold=d.get("threshold"),
        )


def _cluster_unions(n, ui, uj, ub, conf, threshold):
    """NMS over unordered unions (ui < uj, lexicographic) and fan-out to directed triples."""
    si, sj = directed_pairs(n)
    res = nms_arrays(ub, conf, threshold)
    rank = np.full(len(ui), -1, dtype=np.intp)
    rank[res.kept] = np.arange(len(res.kept))
    sub_id = rank[np.asarray(res.assign, dtype=np.intp)]
    upair = np.full((n, n), -1, dtype=np.intp)
    upair[ui, uj] = np.arange(len(ui))
    upair[uj, ui] = np.arange(len(ui))
    k = sub_id[upair[si, sj]]
    return ub[res.kept], np.stack([si, k, sj], axis=1).astype(np.intp)


def factorize_arrays(boxes: np.ndarray, scores: np.ndarray, threshold: float = 0.5) -> ConnectionGraph:
    """Factorize the full graph over ``[N,4]`` boxes with objectness ``scores``.

    NMS runs over the N(N-1)/2 distinct unordered unions (a directed pair and
    its twin share the same union box and confidence); the result fans out to
    all directed triples.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    n = len(boxes)
    if n < 2:
        if not 0.0 < threshold < 1.0:
            raise ValueError(f"threshold {threshold} outside (0, 1)")
        return ConnectionGraph(boxes, scores, np.zeros((0, 4)), np.zeros((0, 3), dtype=np.intp), threshold)
    ui, uj = np.triu_indices(n, k=1)
    ub = union_boxes(boxes[ui], boxes[uj])
    sub_boxes, triples = _cluster_unions(n, ui, uj, ub, scores[ui] * scores[uj], threshold)
    return ConnectionGraph(boxes, scores, sub_boxes, triples, threshold)


def factorize(
    candidates: Sequence[RelationCandidate], threshold: float = 0.5, proposals: Optional[Sequence[Proposal]] = None
) -> ConnectionGraph:
    """Factorize a complete candidate list as produced by :func:`build_full_graph`.

    Union boxes and confidences come from the candidates.  Object boxes are
    only recoverable from ``proposals``; without them they are left as NaN.
    """
    if not candidates:
        if proposals is not None and len(proposals) > 1:
            raise GraphConsistencyError("empty candidate list for more than one proposal")
        return factorize_arrays(
            boxes_to_array([p.box for p in proposals or []]),
            np.array([p.objectness for p in proposals or []]),
            threshold,
        )
    n = max(max(c.subject, c.object) for c in candidates) + 1
    if len(candidates) != n * (n - 1):
        raise GraphConsistencyError(f"{len(candidates)} candidates is not N(N-1) for N={n}")
    canon = sorted((c for c in candidates if c.subject < c.object), key=lambda c: (c.subject, c.object))
    ui = np.array([c.subject for c in canon], dtype=np.intp)
    uj = np.array([c.object for c in canon], dtype=np.intp)
    ub = boxes_to_array([c.union for c in canon])
    conf = np.array([c.confidence for c in canon], dtype=np.float64)
    sub_boxes, triples = _cluster_unions(n, ui, uj, ub, conf, threshold)
    if proposals is not None:
        boxes = boxes_to_array([p.box for p in proposals])
        scores = np.array([p.objectness for p in proposals], dtype=np.float64)
    else:
        boxes, scores = np.full((n, 4), np.nan), np.full(n, np.nan)
    return ConnectionGraph(boxes, scores, sub_boxes, triples, threshold)


def per_pair_graph(boxes: np.ndarray, scores: np.ndarray) -> ConnectionGraph:
    """Unfactorized baseline: every directed pair owns its phrase region."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    si, sj = directed_pairs(n)
    ub = union_boxes(boxes[si], boxes[sj]) if n > 1 else np.zeros((0, 4))
    triples = np.stack([si, np.arange(len(si)), sj], axis=1).astype(np.intp)
    return ConnectionGraph(boxes, np.asarray(scores, dtype=np.float64), ub, triples, None, {"per_pair": True})


@dataclass(frozen=True)
class GraphStats:
    n_objects: int
    n_subgraphs: int
    n_triples: int
    reduction_ratio: float
    mean_subgraphs_per_object: float
    mean_objects_per_subgraph: float

    def to_json(self) -> dict:
        return {
            "N": self.n_objects,
            "subgraphs": self.n_subgraphs,
            "triples": self.n_triples,
            "reduction_ratio": self.reduction_ratio,
            "mean_S_i": self.mean_subgraphs_per_object,
            "mean_O_k": self.mean_objects_per_subgraph,
        }


def graph_stats(g: ConnectionGraph) -> GraphStats:
    inc = g.incidence
    n, k, t = g.n_objects, g.n_subgraphs, len(g.triples)
    return GraphStats(
        n_objects=n,
        n_subgraphs=k,
        n_triples=t,
        reduction_ratio=k / t if t else 0.0,
        mean_subgraphs_per_object=len(inc) / n if n else 0.0,
        mean_objects_per_subgraph=len(inc) / k if k else 0.0,
    )
