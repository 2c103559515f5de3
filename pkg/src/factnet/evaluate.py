"""Inference ranking, triplet NMS, Recall@K and the inference-speed benchmark."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import EvalConfig, GenConfig
from .geometry import paired_iou, union_boxes
from .graph import factorize_arrays, per_pair_graph
from .model import FactorizableNet
from .scenegen import Scene, jitter_proposals
from .tensor import no_grad

log = logging.getLogger(__name__)

MODES = ("phrdet", "sggen")


@dataclass(frozen=True)
class TripletPrediction:
    subject_box: tuple
    subject_class: int
    subject_prob: float
    predicate: int
    predicate_prob: float
    object_box: tuple
    object_class: int
    object_prob: float
    pair: tuple = (-1, -1)

    @property
    def score(self) -> float:
        return self.subject_prob * self.predicate_prob * self.object_prob

    @property
    def classes(self) -> tuple:
        return (self.subject_class, self.predicate, self.object_class)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _top_foreground(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best non-background class (index >= 1) and its probability per row."""
    cls = 1 + np.argmax(probs[:, 1:], axis=1)
    return cls, probs[np.arange(len(probs)), cls]


def triplet_nms_order(
    boxes: np.ndarray, classes: np.ndarray, triples: np.ndarray, order: np.ndarray, iou_thr: float, limit: Optional[int]
) -> list[int]:
    """Walk ``order`` and keep a triplet unless an already-kept one has the
    same three classes and both endpoint IoUs >= ``iou_thr``."""
    kept: list[int] = []
    groups: dict[tuple, list[int]] = {}
    for t in order:
        i, j = triples[t, 0], triples[t, 2]
        key = (int(classes[0][t]), int(classes[1][t]), int(classes[2][t]))
        prev = groups.get(key)
        if prev:
            pi = triples[prev, 0]
            pj = triples[prev, 2]
            si = paired_iou(boxes[pi], np.broadcast_to(boxes[i], (len(prev), 4)))
            oj = paired_iou(boxes[pj], np.broadcast_to(boxes[j], (len(prev), 4)))
            if np.any((si >= iou_thr) & (oj >= iou_thr)):
                continue
            prev.append(int(t))
        else:
            groups[key] = [int(t)]
        kept.append(int(t))
        if limit is not None and len(kept) >= limit:
            break
    return kept


def rank_triplets(
    boxes: np.ndarray,
    obj_probs: np.ndarray,
    pred_probs: np.ndarray,
    triples: np.ndarray,
    top_k: Optional[int] = None,
    triplet_nms_iou: Optional[float] = 0.5,
) -> list[TripletPrediction]:
    """Score every directed pair with top-1 foreground classes, sort, suppress, truncate."""
    boxes = np.asarray(boxes, dtype=np.float64)
    oc, op = _top_foreground(obj_probs)
    pc, pp = _top_foreground(pred_probs)
    i, j = triples[:, 0], triples[:, 2]
    score = op[i] * pp * op[j]
    order = np.lexsort((np.arange(len(score)), -score))
    if triplet_nms_iou is None:
        kept = order[:top_k].tolist() if top_k is not None else order.tolist()
    else:
        kept = triplet_nms_order(boxes, (oc[i], pc, oc[j]), triples, order, triplet_nms_iou, top_k)
    out = []
    for t in kept:
        a, b = int(i[t]), int(j[t])
        out.append(
            TripletPrediction(
                tuple(boxes[a].tolist()), int(oc[a]), float(op[a]), int(pc[t]), float(pp[t]),
                tuple(boxes[b].tolist()), int(oc[b]), float(op[b]), (a, b),
            )
        )
    return out


def infer(
    model: FactorizableNet,
    image: np.ndarray,
    boxes: np.ndarray,
    scores: np.ndarray,
    top_k: Optional[int] = 100,
    cfg: Optional[EvalConfig] = None,
    mode: str = "subgraph",
) -> list[TripletPrediction]:
    """Full pipeline on one image: factorize, forward, rank, triplet NMS."""
    cfg = cfg or EvalConfig()
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if mode == "subgraph":
        graph = factorize_arrays(boxes, scores, cfg.test_threshold)
    elif mode in ("pairwise", "per-pair-baseline"):
        graph = per_pair_graph(boxes, scores)
    else:
        raise ValueError(f"unknown inference mode {mode!r}")
    if graph.n_objects < 2:
        return []
    with no_grad():
        out = model(image, graph)
    return rank_triplets(
        boxes, _softmax(out.obj_logits.data), _softmax(out.pred_logits.data), out.triples, top_k, cfg.triplet_nms_iou
    )


# ----------------------------------------------------------------- recall


def _gt_arrays(scene: Scene):
    rel = np.asarray(scene.relations, dtype=np.intp).reshape(-1, 3)
    boxes = scene.boxes
    cats = scene.categories
    return rel, boxes, cats


def match_predictions(
    preds: Sequence[TripletPrediction], scene: Scene, K: int, mode: str, iou_thr: float = 0.5
) -> np.ndarray:
    """Greedy matching of the top-K predictions; returns a hit flag per GT relation."""
    if K <= 0:
        raise ValueError(f"K must be positive, got {K}")
    mode = mode.lower()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    rel, gboxes, gcats = _gt_arrays(scene)
    hit = np.zeros(len(rel), dtype=bool)
    if len(rel) == 0:
        return hit
    gs, gp, go = rel[:, 0], rel[:, 1], rel[:, 2]
    g_sub, g_obj = gboxes[gs], gboxes[go]
    g_union = union_boxes(g_sub, g_obj)
    g_cls = np.stack([gcats[gs], gp, gcats[go]], axis=1)
    for pr in preds[:K]:
        cand = ~hit & np.all(g_cls == np.array(pr.classes), axis=1)
        if not cand.any():
            continue
        idx = np.flatnonzero(cand)
        ps = np.broadcast_to(np.array(pr.subject_box), (len(idx), 4))
        po = np.broadcast_to(np.array(pr.object_box), (len(idx), 4))
        if mode == "sggen":
            ok = (paired_iou(ps, g_sub[idx]) >= iou_thr) & (paired_iou(po, g_obj[idx]) >= iou_thr)
        else:
            ok = paired_iou(union_boxes(ps, po), g_union[idx]) >= iou_thr
        if ok.any():
            hit[idx[np.argmax(ok)]] = True
    return hit


def recall_at_k(preds: Sequence[TripletPrediction], scene: Scene, K: int, mode: str, iou_thr: float = 0.5) -> float:
    """Fraction of ground-truth relations hit by the top-K predictions."""
    if not scene.relations:
        raise ValueError("scene has no ground-truth relations; recall is undefined")
    hit = match_predictions(preds, scene, K, mode, iou_thr)
    return float(hit.mean())


@dataclass
class RecallReport:
    mode: str
    K: int
    hits: int
    total: int
    per_predicate_hits: dict
    per_predicate_total: dict
    n_scenes: int

    @property
    def recall(self) -> float:
        return self.hits / self.total if self.total else 0.0

    def predicate_recall(self, p: int) -> float:
        n = self.per_predicate_total.get(p, 0)
        return self.per_predicate_hits.get(p, 0) / n if n else float("nan")

    def to_json(self) -> dict:
        return {"mode": self.mode, "K": self.K, "recall": self.recall, "n_scenes": self.n_scenes}


def accumulate_recall(
    per_scene: Iterable[tuple[Sequence[TripletPrediction], Scene]], K: int, mode: str, iou_thr: float = 0.5
) -> RecallReport:
    hits = total = n = 0
    ph: dict = {}
    pt: dict = {}
    for preds, scene in per_scene:
        n += 1
        if not scene.relations:
            continue
        hit = match_predictions(preds, scene, K, mode, iou_thr)
        preds_cls = [r[1] for r in scene.relations]
        for h, p in zip(hit, preds_cls):
            pt[p] = pt.get(p, 0) + 1
            ph[p] = ph.get(p, 0) + int(h)
        hits += int(hit.sum())
        total += len(hit)
    return RecallReport(mode.lower(), K, hits, total, ph, pt, n)


def predict_scenes(
    model: FactorizableNet, scenes: Sequence[Scene], gen: GenConfig, cfg: Optional[EvalConfig] = None, top_k: int = 100
) -> list[list[TripletPrediction]]:
    out = []
    for sc in scenes:
        props = jitter_proposals(sc, gen)
        boxes = np.array([tuple(p.box) for p in props])
        scores = np.array([p.objectness for p in props])
        out.append(infer(model, sc.image, boxes, scores, top_k, cfg))
    return out


def evaluate(
    model: FactorizableNet,
    scenes: Sequence[Scene],
    gen: GenConfig,
    ks: Sequence[int] = (50, 100),
    modes: Sequence[str] = MODES,
    cfg: Optional[EvalConfig] = None,
) -> dict:
    cfg = cfg or EvalConfig()
    preds = predict_scenes(model, scenes, gen, cfg, top_k=max(ks))
    return {
        (m, k): accumulate_recall(zip(preds, scenes), k, m, cfg.match_iou) for m in modes for k in ks
    }


# ----------------------------------------------------------------- benchmark


@dataclass
class BenchResult:
    mode: str
    sec_per_image: float
    n_images: int
    n_proposals: int
    mean_subgraphs: float
    pairs: list  # per-image set sizes of predicted directed pairs

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "sec_per_image": self.sec_per_image,
            "n_scenes": self.n_images,
            "n_proposals": self.n_proposals,
            "mean_subgraphs": self.mean_subgraphs,
        }


def bench(
    model: FactorizableNet,
    scenes: Sequence[Scene],
    gen: GenConfig,
    mode: str = "subgraph",
    n_proposals: int = 64,
    warmup: int = 3,
    cfg: Optional[EvalConfig] = None,
) -> BenchResult:
    """Mean wall-clock seconds per image of a full inference forward pass.

    ``subgraph`` shares one phrase map per NMS cluster; ``pairwise`` gives
    every directed pair its own phrase map (no factorization).  Both run the
    same network weights on the same proposals, single-threaded.
    """
    from threadpoolctl import threadpool_limits

    cfg = cfg or EvalConfig()
    if mode not in ("subgraph", "pairwise"):
        raise ValueError(f"bench mode must be 'subgraph' or 'pairwise', got {mode!r}")
    pcfg = _with_proposals(gen, n_proposals)
    inputs = []
    for sc in scenes:
        props = jitter_proposals(sc, pcfg)
        inputs.append((sc.image, np.array([tuple(p.box) for p in props]), np.array([p.objectness for p in props])))
    times, subs, pairs = [], [], []
    with threadpool_limits(limits=1):
        for w in range(min(warmup, len(inputs))):
            image, boxes, scores = inputs[w]
            infer(model, image, boxes, scores, cfg.top_k, cfg, mode)
        for image, boxes, scores in inputs:
            t0 = time.perf_counter()
            graph = factorize_arrays(boxes, scores, cfg.test_threshold) if mode == "subgraph" else per_pair_graph(boxes, scores)
            with no_grad():
                out = model(image, graph)
            rank_triplets(
                boxes,
                _softmax(out.obj_logits.data),
                _softmax(out.pred_logits.data),
                out.triples,
                cfg.top_k,
                cfg.triplet_nms_iou,
            )
            times.append(time.perf_counter() - t0)
            subs.append(graph.n_subgraphs)
            pairs.append(len(out.triples))
    return BenchResult(mode, float(np.mean(times)), len(inputs), n_proposals, float(np.mean(subs)), pairs)


def _with_proposals(gen: GenConfig, n: int) -> GenConfig:
    return replace(gen, n_proposals=n)
