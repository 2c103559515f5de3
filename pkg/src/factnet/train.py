"""Target assignment, minibatch sampling and the training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .config import EvalConfig, GenConfig, ModelConfig, TrainConfig
from .evaluate import evaluate
from .geometry import iou_matrix
from .graph import ConnectionGraph, factorize_arrays
from .model import FactorizableNet
from .nn import SGD
from .scenegen import Scene, jitter_proposals
from .tensor import Tensor, add, cross_entropy, mul

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    def __init__(self, epoch: int, step: int, scene: int):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step} (scene {scene})")
        self.epoch, self.step, self.scene = epoch, step, scene


@dataclass
class Targets:
    obj_labels: np.ndarray  # [N] class or 0
    obj_gt: np.ndarray  # [N] matched GT index or -1
    pred_labels: np.ndarray  # [T] predicate or 0


def assign_targets(boxes: np.ndarray, scene: Scene, graph: ConnectionGraph, iou_thr: float = 0.5) -> Targets:
    """Label proposals by their best GT match and triples by their matched GT pair."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    gt_boxes, gt_cats = scene.boxes, scene.categories
    if n == 0 or len(gt_boxes) == 0:
        return Targets(np.zeros(n, np.intp), np.full(n, -1, np.intp), np.zeros(len(graph.triples), np.intp))
    ov = iou_matrix(boxes, gt_boxes)
    best = np.argmax(ov, axis=1)  # first index wins ties
    matched = ov[np.arange(n), best] >= iou_thr
    obj_gt = np.where(matched, best, -1)
    obj_labels = np.where(matched, gt_cats[best], 0)
    rel = np.zeros((len(gt_boxes), len(gt_boxes)), dtype=np.intp)
    for s, p, o in scene.relations:
        rel[s, o] = p
    ti, tj = graph.triples[:, 0], graph.triples[:, 2]
    gi, gj = obj_gt[ti], obj_gt[tj]
    ok = (gi >= 0) & (gj >= 0) & (gi != gj)
    pred = np.zeros(len(ti), dtype=np.intp)
    pred[ok] = rel[gi[ok], gj[ok]]
    return Targets(obj_labels, obj_gt, pred)


@dataclass
class Minibatch:
    objects: np.ndarray
    triples: np.ndarray
    obj_fg_fraction: float
    pred_fg_fraction: float


def _sample_side(labels: np.ndarray, count: int, fg_fraction: float, rng) -> tuple[np.ndarray, float]:
    fg = np.flatnonzero(labels > 0)
    bg = np.flatnonzero(labels == 0)
    count = min(count, len(labels))
    n_fg = min(int(round(fg_fraction * count)), len(fg))
    n_bg = min(count - n_fg, len(bg))
    n_fg = min(count - n_bg, len(fg))
    pick = np.concatenate([rng.choice(fg, n_fg, replace=False), rng.choice(bg, n_bg, replace=False)]).astype(np.intp)
    return np.sort(pick), (n_fg / len(pick) if len(pick) else 0.0)


def sample_minibatch(targets: Targets, cfg: TrainConfig, rng: np.random.Generator) -> Minibatch:
    """Sample objects and triples at the configured foreground fraction.

    A short side is topped up from the other; the achieved fractions are
    returned.
    """
    objs, fo = _sample_side(targets.obj_labels, cfg.object_samples, cfg.fg_fraction, rng)
    trips, fp = _sample_side(targets.pred_labels, cfg.predicate_samples, cfg.fg_fraction, rng)
    if len(trips) and not np.any(targets.pred_labels > 0):
        log.warning("no foreground triples available; sampled %d background triples", len(trips))
    return Minibatch(objs, trips, fo, fp)


@dataclass
class EpochLog:
    epoch: int
    obj_loss: float
    pred_loss: float
    rec50_sggen: float
    rec50_phrdet: float
    seconds: float


@dataclass
class TrainResult:
    model: FactorizableNet
    log: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "obj_loss", "pred_loss", "rec50_sggen", "rec50_phrdet"])
            for e in self.log:
                w.writerow([e.epoch, f"{e.obj_loss:.6f}", f"{e.pred_loss:.6f}", f"{e.rec50_sggen:.6f}", f"{e.rec50_phrdet:.6f}"])


def _prepare(scene: Scene, gen: GenConfig, rng, threshold: float):
    props = jitter_proposals(scene, gen, rng)
    boxes = np.array([tuple(p.box) for p in props])
    scores = np.array([p.objectness for p in props])
    graph = factorize_arrays(boxes, scores, threshold)
    return boxes, graph


def train_step(model: FactorizableNet, scene: Scene, boxes, graph, tc: TrainConfig, rng) -> Optional[tuple]:
    tg = assign_targets(boxes, scene, graph)
    mb = sample_minibatch(tg, tc, rng)
    out = model(scene.image, graph, triple_idx=mb.triples if graph.n_objects >= 2 else None)
    obj_logits = out.obj_logits[mb.objects]
    l_obj = cross_entropy(obj_logits, tg.obj_labels[mb.objects])
    loss: Tensor = mul(l_obj, tc.obj_loss_weight)
    l_pred_v = 0.0
    if out.pred_logits is not None and len(mb.triples):
        l_pred = cross_entropy(out.pred_logits, tg.pred_labels[mb.triples])
        loss = add(loss, mul(l_pred, tc.pred_loss_weight))
        l_pred_v = float(l_pred.data)
    return loss, float(l_obj.data), l_pred_v


def train(
    scenes: Sequence[Scene],
    model_cfg: ModelConfig,
    tc: TrainConfig,
    gen: Optional[GenConfig] = None,
    val_scenes: Sequence[Scene] = (),
    eval_cfg: Optional[EvalConfig] = None,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
    model: Optional[FactorizableNet] = None,
) -> TrainResult:
    """Per-image momentum SGD; loss is weighted object CE + predicate CE."""
    gen = gen or GenConfig()
    model = model or FactorizableNet(model_cfg)
    model.stem.set_lr_mult(tc.stem_lr_mult)
    opt = SGD(model.parameters(), lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay)
    result = TrainResult(model)
    rng = np.random.default_rng(tc.seed)
    val = list(val_scenes)[: tc.val_scenes]
    step = 0
    for epoch in range(tc.epochs):
        opt.lr = tc.lr * tc.lr_gamma ** (epoch // tc.lr_step_epochs)
        t0 = time.perf_counter()
        order = rng.permutation(len(scenes))
        lo_sum = lp_sum = 0.0
        for pos in order:
            scene = scenes[pos]
            boxes, graph = _prepare(scene, gen, np.random.default_rng([scene.seed, 7, epoch]), tc.train_threshold)
            opt.zero_grad()
            loss, lo, lp = train_step(model, scene, boxes, graph, tc, rng)
            if not np.isfinite(loss.data):
                raise TrainingDivergence(epoch, step, int(pos))
            loss.backward()
            opt.step()
            lo_sum += lo
            lp_sum += lp
            step += 1
        rec = {("sggen", 50): float("nan"), ("phrdet", 50): float("nan")}
        if val:
            rep = evaluate(model, val, gen, ks=(50,), cfg=eval_cfg)
            rec = {k: v.recall for k, v in rep.items()}
        entry = EpochLog(
            epoch + 1,
            lo_sum / max(len(scenes), 1),
            lp_sum / max(len(scenes), 1),
            rec[("sggen", 50)],
            rec[("phrdet", 50)],
            time.perf_counter() - t0,
        )
        result.log.append(entry)
        log.info(
            "epoch %d  obj %.4f  pred %.4f  sggen@50 %.4f  phrdet@50 %.4f  (%.1fs)",
            entry.epoch, entry.obj_loss, entry.pred_loss, entry.rec50_sggen, entry.rec50_phrdet, entry.seconds,
        )
        if on_epoch:
            on_epoch(entry)
    return result
