"""Brute-force reference implementations shared by the unit and acceptance tests."""

import numpy as np

from factnet.config import EvalConfig, GenConfig
from factnet.evaluate import TripletPrediction, rank_triplets
from factnet.geometry import Box, iou, union_box
from factnet.graph import Proposal, build_full_graph, factorize, factorize_arrays
from factnet.scenegen import Scene


def props_from(arr, scores=None):
    scores = np.ones(len(arr)) if scores is None else scores
    return [Proposal(Box.from_array(b), float(s)) for b, s in zip(arr, scores)]


def brute_factorize(P, t):
    """Greedy NMS over every directed candidate in (-confidence, i, j) order."""
    cands = sorted(build_full_graph(P), key=lambda c: (-c.confidence, c.subject, c.object))
    kept: list = []
    k_of = {}
    for c in cands:
        for k, rep in enumerate(kept):
            if iou(rep.union, c.union) >= t:
                k_of[c.subject, c.object] = k
                break
        else:
            k_of[c.subject, c.object] = len(kept)
            kept.append(c)
    return [tuple(r.union) for r in kept], k_of


def factorize_mismatch(arr, scores, t):
    """None when both factorizers agree with the brute force, else a description."""
    P = props_from(arr, scores)
    n = len(P)
    ref_boxes, ref_k = brute_factorize(P, t)
    cands = build_full_graph(P)
    for name, g in (("candidates", factorize(cands, t, proposals=P)), ("arrays", factorize_arrays(arr, scores, t))):
        if not (len(cands) == len(g.triples) == n * (n - 1)):
            return f"{name}: {len(g.triples)} triples for N={n}"
        g.validate()
        if [tuple(b) for b in g.sub_boxes.tolist()] != ref_boxes:
            return f"{name}: subgraph boxes differ"
        for i, k, j in g.triples:
            if ref_k[int(i), int(j)] != k:
                return f"{name}: triple ({i},{j}) -> {k}, expected {ref_k[int(i), int(j)]}"
    return None


def random_instance(rng):
    """Half-pixel grid boxes (frequent exact ties and duplicates), N in 1..8."""
    n = int(rng.integers(1, 9))
    xy = rng.integers(0, 65, size=(n, 2)) / 2.0
    wh = rng.integers(1, 31, size=(n, 2)) / 2.0
    scores = rng.choice([0.3, 0.5, 0.6, 0.8, 1.0], size=n)
    t = float(rng.choice([0.3, 0.5, 0.6, 0.7, 0.9]))
    return np.concatenate([xy, xy + wh], axis=1), scores, t


def brute_recall(preds, scene, K, mode, t=0.5):
    gt = [(scene.objects[i], p, scene.objects[j]) for i, p, j in scene.relations]
    used = [False] * len(gt)
    for pr in preds[:K]:
        sb, ob = Box(*pr.subject_box), Box(*pr.object_box)
        for g, ((cs, bs), p, (co, bo)) in enumerate(gt):
            if used[g] or (cs, p, co) != pr.classes:
                continue
            if mode == "sggen":
                ok = iou(sb, bs) >= t and iou(ob, bo) >= t
            else:
                ok = iou(union_box(sb, ob), union_box(bs, bo)) >= t
            if ok:
                used[g] = True
                break
    return sum(used) / len(gt)


def random_six_gt_scene(rng):
    objs = []
    for _ in range(4):
        x, y = rng.uniform(0, 40, size=2)
        objs.append((int(rng.integers(1, 3)), Box(x, y, x + rng.uniform(4, 20), y + rng.uniform(4, 20))))
    pairs = [(i, j) for i in range(4) for j in range(4) if i != j]
    pick = rng.choice(len(pairs), size=6, replace=False)
    rels = [(pairs[q][0], int(rng.integers(1, 3)), pairs[q][1]) for q in pick]
    return Scene(objs, rels)


def noisy_predictions(rng, scene, m):
    """Predictions near the GT objects with some wrong classes and jittered corners."""
    out = []
    for _ in range(m):
        i, j = rng.choice(len(scene.objects), size=2, replace=False)
        (ci, bi), (cj, bj) = scene.objects[i], scene.objects[j]
        jit = lambda b: tuple(np.array(tuple(b)) + rng.uniform(-3.0, 3.0, size=4) * np.array([0, 0, 1, 1]))  # noqa: E731
        ci = ci if rng.random() < 0.8 else 3 - ci
        out.append(TripletPrediction(jit(bi), ci, 1.0, int(rng.integers(1, 3)), 1.0, jit(bj), cj, 1.0, (i, j)))
    return out


def oracle_predictions(scene, gen: GenConfig, top_k: int = 50):
    """GT boxes as proposals, one-hot true classes and predicates, normal ranking."""
    g = factorize_arrays(scene.boxes, np.ones(len(scene.objects)), 0.5)
    op = np.eye(gen.n_object_classes)[scene.categories]
    rel = {(i, j): p for i, p, j in scene.relations}
    pp = np.eye(gen.n_predicates)[[rel.get((int(i), int(j)), 0) for i, _, j in g.triples]]
    return rank_triplets(scene.boxes, op, pp, g.triples, top_k, EvalConfig().triplet_nms_iou)
