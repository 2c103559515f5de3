import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factnet.config import GenConfig, ModelConfig, PREDICATES, TrainConfig
from factnet.evaluate import (
    TripletPrediction,
    accumulate_recall,
    bench,
    infer,
    rank_triplets,
    recall_at_k,
)
from factnet.geometry import Box, iou
from factnet.graph import factorize_arrays, per_pair_graph
from factnet.model import FactorizableNet
from factnet.scenegen import Scene, generate_dataset, generate_scene
from factnet.tensor import no_grad
from oracles import brute_recall, noisy_predictions, oracle_predictions, random_six_gt_scene
from factnet.train import TrainingDivergence, Targets, assign_targets, sample_minibatch, train

GEN = GenConfig()
TINY = ModelConfig(dim=8, stem_channels=(4, 4, 4), n_smp=1, seed=0)


def gt_graph(scene):
    return factorize_arrays(scene.boxes, np.ones(len(scene.objects)), 0.5)


# ----------------------------------------------------------- targets/sampling


def test_targets_from_exact_gt():
    sc = generate_scene(GEN, 2)
    g = gt_graph(sc)
    tg = assign_targets(sc.boxes, sc, g)
    np.testing.assert_array_equal(tg.obj_labels, sc.categories)
    np.testing.assert_array_equal(tg.obj_gt, np.arange(len(sc.objects)))
    rel = {(i, j): p for i, p, j in sc.relations}
    for (i, _, j), p in zip(g.triples, tg.pred_labels):
        assert p == rel.get((int(i), int(j)), 0)


def test_disjoint_distractor_is_background():
    sc = Scene([(1, Box(0, 0, 10, 10)), (2, Box(30, 0, 40, 10))], [(0, PREDICATES.index("left-of"), 1)])
    boxes = np.vstack([sc.boxes, [[100, 100, 120, 120]]])
    g = factorize_arrays(boxes, np.ones(3), 0.5)
    tg = assign_targets(boxes, sc, g)
    assert tg.obj_labels.tolist() == [1, 2, 0]
    assert tg.obj_gt.tolist() == [0, 1, -1]


def test_sampling_hits_half_foreground():
    rng = np.random.default_rng(0)
    labels = np.array([1] * 200 + [0] * 300)
    tg = Targets(labels[150:250].copy(), np.zeros(100, np.intp), labels)
    mb = sample_minibatch(tg, TrainConfig(object_samples=32, predicate_samples=128), rng)
    assert len(mb.triples) == 128 and mb.pred_fg_fraction == 0.5
    assert len(mb.objects) == 32 and mb.obj_fg_fraction == 0.5
    assert len(set(mb.triples.tolist())) == 128


def test_sampling_without_foreground_warns(caplog):
    tg = Targets(np.ones(10, np.intp), np.zeros(10, np.intp), np.zeros(50, np.intp))
    with caplog.at_level(logging.WARNING):
        mb = sample_minibatch(tg, TrainConfig(), np.random.default_rng(0))
    assert mb.pred_fg_fraction == 0.0 and len(mb.triples) == 50
    assert any("no foreground" in r.message for r in caplog.records)


def test_sampling_deterministic():
    labels = np.random.default_rng(1).integers(0, 3, size=400)
    tg = Targets(labels[:60], np.zeros(60, np.intp), labels)
    a = sample_minibatch(tg, TrainConfig(), np.random.default_rng(5))
    b = sample_minibatch(tg, TrainConfig(), np.random.default_rng(5))
    assert a.triples.tolist() == b.triples.tolist() and a.objects.tolist() == b.objects.tolist()


# ------------------------------------------------------------------- training


def test_zero_epochs_keeps_initialization():
    scenes = generate_dataset(GEN, 3)
    init = FactorizableNet(TINY).state()
    res = train(scenes, TINY, TrainConfig(epochs=0))
    for (n1, a), (n2, b) in zip(init, res.model.state()):
        assert n1 == n2 and a.tobytes() == b.tobytes()
    assert res.log == []


def test_frozen_stem_is_bit_identical():
    scenes = generate_dataset(GEN, 4)
    before = {n: a.copy() for n, a in FactorizableNet(TINY).state() if n.startswith("stem")}
    res = train(scenes, TINY, TrainConfig(epochs=1, stem_lr_mult=0.0, val_scenes=0))
    after = {n: a for n, a in res.model.state() if n.startswith("stem")}
    assert before.keys() == after.keys() and before
    for n in before:
        assert before[n].tobytes() == after[n].tobytes()
    moved = [n for n, a in res.model.state() if not n.startswith("stem")]
    assert moved


@pytest.mark.slow
def test_loss_decreases():
    scenes = generate_dataset(GEN, 40)
    res = train(scenes, TINY, TrainConfig(epochs=5, val_scenes=0, lr_step_epochs=10))
    first, last = res.log[0], res.log[-1]
    assert last.obj_loss + last.pred_loss < first.obj_loss + first.pred_loss


def test_nan_loss_aborts():
    scenes = generate_dataset(GEN, 2)
    model = FactorizableNet(TINY)
    model.head.fc_obj.b.data[0] = np.nan
    with pytest.raises(TrainingDivergence) as info:
        train(scenes, TINY, TrainConfig(epochs=1), model=model)
    assert info.value.epoch == 0 and info.value.step == 0


def test_train_is_deterministic():
    scenes = generate_dataset(GEN, 3)
    a = train(scenes, TINY, TrainConfig(epochs=1, val_scenes=0)).model.state()
    b = train(scenes, TINY, TrainConfig(epochs=1, val_scenes=0)).model.state()
    assert all(x.tobytes() == y.tobytes() for (_, x), (_, y) in zip(a, b))


# ------------------------------------------------------------------ inference


@pytest.fixture(scope="module")
def model():
    return FactorizableNet(TINY)


def test_infer_contract(model):
    sc = generate_scene(GEN, 5)
    boxes = sc.boxes
    preds = infer(model, sc.image, boxes, np.ones(len(boxes)), top_k=None)
    scores = [p.score for p in preds]
    assert scores == sorted(scores, reverse=True)
    n = len(boxes)
    for p in preds:
        i, j = p.pair
        assert 0 <= i < n and 0 <= j < n and i != j
        assert p.subject_box == tuple(boxes[i]) and p.object_box == tuple(boxes[j])
        assert p.subject_class >= 1 and p.predicate >= 1 and p.object_class >= 1


def test_infer_removes_duplicated_proposals(model):
    sc = generate_scene(GEN, 5)
    boxes = np.vstack([sc.boxes, sc.boxes])
    preds = infer(model, sc.image, boxes, np.ones(len(boxes)), top_k=None)
    single = infer(model, sc.image, sc.boxes, np.ones(len(sc.boxes)), top_k=None)
    assert len(preds) < 4 * len(single)
    for a in range(len(preds)):
        for b in range(a):
            p, q = preds[a], preds[b]
            if p.classes == q.classes:
                si = iou(Box(*p.subject_box), Box(*q.subject_box))
                oj = iou(Box(*p.object_box), Box(*q.object_box))
                assert si < 0.5 or oj < 0.5


def test_triplet_nms_keeps_unique_class_triples():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = int(rng.integers(2, 7))
        xy = rng.uniform(0, 20, size=(n, 2))
        boxes = np.concatenate([xy, xy + rng.uniform(2, 10, size=(n, 2))], axis=1)
        g = factorize_arrays(boxes, np.ones(n), 0.5)
        op = rng.dirichlet(np.ones(3), size=n)
        pp = rng.dirichlet(np.ones(3), size=len(g.triples))
        full = rank_triplets(boxes, op, pp, g.triples, None, None)
        kept = rank_triplets(boxes, op, pp, g.triples, None, 0.5)
        counts = {}
        for p in full:
            counts[p.classes] = counts.get(p.classes, 0) + 1
        unique = {p.pair for p in full if counts[p.classes] == 1}
        assert unique <= {p.pair for p in kept}


# --------------------------------------------------------------------- recall


def gt_predictions(scene):
    out = []
    for i, p, j in scene.relations:
        (ci, bi), (cj, bj) = scene.objects[i], scene.objects[j]
        out.append(TripletPrediction(tuple(bi), ci, 1.0, p, 1.0, tuple(bj), cj, 1.0, (i, j)))
    return out


@pytest.mark.parametrize("mode", ["phrdet", "sggen"])
def test_recall_of_ground_truth(mode):
    sc = generate_scene(GEN, 8)
    assert recall_at_k(gt_predictions(sc), sc, 100, mode) == 1.0
    assert recall_at_k([], sc, 100, mode) == 0.0


@pytest.mark.parametrize("k", [0, -3])
def test_recall_rejects_nonpositive_k(k):
    sc = generate_scene(GEN, 8)
    with pytest.raises(ValueError):
        recall_at_k([], sc, k, "sggen")


def check_recall_oracle(seed):
    rng = np.random.default_rng(seed)
    sc = random_six_gt_scene(rng)
    preds = noisy_predictions(rng, sc, int(rng.integers(0, 30)))
    for K in (1, 3, 5, 10, 50):
        for mode in ("phrdet", "sggen"):
            if recall_at_k(preds, sc, K, mode) != brute_recall(preds, sc, K, mode):
                return False
    return True


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=200)
def test_recall_matches_brute_force(seed):
    assert check_recall_oracle(seed)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60)
def test_recall_monotone_in_k_and_sggen_bounded(seed):
    rng = np.random.default_rng(seed)
    sc = random_six_gt_scene(rng)
    preds = noisy_predictions(rng, sc, 25)
    for mode in ("phrdet", "sggen"):
        r = [recall_at_k(preds, sc, k, mode) for k in range(1, 27)]
        assert r == sorted(r)
    for k in (5, 25):
        assert recall_at_k(preds, sc, k, "sggen") <= recall_at_k(preds, sc, k, "phrdet")


def test_oracle_classifier_full_recall():
    scenes = generate_dataset(GEN, 50, start=1_000_000)
    for sc in scenes:
        assert recall_at_k(oracle_predictions(sc, GEN), sc, 50, "sggen") == 1.0


def test_accumulated_recall_per_predicate():
    scenes = generate_dataset(GEN, 5)
    rep = accumulate_recall([(gt_predictions(s), s) for s in scenes], 50, "sggen")
    assert rep.recall == 1.0 and rep.total == sum(len(s.relations) for s in scenes)
    for p in rep.per_predicate_total:
        assert rep.predicate_recall(p) == 1.0


# ---------------------------------------------------------------------- bench


def test_modes_predict_identical_pair_sets(model):
    sc = generate_scene(GEN, 3)
    boxes = sc.boxes
    with no_grad():
        a = model(sc.image, factorize_arrays(boxes, np.ones(len(boxes)), 0.5))
        b = model(sc.image, per_pair_graph(boxes, np.ones(len(boxes))))
    np.testing.assert_array_equal(a.triples[:, [0, 2]], b.triples[:, [0, 2]])


def test_bench_reports_both_modes(model):
    scenes = generate_dataset(GEN, 3)
    s = bench(model, scenes, GEN, "subgraph", n_proposals=16, warmup=1)
    p = bench(model, scenes, GEN, "pairwise", n_proposals=16, warmup=1)
    assert s.pairs == p.pairs == [16 * 15] * 3
    assert s.mean_subgraphs < p.mean_subgraphs == 16 * 15
    with pytest.raises(ValueError):
        bench(model, scenes, GEN, "bogus")


@pytest.mark.slow
def test_bench_timing_is_stable(model):
    scenes = generate_dataset(GEN, 6)
    runs = [bench(model, scenes, GEN, "subgraph", n_proposals=32, warmup=2).sec_per_image for _ in range(3)]
    assert np.std(runs) < 0.2 * np.mean(runs)
