import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factnet.config import GenConfig, PREDICATES
from factnet.geometry import Box, iou
from factnet.scenegen import (
    BACKGROUND,
    DatasetParseError,
    GenerationError,
    derive_relations,
    generate_dataset,
    generate_scene,
    jitter_proposals,
    predicate_between,
    read_dataset,
    write_dataset,
)

CFG = GenConfig()
P = {name: i for i, name in enumerate(PREDICATES)}
DUAL = {"left-of": "right-of", "right-of": "left-of", "above": "below", "below": "above", "inside": "around", "around": "inside"}


def test_left_of_rule():
    a, b = Box(10, 50, 30, 70), Box(45, 52, 65, 72)
    assert predicate_between(a, b, CFG) == P["left-of"]
    assert predicate_between(b, a, CFG) == P["right-of"]


def test_above_rule():
    a, b = Box(50, 10, 70, 30), Box(52, 45, 72, 65)
    assert predicate_between(a, b, CFG) == P["above"]
    assert predicate_between(b, a, CFG) == P["below"]


def test_containment_rule():
    outer, inner = Box(10, 10, 60, 60), Box(20, 20, 30, 30)
    assert predicate_between(inner, outer, CFG) == P["inside"]
    assert predicate_between(outer, inner, CFG) == P["around"]


def test_far_pair_is_background():
    assert predicate_between(Box(0, 0, 10, 10), Box(110, 110, 120, 120), CFG) == BACKGROUND


def test_scene_deterministic():
    assert generate_scene(CFG, 17) == generate_scene(CFG, 17)
    assert generate_scene(CFG, 17).image.tobytes() == generate_scene(CFG, 17).image.tobytes()
    assert generate_scene(CFG, 17) != generate_scene(CFG, 18)


def test_impossible_config_raises():
    cfg = replace(CFG, min_objects=40, max_objects=40, max_retries=3)
    with pytest.raises(GenerationError):
        generate_scene(cfg, 0)


@st.composite
def box_pairs(draw):
    def box():
        x, y = draw(st.floats(0, 110)), draw(st.floats(0, 110))
        return Box(x, y, x + draw(st.floats(1, 40)), y + draw(st.floats(1, 40)))

    return box(), box()


@given(box_pairs())
@settings(max_examples=300)
def test_predicates_exclusive_total_and_dual(pair):
    a, b = pair
    pab, pba = predicate_between(a, b, CFG), predicate_between(b, a, CFG)
    assert 0 <= pab < len(PREDICATES)
    name = PREDICATES[pab]
    if name in DUAL:
        assert PREDICATES[pba] == DUAL[name]
    elif name in ("overlapping", "near"):
        assert pba == pab
    if PREDICATES[pba] in DUAL:
        assert name == DUAL[PREDICATES[pba]]


def test_generated_scene_contracts():
    for idx in range(40):
        sc = generate_scene(CFG, idx)
        boxes = [b for _, b in sc.objects]
        assert CFG.min_objects <= len(boxes) <= CFG.max_objects
        assert derive_relations(boxes, CFG) == [tuple(r) for r in sc.relations]
        pairs = [(i, j) for i, _, j in sc.relations]
        assert len(pairs) == len(set(pairs))
        for i, p, j in sc.relations:
            assert i != j and 0 <= i < len(boxes) and 0 <= j < len(boxes) and p != BACKGROUND
        assert sc.image.shape == (3, 128, 128)
        assert all(iou(a, b) < CFG.max_pair_iou for k, a in enumerate(boxes) for b in boxes[:k])


# ------------------------------------------------------------------ proposals


def test_zero_noise_gives_ground_truth():
    cfg = replace(CFG, jitter_sigma=0.0, n_distractors=0)
    sc = generate_scene(cfg, 3)
    props = jitter_proposals(sc, cfg)
    np.testing.assert_allclose(np.array([tuple(p.box) for p in props]), sc.boxes)


def test_jitter_mostly_keeps_overlap():
    cfg = replace(CFG, n_distractors=0)
    hits = total = 0
    for idx in range(60):
        sc = generate_scene(cfg, idx)
        for rep in range(5):
            props = jitter_proposals(sc, cfg, np.random.default_rng([idx, rep]))
            for p, (_, b) in zip(props, sc.objects):
                hits += iou(p.box, b) > 0.5
                total += 1
    assert hits / total >= 0.99


@pytest.mark.parametrize("n_distractors,n_proposals", [(0, None), (3, None), (5, 64)])
def test_distractor_count(n_distractors, n_proposals):
    cfg = replace(CFG, n_distractors=n_distractors, n_proposals=n_proposals)
    sc = generate_scene(cfg, 1)
    props = jitter_proposals(sc, cfg)
    expect = (len(sc.objects) if n_proposals is None else n_proposals - n_distractors) + n_distractors
    assert len(props) == expect
    assert sum(p.objectness < 1.0 for p in props) <= n_distractors
    assert all(p.objectness == 1.0 for p in props[: len(props) - n_distractors])


# ------------------------------------------------------------------------- io


def test_round_trip(tmp_path):
    path = tmp_path / "d.jsonl"
    scenes = write_dataset(CFG, 10, path)
    back = read_dataset(path, CFG)
    assert back == scenes
    assert [s.seed for s in back] == [s.seed for s in scenes]
    assert back[4].image.tobytes() == scenes[4].image.tobytes()


def test_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_bytes(b"")
    assert read_dataset(path) == []


def test_parse_error_reports_offset(tmp_path):
    path = tmp_path / "bad.jsonl"
    write_dataset(CFG, 2, path)
    good = path.read_bytes()
    path.write_bytes(good + b'{"objects": [oops]}\n')
    with pytest.raises(DatasetParseError) as info:
        read_dataset(path)
    assert len(good) <= info.value.offset < len(good) + 20


def test_bad_relation_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"objects":[{"cat":1,"box":[0,0,5,5]}],"relations":[[0,1,3]],"seed":0}\n')
    with pytest.raises(DatasetParseError):
        read_dataset(path)


@pytest.mark.slow
def test_default_training_set_is_fast():
    t0 = time.perf_counter()
    scenes = generate_dataset(CFG, 2000)
    assert len(scenes) == 2000
    assert time.perf_counter() - t0 < 60
