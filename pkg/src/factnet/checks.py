"""Finite-difference suite over every layer family and the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import ModelConfig
from .features import ObjectTransform, Stem, SubgraphTransform, roi_align
from .gradcheck import GradCheckResult, grad_check
from .graph import factorize_arrays
from .model import FactorizableNet
from .nn import Conv2d, Linear
from .smp import SMPLayer, smp_step
from .sri import SRIHead, predict_object, predict_predicate
from .tensor import (
    Parameter,
    Tensor,
    add,
    avg_pool2d,
    avg_pool_spatial,
    concat,
    cross_entropy,
    mul,
    relu,
    segment_softmax,
    segment_sum,
    softmax,
    tsum,
)

F64 = np.float64

# 4 objects on a 32x32 canvas; two clusters so factorization merges pairs
TOY_BOXES = np.array(
    [[2.0, 3.0, 12.0, 14.0], [4.0, 5.0, 13.0, 15.0], [18.0, 16.0, 29.0, 28.0], [20.0, 2.0, 30.0, 11.0]]
)


@dataclass
class CheckOutcome:
    name: str
    result: GradCheckResult

    @property
    def max_rel_error(self) -> float:
        return self.result.max_rel_error


def _probe(rng, shape):
    """Fixed random projection turning any output into a scalar loss."""
    return Tensor(rng.normal(size=shape))


def _named(params, prefix, rng=None):
    """Name parameters and move zero-initialized biases off the relu kink at 0."""
    for i, p in enumerate(params):
        p.name = p.name or f"{prefix}.{i}"
        if rng is not None and not p.data.any():
            p.data[...] = rng.normal(scale=0.1, size=p.dims)
    return params


def layer_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Parameter]]]:
    cases = {}

    x = Parameter(rng.normal(size=(3, 5)), name="x")
    lin = Linear(5, 4, rng, F64)
    w = _probe(rng, (3, 4))
    cases["linear"] = (lambda: tsum(mul(lin(x), w)), [x, lin.W, lin.b])

    xi = Parameter(rng.normal(size=(2, 3, 6, 6)), name="x")
    conv = Conv2d(3, 4, 3, rng, F64)
    wc = _probe(rng, (2, 4, 6, 6))
    cases["conv2d"] = (lambda: tsum(mul(conv(xi), wc)), [xi, conv.K, conv.b])

    v = Parameter(rng.normal(size=(4, 6)), name="v")
    ws = _probe(rng, (4, 6))
    cases["softmax"] = (lambda: tsum(mul(softmax(v), ws)), [v])

    seg = np.array([0, 0, 1, 2, 2, 2])
    e = Parameter(rng.normal(size=(6, 3)), name="e")
    we = _probe(rng, (6, 3))
    wse = _probe(rng, (3, 3))
    cases["segment_softmax"] = (lambda: tsum(mul(segment_softmax(e, seg, 3), we)), [e])
    cases["segment_sum"] = (lambda: tsum(mul(segment_sum(e, seg, 3), wse)), [e])

    a = Parameter(rng.normal(size=(2, 3, 4, 4)), name="a")
    b = Parameter(rng.normal(size=(2, 3, 4, 4)), name="b")
    wp = _probe(rng, (2, 6, 4, 4))
    wq = _probe(rng, (2, 3, 2, 2))
    wg = _probe(rng, (2, 3))
    cases["relu/product/sum/concat"] = (lambda: tsum(mul(concat([relu(a), mul(a, add(a, b))], axis=1), wp)), [a, b])
    cases["avg_pool"] = (lambda: add(tsum(mul(avg_pool2d(a, 2), wq)), tsum(mul(avg_pool_spatial(b), wg))), [a, b])

    logits = Parameter(rng.normal(size=(5, 7)), name="logits")
    labels = rng.integers(0, 7, size=5)
    cases["cross_entropy"] = (lambda: cross_entropy(logits, labels), [logits])

    fmap = Parameter(rng.normal(size=(3, 8, 8)), name="map")
    boxes = np.array([[1.0, 2.0, 20.0, 25.0], [5.5, 0.0, 31.0, 17.3]])
    wr = _probe(rng, (2, 3, 5, 5))
    cases["roi_align"] = (lambda: tsum(mul(roi_align(fmap, boxes, 5, 0.25), wr)), [fmap])

    img = Parameter(rng.uniform(size=(3, 16, 16)), name="image")
    stem = Stem((4, 4, 4), rng, F64)
    wst = _probe(rng, (4, 4, 4))
    cases["stem"] = (lambda: tsum(mul(stem(img), wst)), [img] + _named(stem.parameters(), "stem", rng))

    pooled = Parameter(rng.normal(size=(3, 4, 5, 5)), name="pooled")
    otf = ObjectTransform(4, 6, rng, F64)
    stf = SubgraphTransform(4, 6, rng, F64)
    wo = _probe(rng, (3, 6))
    wsm = _probe(rng, (3, 6, 5, 5))
    cases["object_transform"] = (lambda: tsum(mul(otf(pooled), wo)), [pooled] + _named(otf.parameters(), "obj_tf", rng))
    cases["subgraph_transform"] = (
        lambda: tsum(mul(stf(pooled), wsm)),
        [pooled] + _named(stf.parameters(), "sub_tf", rng),
    )
    return cases


def smp_sri_case(rng: np.random.Generator, dim: int = 6):
    """Two objects sharing one subgraph, one SMP step, SRI head and object classifier."""
    g = factorize_arrays(np.array([[0.0, 0.0, 10.0, 10.0], [5.0, 5.0, 15.0, 15.0]]), np.ones(2), 0.5)
    O = Parameter(rng.normal(size=(2, dim)), name="objects")
    S = Parameter(rng.normal(size=(g.n_subgraphs, dim, 5, 5)), name="subgraphs")
    layer = SMPLayer(dim, rng, F64)
    head = SRIHead(dim, 4, 5, 3, rng, F64)
    params = [O, S] + _named(layer.parameters(), "smp", rng) + _named(head.parameters(), "sri", rng)

    def f():
        O2, S2, _ = smp_step(O, S, g, layer)
        return add(cross_entropy(predict_predicate(O2, S2, g.triples, head), [1, 3]), cross_entropy(predict_object(O2, head), [1, 2]))

    return f, params


def full_model_case(seed: int = 0):
    """The whole network in float64 on a 4-object 32x32 toy scene."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(dim=8, stem_channels=(4, 4, 4), bottleneck=6, n_smp=2, seed=seed, dtype="float64",
                      n_object_classes=4, n_predicates=5)
    model = FactorizableNet(cfg)
    image = rng.uniform(size=(3, 32, 32))
    g = factorize_arrays(TOY_BOXES, np.array([1.0, 0.9, 0.8, 0.7]), 0.5)
    obj_labels = rng.integers(0, 4, size=4)
    pred_labels = rng.integers(0, 5, size=len(g.triples))

    def f():
        out = model(image, g)
        return add(cross_entropy(out.obj_logits, obj_labels), cross_entropy(out.pred_logits, pred_labels))

    params = []
    for name, p in model.named_parameters():
        p.name = name
        if not p.data.any():
            p.data[...] = rng.normal(scale=0.1, size=p.dims)
        params.append(p)
    return f, params


def run_suite(seed: int = 0, eps: float = 3e-3, n_samples: int = 12, method: str = "piecewise") -> list[CheckOutcome]:
    """Every layer family, one SMP step with the SRI head, and the full model."""
    rng = np.random.default_rng(seed)
    cases = list(layer_cases(rng).items())
    cases.append(("smp+sri", smp_sri_case(rng)))
    cases.append(("full_model", full_model_case(seed)))
    return [CheckOutcome(name, grad_check(f, params, eps, n_samples, rng, method)) for name, (f, params) in cases]
