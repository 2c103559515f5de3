"""Spatial-sensitive relation inference and the average-pool baseline head."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .graph import ConnectionGraph, GraphConsistencyError
from .nn import Conv2d, Linear, Module
from .tensor import Tensor, channel_scale, concat, relu, reshape, take
from .smp import pool_subgraph


class SRIHead(Module):
    """Subject/object vectors become per-channel kernels over the subgraph map.

    The three maps ``[S_subj; S; S_obj]`` are concatenated (3D channels),
    squeezed by a 1x1 bottleneck to ``bottleneck`` channels and classified by
    an FC layer that sees every spatial location separately.
    """

    def __init__(self, dim: int, bottleneck: int, n_predicates: int, n_classes: int, rng, dtype=np.float64, pool: int = 5):
        if bottleneck > 3 * dim:
            raise ValueError(f"bottleneck {bottleneck} exceeds concatenated width {3 * dim}")
        self.dim, self.pool = dim, pool
        self.kernel_subj = Linear(dim, dim, rng, dtype)
        self.kernel_obj = Linear(dim, dim, rng, dtype)
        self.bottleneck = Conv2d(3 * dim, bottleneck, 1, rng, dtype)
        self.fc_p = Linear(bottleneck * pool * pool, n_predicates, rng, dtype)
        self.fc_obj = Linear(dim, n_classes, rng, dtype)

    def weight_count(self) -> int:
        """Weights of the bottleneck and FC^(p), biases excluded."""
        return self.bottleneck.K.data.size + self.fc_p.W.data.size


def kernel_product(o: Tensor, S: Tensor, fc: Linear) -> Tensor:
    """``FC(relu(o))[c] * relu(S)[c, x, y]``; o is [T, D], S is [T, D, H, W]."""
    return channel_scale(relu(S), fc(relu(o)))


def predict_predicate(
    O: Tensor, S: Tensor, triples: np.ndarray, head: SRIHead, graph: Optional[ConnectionGraph] = None
) -> Tensor:
    """Predicate logits [T, C_p] for ``(i, k, j)`` rows of ``triples``."""
    triples = np.asarray(triples, dtype=np.intp).reshape(-1, 3)
    if graph is not None:
        _require_triples(graph, triples)
    i, k, j = triples[:, 0], triples[:, 1], triples[:, 2]
    Sk = take(S, k)
    rSk = relu(Sk)
    s_subj = channel_scale(rSk, head.kernel_subj(relu(take(O, i))))
    s_obj = channel_scale(rSk, head.kernel_obj(relu(take(O, j))))
    cat = relu(concat([s_subj, Sk, s_obj], axis=1))
    h = relu(head.bottleneck(cat))
    return head.fc_p(reshape(h, (h.dims[0], -1)))


def predict_object(O: Tensor, head) -> Tensor:
    return head.fc_obj(O)


def _require_triples(graph: ConnectionGraph, triples: np.ndarray) -> None:
    for i, k, j in triples:
        if not graph.has_triple(int(i), int(k), int(j)):
            raise GraphConsistencyError(f"triple ({i}, {k}, {j}) is not in the connection graph")


def param_count(channels: int, bottleneck: int, n_predicates: int, width: int, height: int) -> tuple[int, int]:
    """Weight counts of the predicate classifier without and with a 1x1 bottleneck.

    ``channels`` is the channel count of the map entering the classifier; for
    :class:`SRIHead` that is the concatenated ``3 * dim``.  Biases are not
    counted.
    """
    if min(channels, bottleneck, n_predicates, width, height) <= 0:
        raise ValueError("all sizes must be positive")
    without = n_predicates * channels * width * height
    with_b = channels * bottleneck + n_predicates * bottleneck * width * height
    return without, with_b


class PairHead(Module):
    """Baseline: average-pool the subgraph map and classify ``[o_i; s_k; o_j]``."""

    def __init__(self, dim: int, n_predicates: int, n_classes: int, rng, dtype=np.float64):
        self.fc1 = Linear(3 * dim, dim, rng, dtype)
        self.fc2 = Linear(dim, n_predicates, rng, dtype)
        self.fc_obj = Linear(dim, n_classes, rng, dtype)


def predict_predicate_pooled(O: Tensor, S: Tensor, triples: np.ndarray, head: PairHead) -> Tensor:
    triples = np.asarray(triples, dtype=np.intp).reshape(-1, 3)
    s = pool_subgraph(S)
    x = concat([take(O, triples[:, 0]), take(s, triples[:, 1]), take(O, triples[:, 2])], axis=1)
    return head.fc2(relu(head.fc1(relu(x))))
