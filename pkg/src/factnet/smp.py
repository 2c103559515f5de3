"""Spatial-weighted message passing between object vectors and subgraph maps.

Both directions read the pre-step states and are applied together:

* subgraph -> object: each object attends over its incident subgraphs
  (average-pooled to vectors), aggregates them and adds a transformed
  message residually;
* object -> subgraph: at each of the 5x5 locations of a subgraph map the
  incident objects compete through a softmax, the weighted object vectors
  form a message map and a convolution adds it residually.

All functions are batched over the incidence list ``edges`` ([E, 2] rows of
``(object, subgraph)``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .graph import ConnectionGraph, GraphConsistencyError
from .nn import Conv2d, Linear, Module
from .tensor import Tensor, avg_pool_spatial, mul, relu, reshape, segment_softmax, segment_sum, take, tsum


class SMPLayer(Module):
    def __init__(self, dim: int, rng, dtype=np.float64, o2s_kernel: int = 1):
        # a bias on either attention projection shifts every logit in a softmax
        # segment equally, so it would be a dead parameter
        self.att_s = Linear(dim, dim, rng, dtype, bias=False)
        self.s2o = Linear(dim, dim, rng, dtype)
        self.att_o = Linear(dim, dim, rng, dtype, bias=False)
        self.o2s = Conv2d(dim, dim, o2s_kernel, rng, dtype)

    def zero_messages(self) -> None:
        """Zero the two message transforms, making the layer an identity map."""
        for p in (self.s2o.W, self.s2o.b, self.o2s.K, self.o2s.b):
            p.data[...] = 0


@dataclass
class AttentionRecord:
    edges: np.ndarray  # [E, 2] (object, subgraph)
    obj_weights: np.ndarray  # [E] p_i(S_k)
    loc_weights: np.ndarray  # [E, H*W] P_k(o_i)(x, y), row-major

    def to_json(self) -> dict:
        return {
            "edges": self.edges.tolist(),
            "subgraph_to_object": self.obj_weights.tolist(),
            "object_to_subgraph": self.loc_weights.tolist(),
        }


def pool_subgraph(S: Tensor) -> Tensor:
    """Spatial mean per channel: [..., D, H, W] -> [..., D]."""
    return avg_pool_spatial(S)


def _check_cover(edges: np.ndarray, n: int, col: int, what: str) -> None:
    seen = np.zeros(n, dtype=bool)
    seen[edges[:, col]] = True
    if not seen.all():
        raise GraphConsistencyError(f"{what} {int(np.argmin(seen))} has no incident {'subgraph' if col == 0 else 'object'}")


def message_s2o(O: Tensor, S: Tensor, edges: np.ndarray, layer: SMPLayer) -> tuple[Tensor, Tensor]:
    """Refine object vectors with attention-pooled subgraph messages.

    Returns the refined objects [N, D] and the attention weights [E].
    """
    edges = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
    n = O.dims[0]
    _check_cover(edges, n, 0, "object")
    oi, sk = edges[:, 0], edges[:, 1]
    s = pool_subgraph(S)  # [K, D]
    key = layer.att_s(relu(s))  # [K, D]
    logits = tsum(mul(take(O, oi), take(key, sk)), axis=1)  # [E]
    p = segment_softmax(logits, oi, n)
    agg = segment_sum(mul(reshape(p, (-1, 1)), take(s, sk)), oi, n)  # [N, D]
    return O + layer.s2o(relu(agg)), p


def message_o2s(S: Tensor, O: Tensor, edges: np.ndarray, layer: SMPLayer) -> tuple[Tensor, Tensor]:
    """Refine subgraph maps with location-wise attention over their objects.

    Returns the refined maps [K, D, H, W] and the attention maps [E, H*W].
    """
    edges = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
    K, D, H, W = S.dims
    _check_cover(edges, K, 1, "subgraph")
    oi, sk = edges[:, 0], edges[:, 1]
    q = layer.att_o(relu(O))  # [N, D]
    Sf = reshape(S, (K, D, H * W))
    # logits[e, l] = sum_d q[oi_e, d] * S[sk_e, d, l]
    logits = tsum(mul(reshape(take(q, oi), (-1, D, 1)), take(Sf, sk)), axis=1)  # [E, HW]
    P = segment_softmax(logits, sk, K)
    msg = mul(reshape(P, (-1, 1, H * W)), reshape(take(O, oi), (-1, D, 1)))  # [E, D, HW]
    agg = reshape(segment_sum(msg, sk, K), (K, D, H, W))
    return S + layer.o2s(relu(agg)), P


def smp_step(
    O: Tensor, S: Tensor, graph: ConnectionGraph, layer: SMPLayer, edges: Optional[np.ndarray] = None
) -> tuple[Tensor, Tensor, AttentionRecord]:
    """One parallel SMP update; both directions read the un-refined inputs."""
    edges = graph.incidence if edges is None else edges
    O_new, p = message_s2o(O, S, edges, layer)
    S_new, P = message_o2s(S, O, edges, layer)
    return O_new, S_new, AttentionRecord(np.asarray(edges), p.data.copy(), P.data.copy())
