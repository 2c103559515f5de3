"""The assembled network: stem, ROI features, stacked SMP and a relation head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import ModelConfig
from .features import ObjectTransform, Stem, SubgraphTransform, roi_align
from .graph import ConnectionGraph
from .nn import Module, load_checkpoint, save_checkpoint
from .smp import AttentionRecord, SMPLayer, smp_step
from .sri import PairHead, SRIHead, predict_object, predict_predicate, predict_predicate_pooled
from .tensor import Tensor, concat, grad_enabled


@dataclass
class Outputs:
    obj_logits: Tensor  # [N, C_o]
    pred_logits: Optional[Tensor]  # [T', C_p], None when N < 2
    triples: np.ndarray  # [T', 3] rows matching pred_logits
    attention: list


class FactorizableNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = np.dtype(cfg.dtype)
        c = cfg.stem_channels[-1]
        self.stem = Stem(cfg.stem_channels, rng, dt)
        self.obj_tf = ObjectTransform(c, cfg.dim, rng, dt, cfg.pool_size)
        self.sub_tf = SubgraphTransform(c, cfg.dim, rng, dt)
        self.smp = [SMPLayer(cfg.dim, rng, dt, cfg.o2s_kernel) for _ in range(cfg.n_smp)]
        if cfg.use_sri:
            self.head = SRIHead(
                cfg.dim, cfg.bottleneck_channels, cfg.n_predicates, cfg.n_object_classes, rng, dt, cfg.pool_size
            )
        else:
            self.head = PairHead(cfg.dim, cfg.n_predicates, cfg.n_object_classes, rng, dt)

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def features(self, image: np.ndarray, graph: ConnectionGraph, chunk: int = 512) -> tuple[Tensor, Tensor]:
        fmap = self.stem(Tensor(np.asarray(image, dtype=self.dtype)))
        scale = 1.0 / self.stem.stride
        O = self.obj_tf(roi_align(fmap, graph.obj_boxes, self.cfg.pool_size, scale))
        if grad_enabled() or graph.n_subgraphs <= chunk:
            S = self.sub_tf(roi_align(fmap, graph.sub_boxes, self.cfg.pool_size, scale))
        else:
            parts = [
                self.sub_tf(roi_align(fmap, graph.sub_boxes[a : a + chunk], self.cfg.pool_size, scale))
                for a in range(0, graph.n_subgraphs, chunk)
            ]
            S = concat(parts, axis=0)
        return O, S

    def __call__(
        self, image: np.ndarray, graph: ConnectionGraph, triple_idx: Optional[np.ndarray] = None, chunk: int = 1024
    ) -> Outputs:
        O, S = self.features(image, graph)
        records: list[AttentionRecord] = []
        if graph.n_objects >= 2:
            for layer in self.smp:
                O, S, rec = smp_step(O, S, graph, layer)
                records.append(rec)
        obj_logits = predict_object(O, self.head)
        if graph.n_objects < 2:
            return Outputs(obj_logits, None, np.zeros((0, 3), dtype=np.intp), records)
        triples = graph.triples if triple_idx is None else graph.triples[np.asarray(triple_idx, dtype=np.intp)]
        predict = predict_predicate if self.cfg.use_sri else predict_predicate_pooled
        if grad_enabled() or len(triples) <= chunk:
            pred = predict(O, S, triples, self.head)
        else:
            pred = concat([predict(O, S, triples[a : a + chunk], self.head) for a in range(0, len(triples), chunk)])
        return Outputs(obj_logits, pred, triples, records)

    # ------------------------------------------------------------ persistence

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(name, p.data) for name, p in self.named_parameters()]

    def save(self, path, extra: Optional[dict] = None) -> None:
        meta = {"model": dataclasses.asdict(self.cfg)}
        if extra:
            meta.update(extra)
        save_checkpoint(path, self.state(), meta)

    def load_state(self, arrays: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            a = arrays[name]
            if a.shape != p.dims:
                raise ValueError(f"parameter {name}: checkpoint dims {a.shape} != model dims {p.dims}")
            p.data[...] = a.astype(p.dtype)

    @classmethod
    def load(cls, path, dtype: Optional[str] = None) -> tuple["FactorizableNet", dict]:
        arrays, meta = load_checkpoint(path)
        mc = dict(meta.get("model", {}))
        if "stem_channels" in mc:
            mc["stem_channels"] = tuple(mc["stem_channels"])
        if dtype:
            mc["dtype"] = dtype
        model = cls(ModelConfig(**mc))
        model.load_state(arrays)
        return model, meta
