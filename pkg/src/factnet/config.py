"""Run configuration dataclasses and their JSON round-trip."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
PREDICATES = (
    "background",
    "left-of",
    "right-of",
    "above",
    "below",
    "inside",
    "around",
    "overlapping",
    "near",
)


@dataclass
class GenConfig:
    seed: int = 0
    min_objects: int = 3
    max_objects: int = 8
    image_size: int = 128
    min_size: float = 14.0
    max_size: float = 34.0
    shapes: tuple = SHAPES
    colors: tuple = COLORS
    predicates: tuple = PREDICATES
    near_radius: float = 30.0
    far_radius: float = 72.0
    p_nested: float = 0.2
    max_relations: int = 50
    max_pair_iou: float = 0.5  # objects overlapping this much are ambiguous at the evaluation IoU
    max_retries: int = 200
    # proposal stand-in
    jitter_sigma: float = 0.05
    n_distractors: int = 2
    n_proposals: Optional[int] = None

    @property
    def n_object_classes(self) -> int:
        return 1 + len(self.shapes) * len(self.colors)

    @property
    def n_predicates(self) -> int:
        return len(self.predicates)


@dataclass
class ModelConfig:
    dim: int = 64
    stem_channels: tuple = (16, 32, 32)
    bottleneck: Optional[int] = None  # default 3*dim/2
    n_smp: int = 1
    use_sri: bool = True
    o2s_kernel: int = 1
    pool_size: int = 5
    feature_stride: int = 4
    n_object_classes: int = 13
    n_predicates: int = 9
    seed: int = 0
    dtype: str = "float32"

    @property
    def bottleneck_channels(self) -> int:
        return self.bottleneck if self.bottleneck is not None else (3 * self.dim) // 2


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_step_epochs: int = 3
    lr_gamma: float = 0.1
    epochs: int = 4
    object_samples: int = 32
    predicate_samples: int = 128
    fg_fraction: float = 0.5
    obj_loss_weight: float = 1.0
    pred_loss_weight: float = 1.0
    stem_lr_mult: float = 1.0
    train_threshold: float = 0.5
    val_scenes: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.fg_fraction < 1.0:
            raise ValueError("fg_fraction must lie in (0, 1)")


@dataclass
class EvalConfig:
    test_threshold: float = 0.5
    triplet_nms_iou: float = 0.5
    match_iou: float = 0.5
    top_k: int = 100


@dataclass
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        subs = {"gen": GenConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            if f.name in subs:
                kw[f.name] = _build(subs[f.name], d[f.name])
            else:
                kw[f.name] = d[f.name]
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _build(cls, d: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kw)
