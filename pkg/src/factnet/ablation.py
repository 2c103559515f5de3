"""Full model (1 SMP + SRI) against the no-SMP average-pool baseline."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .config import PREDICATES, GenConfig, ModelConfig, TrainConfig
from .evaluate import evaluate
from .model import FactorizableNet
from .scenegen import generate_dataset
from .train import train

log = logging.getLogger(__name__)

TEST_OFFSET = 1_000_000  # test scenes are drawn from indices far past any training index
DIRECTIONAL = ("left-of", "right-of", "above", "below")


@dataclass
class VariantResult:
    name: str
    model: FactorizableNet
    train_seconds: float
    recall: dict  # (mode, K) -> recall
    per_predicate_sggen50: dict  # predicate name -> recall
    final_losses: Optional[tuple] = None

    def to_json(self) -> dict:
        return {
            "train_seconds": self.train_seconds,
            **{f"{m}{k}": r for (m, k), r in sorted(self.recall.items())},
            "per_predicate_sggen50": self.per_predicate_sggen50,
            "final_losses": list(self.final_losses) if self.final_losses else None,
        }


@dataclass
class AblationResult:
    variants: dict = field(default_factory=dict)

    @property
    def full(self) -> VariantResult:
        return self.variants["full"]

    @property
    def baseline(self) -> VariantResult:
        return self.variants["baseline"]

    def gain(self, predicate: Optional[str] = None) -> float:
        if predicate is None:
            return self.full.recall[("sggen", 50)] - self.baseline.recall[("sggen", 50)]
        return self.full.per_predicate_sggen50[predicate] - self.baseline.per_predicate_sggen50[predicate]

    @property
    def total_train_seconds(self) -> float:
        return sum(v.train_seconds for v in self.variants.values())

    def to_json(self) -> dict:
        return {name: v.to_json() for name, v in self.variants.items()}


def variants(seed: int = 0) -> dict:
    return {
        "full": ModelConfig(n_smp=1, use_sri=True, seed=seed),
        "baseline": ModelConfig(n_smp=0, use_sri=False, seed=seed),
    }


def run_ablation(
    n_train: int = 2000, n_test: int = 500, epochs: int = 4, seed: int = 0, out: Optional[Path] = None
) -> AblationResult:
    gen = GenConfig(seed=seed)
    train_set = generate_dataset(gen, n_train)
    test_set = generate_dataset(gen, n_test, start=TEST_OFFSET)
    tc = TrainConfig(epochs=epochs, seed=seed, val_scenes=0)
    result = AblationResult()
    for name, mc in variants(seed).items():
        t0 = time.perf_counter()
        res = train(train_set, mc, tc, gen)
        seconds = time.perf_counter() - t0
        rep = evaluate(res.model, test_set, gen, ks=(50, 100))
        sg = rep[("sggen", 50)]
        v = VariantResult(
            name,
            res.model,
            seconds,
            {key: r.recall for key, r in rep.items()},
            {PREDICATES[p]: sg.predicate_recall(p) for p in sorted(sg.per_predicate_total)},
            (res.log[-1].obj_loss, res.log[-1].pred_loss) if res.log else None,
        )
        result.variants[name] = v
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            res.model.save(out / f"{name}.ckpt")
            res.write_csv(out / f"{name}_log.csv")
        log.info("%s: sggen@50 %.4f  trained in %.0fs", name, v.recall[("sggen", 50)], seconds)
    return result
