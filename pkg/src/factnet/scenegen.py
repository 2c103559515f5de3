"""Synthetic scenes of colored shapes with geometric predicate labels.

Each scene is fully determined by ``(cfg.seed, index)``.  Predicates are a
pure function of the two boxes, so relations can be re-derived from the
stored boxes at any time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from .config import GenConfig
from .geometry import Box, clamp_boxes, iou
from .graph import Proposal

RGB = {
    "red": (0.95, 0.15, 0.1),
    "green": (0.1, 0.85, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.1),
}

BACKGROUND = 0


class GenerationError(RuntimeError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


def category_of(shape: int, color: int, n_colors: int) -> int:
    return 1 + shape * n_colors + color


def split_category(cat: int, n_colors: int) -> tuple[int, int]:
    return divmod(cat - 1, n_colors)


@dataclass
class Scene:
    objects: list  # [(category, Box)]
    relations: list  # [(subject, predicate, object)]
    seed: int = 0
    image_size: int = 128
    shapes: tuple = ("circle", "square", "triangle")
    colors: tuple = ("red", "green", "blue", "yellow")

    @property
    def boxes(self) -> np.ndarray:
        return np.array([tuple(b) for _, b in self.objects], dtype=np.float64).reshape(-1, 4)

    @property
    def categories(self) -> np.ndarray:
        return np.array([c for c, _ in self.objects], dtype=np.intp)

    @cached_property
    def image(self) -> np.ndarray:
        return rasterize(self.objects, self.image_size, self.shapes, self.colors)

    def to_json(self) -> dict:
        return {
            "objects": [{"cat": int(c), "box": [b.x1, b.y1, b.x2, b.y2]} for c, b in self.objects],
            "relations": [[int(i), int(p), int(j)] for i, p, j in self.relations],
            "seed": int(self.seed),
        }

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return self.to_json() == other.to_json()


# ------------------------------------------------------------------ predicates


def predicate_between(a: Box, b: Box, cfg: GenConfig) -> int:
    """Predicate index for the ordered pair (a, b); background when none applies.

    Rules are checked in a fixed order so exactly one label results.
    """
    p = {name: idx for idx, name in enumerate(cfg.predicates)}
    if a != b:
        if b.contains(a):
            return p["inside"]
        if a.contains(b):
            return p["around"]
    if iou(a, b) > 0:
        return p["overlapping"]
    (ax, ay), (bx, by) = a.center, b.center
    dx, dy = bx - ax, by - ay
    dist = math.hypot(dx, dy)
    if dist < cfg.near_radius:
        return p["near"]
    if dist > cfg.far_radius:
        return BACKGROUND
    if abs(dx) > abs(dy):
        gap = (b.x1 - a.x2) if dx > 0 else (a.x1 - b.x2)
        if gap > 0:
            return p["left-of"] if dx > 0 else p["right-of"]
    elif abs(dy) > abs(dx):
        gap = (b.y1 - a.y2) if dy > 0 else (a.y1 - b.y2)
        if gap > 0:
            # image y grows downward
            return p["above"] if dy > 0 else p["below"]
    return BACKGROUND


def derive_relations(boxes: list, cfg: GenConfig) -> list:
    rels = []
    for i, a in enumerate(boxes):
        for j, b in enumerate(boxes):
            if i != j:
                pred = predicate_between(a, b, cfg)
                if pred != BACKGROUND:
                    rels.append((i, pred, j))
    return rels


# ------------------------------------------------------------------ generation


def scene_seed(cfg: GenConfig, index: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, index]).generate_state(1)[0])


def _random_box(rng, cfg: GenConfig, within: Optional[Box] = None) -> Box:
    size = cfg.image_size
    if within is None:
        w = rng.uniform(cfg.min_size, cfg.max_size)
        h = w * rng.uniform(0.8, 1.25)
        x1 = rng.uniform(0, size - w)
        y1 = rng.uniform(0, size - h)
        return Box(x1, y1, x1 + w, y1 + h)
    w = rng.uniform(0.35, 0.55) * within.width
    h = rng.uniform(0.35, 0.55) * within.height
    x1 = rng.uniform(within.x1 + 1, within.x2 - w - 1)
    y1 = rng.uniform(within.y1 + 1, within.y2 - h - 1)
    return Box(x1, y1, x1 + w, y1 + h)


def generate_scene(cfg: GenConfig, index: int) -> Scene:
    seed = scene_seed(cfg, index)
    rng = np.random.default_rng(seed)
    n_colors = len(cfg.colors)
    for _ in range(cfg.max_retries):
        n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        objs: list = []
        for _k in range(n):
            hosts = [b for _, b in objs if b.width >= 2.5 * cfg.min_size * 0.8 and b.height >= 2.5 * cfg.min_size * 0.8]
            if hosts and rng.random() < cfg.p_nested:
                host_i = int(rng.integers(len(hosts)))
                box = _random_box(rng, cfg, within=hosts[host_i])
                host_color = split_category(next(c for c, b in objs if b is hosts[host_i]), n_colors)[1]
                color = int(rng.choice([c for c in range(n_colors) if c != host_color]))
            else:
                box = _random_box(rng, cfg)
                color = int(rng.integers(n_colors))
            shape = int(rng.integers(len(cfg.shapes)))
            objs.append((category_of(shape, color, n_colors), box))
        rels = derive_relations([b for _, b in objs], cfg)
        if 1 <= len(rels) <= cfg.max_relations and _separated(objs, cfg) and _visible(objs, cfg):
            return Scene(objs, rels, seed, cfg.image_size, tuple(cfg.shapes), tuple(cfg.colors))
    raise GenerationError(f"scene {index}: no valid layout after {cfg.max_retries} retries")


def _separated(objs, cfg: GenConfig) -> bool:
    boxes = [b for _, b in objs]
    return all(iou(a, b) < cfg.max_pair_iou for k, a in enumerate(boxes) for b in boxes[:k])


def _visible(objs, cfg: GenConfig, min_frac: float = 0.3) -> bool:
    """Every object keeps at least ``min_frac`` of its own mask after painting."""
    owner = paint_order_mask(objs, cfg.image_size, cfg.shapes, len(cfg.colors))
    for i, (_, b) in enumerate(objs):
        own = shape_mask(b, _shape_name(objs[i][0], cfg), cfg.image_size).sum()
        if own == 0 or (owner == i).sum() < min_frac * own:
            return False
    return True


def _shape_name(cat: int, cfg) -> str:
    return cfg.shapes[split_category(cat, len(cfg.colors))[0]]


# ------------------------------------------------------------------ rasterizer


def shape_mask(box: Box, shape: str, size: int) -> np.ndarray:
    c = np.arange(size) + 0.5
    X, Y = np.meshgrid(c, c)
    if shape == "square":
        return (X >= box.x1) & (X <= box.x2) & (Y >= box.y1) & (Y <= box.y2)
    if shape == "circle":
        cx, cy = box.center
        rx, ry = box.width / 2, box.height / 2
        return ((X - cx) / rx) ** 2 + ((Y - cy) / ry) ** 2 <= 1.0
    if shape == "triangle":
        # apex at top-center, base along the bottom edge
        t = (Y - box.y1) / box.height
        half = 0.5 * box.width * t
        cx = box.center[0]
        return (t >= 0) & (t <= 1) & (np.abs(X - cx) <= half)
    raise ValueError(f"unknown shape {shape!r}")


def paint_order(objs) -> list[int]:
    """Larger objects first so nested ones stay visible."""
    return sorted(range(len(objs)), key=lambda i: (-objs[i][1].area, i))


def paint_order_mask(objs, size: int, shapes, n_colors: int) -> np.ndarray:
    owner = np.full((size, size), -1, dtype=np.intp)
    for i in paint_order(objs):
        cat, box = objs[i]
        owner[shape_mask(box, shapes[split_category(cat, n_colors)[0]], size)] = i
    return owner


def rasterize(objs, size: int = 128, shapes=("circle", "square", "triangle"), colors=("red", "green", "blue", "yellow")):
    img = np.zeros((3, size, size), dtype=np.float32)
    img[:] = 0.1
    n_colors = len(colors)
    for i in paint_order(objs):
        cat, box = objs[i]
        s, c = split_category(cat, n_colors)
        m = shape_mask(box, shapes[s], size)
        for ch in range(3):
            img[ch][m] = RGB[colors[c]][ch]
    return img


# ------------------------------------------------------------------ proposals


def jitter_proposals(scene: Scene, cfg: GenConfig, rng: Optional[np.random.Generator] = None) -> list[Proposal]:
    """Noisy copies of the ground-truth boxes plus random distractors.

    With ``cfg.n_proposals`` set, ground-truth boxes are copied round-robin
    until ``n_proposals - n_distractors`` jittered boxes exist.
    """
    rng = rng if rng is not None else np.random.default_rng([scene.seed, 1])
    gt = scene.boxes
    size = scene.image_size
    n_gt = len(gt)
    n_copies = n_gt if cfg.n_proposals is None else max(cfg.n_proposals - cfg.n_distractors, n_gt)
    src = np.arange(n_copies) % max(n_gt, 1)
    out: list[Proposal] = []
    for s in src:
        b = gt[s]
        w, h = b[2] - b[0], b[3] - b[1]
        noise = rng.normal(0.0, cfg.jitter_sigma, size=4) * np.array([w, h, w, h])
        out.append(Proposal(_valid_box(b + noise, size), 1.0))
    for _ in range(cfg.n_distractors):
        d = _random_box(rng, cfg)
        out.append(Proposal(_valid_box(np.array(tuple(d)), size), float(rng.uniform(0.3, 1.0))))
    return out


def _valid_box(arr: np.ndarray, size: int) -> Box:
    a = clamp_boxes(arr[None], size, size)[0]
    x1, x2 = sorted((a[0], a[2]))
    y1, y2 = sorted((a[1], a[3]))
    if x2 - x1 < 1.0:
        x1, x2 = (x1, x1 + 1.0) if x1 + 1.0 <= size else (x2 - 1.0, x2)
    if y2 - y1 < 1.0:
        y1, y2 = (y1, y1 + 1.0) if y1 + 1.0 <= size else (y2 - 1.0, y2)
    return Box(float(x1), float(y1), float(x2), float(y2))


# ------------------------------------------------------------------ dataset io


def generate_dataset(cfg: GenConfig, n_scenes: int, start: int = 0) -> list[Scene]:
    return [generate_scene(cfg, start + i) for i in range(n_scenes)]


def write_dataset(cfg: GenConfig, n_scenes: int, path, start: int = 0) -> list[Scene]:
    scenes = generate_dataset(cfg, n_scenes, start)
    write_scenes(scenes, path)
    return scenes


def write_scenes(scenes: list[Scene], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sc in scenes:
            fh.write(json.dumps(sc.to_json(), separators=(",", ":")) + "\n")


def read_dataset(path, cfg: Optional[GenConfig] = None) -> list[Scene]:
    cfg = cfg or GenConfig()
    raw = Path(path).read_bytes()
    scenes = []
    offset = 0
    for line in raw.split(b"\n"):
        start = offset
        offset += len(line) + 1
        if not line.strip():
            continue
        try:
            d = json.loads(line.decode("utf-8"))
            objs = [(int(o["cat"]), Box(*map(float, o["box"]))) for o in d["objects"]]
            rels = [tuple(int(v) for v in r) for r in d["relations"]]
            seed = int(d["seed"])
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            pos = getattr(exc, "pos", None) or getattr(exc, "start", 0)
            raise DatasetParseError(f"{path}: malformed scene: {exc}", start + pos) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetParseError(f"{path}: malformed scene: {exc!r}", start) from exc
        for r in rels:
            if len(r) != 3 or not all(0 <= r[k] < len(objs) for k in (0, 2)) or r[0] == r[2]:
                raise DatasetParseError(f"{path}: bad relation {r}", start)
        scenes.append(Scene(objs, rels, seed, cfg.image_size, tuple(cfg.shapes), tuple(cfg.colors)))
    return scenes
