"""Layers, the SGD optimizer and checkpoint serialization."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .tensor import Parameter, Tensor, conv2d, linear


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Anything that owns parameters; children are discovered by attribute."""

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def set_lr_mult(self, mult: float) -> None:
        for p in self.parameters():
            p.lr_mult = mult

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        self.W = Parameter(uniform_init(rng, (d_out, d_in), d_in, dtype))
        self.b = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.W, self.b)


class Conv2d(Module):
    def __init__(
        self, c_in: int, c_out: int, k: int, rng: np.random.Generator, dtype=np.float64, padding: Optional[int] = None
    ):
        fan_in = c_in * k * k
        self.K = Parameter(uniform_init(rng, (c_out, c_in, k, k), fan_in, dtype))
        self.b = Parameter(np.zeros(c_out, dtype=dtype))
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.K, self.b, self.padding)


class SGD:
    """Momentum SGD with per-parameter learning-rate multipliers."""

    def __init__(self, params: list[Parameter], lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None or p.lr_mult == 0.0:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (self.lr * p.lr_mult) * v


# ----------------------------------------------------------------- checkpoints
#
# Layout: one line of UTF-8 JSON terminated by b"\n", then the raw payload of
# float32 little-endian values.  The header lists every tensor's name, dims
# and byte offset into the payload, plus free-form metadata.


def save_checkpoint(path, named: list[tuple[str, np.ndarray]], meta: Optional[dict] = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in named:
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "dims": list(arr.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for c in chunks:
            fh.write(c)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from exc
    payload = memoryview(raw)[nl + 1 :]
    out = {}
    for ent in header["tensors"]:
        n = int(np.prod(ent["dims"])) if ent["dims"] else 1
        lo, hi = ent["offset"], ent["offset"] + 4 * n
        if hi > len(payload):
            raise CheckpointError(f"{path}: tensor {ent['name']} runs past end of file")
        out[ent["name"]] = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(ent["dims"]).copy()
    return out, header.get("meta", {})
