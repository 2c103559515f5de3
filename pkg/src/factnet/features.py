"""Stand-in backbone and ROI feature pooling.

A three-layer conv stem with two 2x2 average-pooling steps maps the image to
a shared feature map at 1/4 resolution.  ROI-align samples a 5x5 grid from it
for every object and every subgraph box; two FC layers turn object samples
into vectors and two 3x3 convs turn subgraph samples into 2-D maps.
"""

from __future__ import annotations

import numpy as np

from .geometry import GeometryError
from .nn import Conv2d, Linear, Module
from .tensor import DimensionError, Tensor, _make, avg_pool2d, relu, reshape


def roi_align(fmap: Tensor, boxes: np.ndarray, size: int = 5, scale: float = 0.25) -> Tensor:
    """Bilinear ROI pooling with one sample at the center of each bin.

    ``boxes`` are ``[R, 4]`` in image pixels and get clamped to the image
    (``map extent / scale``) first.  Pixel ``(r, c)`` of the map sits at
    continuous feature coordinate ``(c + 0.5, r + 0.5)``.  Returns
    ``[R, C, size, size]``.
    """
    C, H, W = fmap.dims
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    img_w, img_h = W / scale, H / scale
    outside = (boxes[:, 0] >= img_w) | (boxes[:, 2] <= 0) | (boxes[:, 1] >= img_h) | (boxes[:, 3] <= 0)
    if np.any(outside):
        raise GeometryError(f"box {boxes[np.argmax(outside)].tolist()} lies outside the {img_w:g}x{img_h:g} image")
    b = boxes.copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, img_w) * scale
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, img_h) * scale
    frac = (np.arange(size) + 0.5) / size
    xs = b[:, 0:1] + frac[None] * (b[:, 2:3] - b[:, 0:1]) - 0.5  # [R, S] index space
    ys = b[:, 1:2] + frac[None] * (b[:, 3:4] - b[:, 1:2]) - 0.5
    xs = np.clip(xs, 0, W - 1)
    ys = np.clip(ys, 0, H - 1)
    x0 = np.minimum(np.floor(xs).astype(np.intp), max(W - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.intp), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (xs - x0).astype(fmap.dtype)
    fy = (ys - y0).astype(fmap.dtype)

    # corner index grids [R, S, S] (row = y bin, col = x bin)
    Y0, X0 = y0[:, :, None], x0[:, None, :]
    Y1, X1 = y1[:, :, None], x1[:, None, :]
    wy1, wx1 = fy[:, :, None], fx[:, None, :]
    wy0, wx0 = 1 - wy1, 1 - wx1
    corners = ((Y0, X0, wy0 * wx0), (Y0, X1, wy0 * wx1), (Y1, X0, wy1 * wx0), (Y1, X1, wy1 * wx1))
    m = fmap.data
    out = np.zeros((C,) + Y0.shape[:1] + (size, size), dtype=fmap.dtype)
    for yy, xx, w in corners:
        out += m[:, yy, xx] * w
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gC = g.transpose(1, 0, 2, 3)
        chan = (np.arange(C) * (H * W))[:, None]
        gm = np.zeros(C * H * W)
        for yy, xx, w in corners:
            idx = (chan + np.broadcast_to(yy * W + xx, w.shape).reshape(1, -1)).reshape(-1)
            gm += np.bincount(idx, weights=(gC * w).reshape(-1), minlength=C * H * W)
        fmap._accumulate(gm.reshape(C, H, W).astype(m.dtype))

    return _make(out, (fmap,), backward, "roi_align")


class Stem(Module):
    """conv-relu-pool, conv-relu-pool, conv-relu; output stride 4."""

    def __init__(self, channels, rng, dtype=np.float64, in_channels: int = 3):
        c1, c2, c3 = channels
        self.conv1 = Conv2d(in_channels, c1, 3, rng, dtype)
        self.conv2 = Conv2d(c1, c2, 3, rng, dtype)
        self.conv3 = Conv2d(c2, c3, 3, rng, dtype)
        self.stride = 4
        self.out_channels = c3

    def __call__(self, img: Tensor) -> Tensor:
        if img.data.ndim != 3 or img.dims[0] != self.conv1.K.dims[1]:
            raise DimensionError(f"stem expects [{self.conv1.K.dims[1]}, H, W], got {img.dims}")
        if img.dims[1] % self.stride or img.dims[2] % self.stride:
            raise DimensionError(f"image extent {img.dims[1:]} not divisible by stride {self.stride}")
        h = avg_pool2d(relu(self.conv1(img)), 2)
        h = avg_pool2d(relu(self.conv2(h)), 2)
        return relu(self.conv3(h))


class ObjectTransform(Module):
    """flatten -> FC -> relu -> FC, giving one D-dim vector per ROI."""

    def __init__(self, channels: int, dim: int, rng, dtype=np.float64, pool: int = 5):
        self.fc1 = Linear(channels * pool * pool, dim, rng, dtype)
        self.fc2 = Linear(dim, dim, rng, dtype)

    def __call__(self, pooled: Tensor) -> Tensor:
        flat = reshape(pooled, (pooled.dims[0], -1))
        return self.fc2(relu(self.fc1(flat)))


class SubgraphTransform(Module):
    """Two padded 3x3 convs with a relu in between; spatial extent is preserved."""

    def __init__(self, channels: int, dim: int, rng, dtype=np.float64):
        self.conv1 = Conv2d(channels, dim, 3, rng, dtype)
        self.conv2 = Conv2d(dim, dim, 3, rng, dtype)

    def __call__(self, pooled: Tensor) -> Tensor:
        return self.conv2(relu(self.conv1(pooled)))
