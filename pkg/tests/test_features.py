import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factnet.features import ObjectTransform, Stem, SubgraphTransform, roi_align
from factnet.geometry import GeometryError
from factnet.gradcheck import grad_check
from factnet.tensor import DimensionError, Parameter, Tensor, mul, tsum


def zero_biases(module):
    for name, p in module.named_parameters():
        if name.endswith("b"):
            p.data[...] = 0


@st.composite
def inner_boxes(draw, extent=32.0):
    x1 = draw(st.floats(0, extent - 2))
    y1 = draw(st.floats(0, extent - 2))
    x2 = draw(st.floats(x1 + 1, extent))
    y2 = draw(st.floats(y1 + 1, extent))
    return [x1, y1, x2, y2]


# ------------------------------------------------------------------ roi_align


@given(inner_boxes(), st.floats(-5, 5))
def test_roi_align_constant_map(box, c):
    out = roi_align(Tensor(np.full((2, 8, 8), c)), np.array([box]))
    assert out.dims == (1, 2, 5, 5)
    np.testing.assert_allclose(out.data, c, atol=1e-6)


def test_roi_align_integer_region_returns_pixels():
    m = np.arange(100.0).reshape(1, 10, 10)
    # 5x5 pixel block starting at column 3, row 2, at scale 1
    out = roi_align(Tensor(m), np.array([[3.0, 2.0, 8.0, 7.0]]), 5, 1.0)
    np.testing.assert_array_equal(out.data[0, 0], m[0, 2:7, 3:8])


def test_roi_align_ramp():
    H = W = 8
    xs = np.arange(W) + 0.5  # continuous feature coordinate of each pixel
    m = np.tile(xs, (H, 1))[None]
    box = np.array([[4.0, 4.0, 24.0, 20.0]])  # 1..6 in feature units
    out = roi_align(Tensor(m), box, 5, 0.25).data[0, 0]
    centers = 1.0 + (np.arange(5) + 0.5) / 5 * 5.0
    np.testing.assert_allclose(out, np.tile(centers, (5, 1)), atol=1e-12)


@given(inner_boxes(), st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 3))
@settings(max_examples=200)
def test_roi_align_exact_on_affine_maps(box, a, b, c):
    H = W = 8
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    m = (a * xx + b * yy + c)[None]
    out = roi_align(Tensor(m), np.array([box]), 5, 0.25).data[0, 0]
    x1, y1, x2, y2 = np.array(box) * 0.25
    f = (np.arange(5) + 0.5) / 5
    # samples in the outermost half-pixel are clamped to the border pixel
    px = np.clip(x1 + f * (x2 - x1), 0.5, W - 0.5)
    py = np.clip(y1 + f * (y2 - y1), 0.5, H - 0.5)
    expect = a * px[None, :] + b * py[:, None] + c
    np.testing.assert_allclose(out, expect, atol=1e-5)


def test_roi_align_outside_image():
    with pytest.raises(GeometryError):
        roi_align(Tensor(np.ones((1, 8, 8))), np.array([[40.0, 0.0, 50.0, 10.0]]))


def test_roi_align_clamps_partial_boxes():
    m = Tensor(np.random.default_rng(0).normal(size=(1, 8, 8)))
    a = roi_align(m, np.array([[-10.0, -4.0, 16.0, 16.0]])).data
    b = roi_align(m, np.array([[0.0, 0.0, 16.0, 16.0]])).data
    np.testing.assert_array_equal(a, b)


# ----------------------------------------------------------------------- stem


def test_stem_zero_image():
    stem = Stem((4, 4, 4), np.random.default_rng(0))
    zero_biases(stem)
    assert not stem(Tensor(np.zeros((3, 16, 16)))).data.any()


def test_stem_resolution():
    stem = Stem((4, 6, 8), np.random.default_rng(0))
    assert stem(Tensor(np.zeros((3, 128, 128)))).dims == (8, 32, 32)


def test_stem_deterministic():
    img = np.random.default_rng(3).uniform(size=(3, 32, 32))
    a = Stem((4, 4, 4), np.random.default_rng(9))(Tensor(img)).data
    b = Stem((4, 4, 4), np.random.default_rng(9))(Tensor(img)).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("shape", [(3, 30, 32), (1, 32, 32), (32, 32)])
def test_stem_rejects_bad_shapes(shape):
    with pytest.raises(DimensionError):
        Stem((4, 4, 4), np.random.default_rng(0))(Tensor(np.zeros(shape)))


# ----------------------------------------------------------------- transforms


def test_object_transform_zero_and_shape():
    rng = np.random.default_rng(0)
    for c in (3, 7):
        t = ObjectTransform(c, 11, rng)
        assert t(Tensor(rng.normal(size=(4, c, 5, 5)))).dims == (4, 11)
        zero_biases(t)
        assert not t(Tensor(np.zeros((2, c, 5, 5)))).data.any()


def test_subgraph_transform_zero_and_shape():
    rng = np.random.default_rng(0)
    t = SubgraphTransform(3, 6, rng)
    assert t(Tensor(rng.normal(size=(2, 3, 5, 5)))).dims == (2, 6, 5, 5)
    zero_biases(t)
    assert not t(Tensor(np.zeros((2, 3, 5, 5)))).data.any()


def test_subgraph_transform_receptive_field_covers_map():
    rng = np.random.default_rng(1)
    t = SubgraphTransform(2, 3, rng)
    for _, p in t.named_parameters():
        p.data[...] = np.abs(p.data) + 0.05  # positive weights keep every relu open
    x = Parameter(rng.uniform(0.1, 1.0, size=(1, 2, 5, 5)))
    center = np.zeros((1, 3, 5, 5))
    center[:, :, 2, 2] = 1.0
    tsum(mul(t(x), Tensor(center))).backward()
    assert np.all(np.abs(x.grad).sum(axis=1) > 0)


@pytest.mark.parametrize("which", ["object", "subgraph"])
def test_transforms_grad_check(which):
    rng = np.random.default_rng(4)
    x = Parameter(rng.normal(size=(2, 3, 5, 5)))
    t = ObjectTransform(3, 4, rng) if which == "object" else SubgraphTransform(3, 4, rng)
    for _, p in t.named_parameters():
        if not p.data.any():
            p.data[...] = rng.normal(scale=0.1, size=p.dims)
    w = Tensor(rng.normal(size=t(x).dims))
    res = grad_check(lambda: tsum(mul(t(x), w)), [x] + t.parameters(), eps=1e-3, method="piecewise", rng=rng)
    assert res.max_rel_error <= 1e-4
