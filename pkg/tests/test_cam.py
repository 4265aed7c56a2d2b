import dataclasses
import hashlib
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from xfuse import core
from xfuse import functional as F
from xfuse.autograd import grad_check
from xfuse.cam import CAM, CABlock, CNNFusion, DenseFusion, SABlock, build_fusion, ca_block, cam_forward, sa_block
from xfuse.config import FuseConfig, variant_config
from xfuse.core import ShapeError

EPS = 1e-6


def quiet_mlp(block):
    block.mlp.fc2.weight.data[...] = 0.0
    block.mlp.fc2.bias.data[...] = 0.0


def ln2(v):
    """Hand layer norm of a length-2 row (unit gamma, zero beta)."""
    m = (v[0] + v[1]) / 2
    var = ((v[0] - m) ** 2 + (v[1] - m) ** 2) / 2
    return [(v[0] - m) / math.sqrt(var + EPS), (v[1] - m) / math.sqrt(var + EPS)]


# ---------------------------------------------------------------------------
# re_softmax


def test_re_softmax_examples():
    assert core.re_softmax(np.array([0.0, 0.0])).tolist() == [0.5, 0.5]
    assert core.re_softmax(np.array([math.log(2), 0.0])) == pytest.approx([1 / 3, 2 / 3], abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-30, 30), unique=True))
def test_re_softmax_argmax_is_argmin(row):
    srt = np.sort(row)
    assume(srt[1] - srt[0] > 1e-9)  # a unique minimum that float64 can tell apart
    w = core.re_softmax(row)
    assert w.argmax() == row.argmin()
    assert abs(w.sum() - 1.0) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-5, 5)), st.integers(0, 4), st.floats(0.01, 2))
def test_re_softmax_decreasing_in_logit(row, i, bump):
    up = row.copy()
    up[i] += bump
    assert core.re_softmax(up)[i] < core.re_softmax(row)[i]


# ---------------------------------------------------------------------------
# SA block


def test_sa_zero_params_pass_through(rng):
    blk = SABlock(8, rng)
    blk.qkv.data[...] = 0.0
    quiet_mlp(blk)
    x = rng.normal(size=(1, 5, 8))
    assert np.array_equal(sa_block(x, blk).data, x)


def test_sa_single_token(rng):
    blk = SABlock(4, rng)
    blk(rng.normal(size=(1, 1, 4)))
    assert blk.last_weights.data.tolist() == [[[1.0]]]


def test_sa_hand_computed():
    blk = SABlock(2, np.random.default_rng(0))
    blk.qkv.data[...] = np.hstack([np.eye(2)] * 3)
    quiet_mlp(blk)
    x = np.array([[[1.0, 0.0], [0.0, 2.0]]])
    out = blk(x).data[0]
    # scores = x x^T / sqrt2 = [[1, 0], [0, 4]] / sqrt2
    e = math.exp
    s = 1 / math.sqrt(2)
    w0 = [e(s) / (e(s) + 1), 1 / (e(s) + 1)]
    w1 = [1 / (1 + e(4 * s)), e(4 * s) / (1 + e(4 * s))]
    att0 = [w0[0] * 1 + w0[1] * 0, w0[0] * 0 + w0[1] * 2]
    att1 = [w1[0] * 1 + w1[1] * 0, w1[0] * 0 + w1[1] * 2]
    want = [[1 + ln2(att0)[0], 0 + ln2(att0)[1]], [0 + ln2(att1)[0], 2 + ln2(att1)[1]]]
    assert np.abs(blk.last_weights.data[0] - np.array([w0, w1])).max() <= 1e-12
    assert np.abs(out - np.array(want)).max() <= 1e-12


def test_sa_shape_checks(rng):
    blk = SABlock(4, rng)
    x = rng.normal(size=(2, 3, 4))
    assert blk(x).shape == x.shape
    with pytest.raises(ShapeError):
        blk(rng.normal(size=(1, 3, 5)))


# ---------------------------------------------------------------------------
# CA block


def test_ca_hand_computed():
    blk = CABlock(2, np.random.default_rng(0))
    for w in (blk.wq, blk.wk, blk.wv):
        w.data[...] = np.eye(2)
    quiet_mlp(blk)
    own = np.array([[[1.0, 0.0], [0.0, 2.0]]])
    other = np.array([[[1.0, 1.0], [0.0, 1.0]]])
    out = ca_block(own, other, blk).data[0]
    # scores = other own^T / sqrt2 = [[1, 2], [0, 2]] / sqrt2, weights = softmax(-scores)
    s = 1 / math.sqrt(2)
    e = math.exp
    w0 = [e(-s) / (e(-s) + e(-2 * s)), e(-2 * s) / (e(-s) + e(-2 * s))]
    w1 = [1 / (1 + e(-2 * s)), e(-2 * s) / (1 + e(-2 * s))]
    att0 = [w0[0], 2 * w0[1]]
    att1 = [w1[0], 2 * w1[1]]
    want = [[1 + ln2(att0)[0], ln2(att0)[1]], [ln2(att1)[0], 2 + ln2(att1)[1]]]
    assert np.abs(blk.last_weights.data[0] - np.array([w0, w1])).max() <= 1e-12
    assert np.abs(out - np.array(want)).max() <= 1e-12


def test_ca_equal_queries_give_equal_rows(rng):
    blk = CABlock(6, rng)
    other = np.repeat(rng.normal(size=(1, 1, 6)), 4, axis=1)
    blk(rng.normal(size=(1, 4, 6)), other)
    w = blk.last_weights.data[0]
    assert np.array_equal(w, np.repeat(w[:1], 4, axis=0))


def test_ca_most_aligned_key_gets_lowest_weight(rng):
    blk = CABlock(8, rng)
    blk(rng.normal(size=(3, 6, 8)), rng.normal(size=(3, 6, 8)))
    s, w = blk.last_scores, blk.last_weights.data
    assert np.array_equal(s.argmax(axis=-1), w.argmin(axis=-1))
    assert np.array_equal(s.argmin(axis=-1), w.argmax(axis=-1))


def test_ca_dense_layout_runs_and_is_complementary(rng):
    blk = CABlock(4, rng, qkv="dense")
    assert blk.qkv.shape == (12, 12)
    out = blk(rng.normal(size=(1, 5, 4)), rng.normal(size=(1, 5, 4)))
    assert out.shape == (1, 5, 4)
    assert np.array_equal(blk.last_scores.argmin(axis=-1), blk.last_weights.data.argmax(axis=-1))


def test_ca_shape_mismatch(rng):
    blk = CABlock(4, rng)
    with pytest.raises(ShapeError):
        blk(rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 4, 4)))


# ---------------------------------------------------------------------------
# CAM


def deep_pair(seed, shape=(64, 4, 4)):
    r = np.random.default_rng(seed)
    return r.random(shape), r.random(shape)


def test_cam_shape_and_finite():
    cam = CAM(FuseConfig(), np.random.default_rng(0))
    a, b = deep_pair(1, (64, 8, 8))
    out = cam_forward(a, b, cam).data
    assert out.shape == (64, 8, 8)
    assert np.isfinite(out).all()


def test_cam_regression_hash():
    cam = CAM(FuseConfig(), np.random.default_rng(2024))
    a, b = deep_pair(7, (64, 8, 8))
    out = cam(a, b).data
    digest = hashlib.sha256(np.round(out, 8).tobytes()).hexdigest()[:16]
    assert digest == GOLDEN_CAM_DIGEST, digest


GOLDEN_CAM_DIGEST = "5012a36fc5603790"


def test_cam_branch_swap_symmetry():
    cam = CAM(FuseConfig(), np.random.default_rng(3))
    a, b = deep_pair(4)
    out1 = cam(a, b).data
    cam.ir, cam.vi = cam.vi, cam.ir
    out2 = cam(b, a).data
    assert np.array_equal(out1, out2)


def test_zero_offsets_equal_no_shift():
    a, b = deep_pair(5)
    zero = CAM(FuseConfig(shift_offsets=(0, 0)), np.random.default_rng(6))(a, b).data
    off = CAM(FuseConfig(shift=False), np.random.default_rng(6))(a, b).data
    shifted = CAM(FuseConfig(), np.random.default_rng(6))(a, b).data
    assert np.array_equal(zero, off)
    assert not np.array_equal(zero, shifted)


def test_unshift_shift_trace_bitwise():
    cam = CAM(FuseConfig(), np.random.default_rng(8))
    a, b = deep_pair(9)
    cam(a, b)
    H = W = 4
    x = cam.trace["ir_sa1"]
    shifted = F.to_tokens(F.cyclic_shift(F.from_tokens(x, H, W), 2, 2))
    y = cam.ir.sa_post[0](shifted)
    back = F.to_tokens(F.cyclic_shift(F.from_tokens(y, H, W), -2, -2))
    assert back.data.tobytes() == cam.trace["ir_sa2"].data.tobytes()


def test_cam_complementarity_inside_forward():
    cam = CAM(FuseConfig(), np.random.default_rng(10))
    cam(*deep_pair(11))
    for branch in (cam.ir, cam.vi):
        blk = branch.ca[0]
        assert np.array_equal(blk.last_weights.data.argmax(-1), blk.last_scores.argmin(-1))


def test_softmax_variant_is_not_complementary():
    cam = CAM(variant_config("no-resoftmax"), np.random.default_rng(10))
    cam(*deep_pair(11))
    blk = cam.ir.ca[0]
    assert np.array_equal(blk.last_weights.data.argmax(-1), blk.last_scores.argmax(-1))


@pytest.mark.parametrize("variant,sa,ca", [("s1-c1", 2, 1), ("s2-c2", 4, 2), ("s3-c3", 6, 3)])
def test_block_counts(variant, sa, ca):
    cam = CAM(variant_config(variant), np.random.default_rng(0))
    for branch in (cam.ir, cam.vi):
        assert len(branch.sa_pre) + len(branch.sa_post) == sa
        assert len(branch.ca) == ca


def test_cam_shape_mismatch():
    cam = CAM(FuseConfig(), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        cam(np.zeros((64, 4, 4)), np.zeros((64, 2, 4)))


def test_cam_grad_check():
    cam = CAM(FuseConfig(), np.random.default_rng(12))
    a, b = deep_pair(13, (1, 64, 2, 2))
    proj = np.random.default_rng(14).normal(size=(1, 64, 2, 2))
    report = grad_check(lambda: F.sum_(F.mul(cam(a, b), proj)), cam.param_store(), samples=16)
    assert report.max_rel_error < 1e-3, report.summary()


@pytest.mark.parametrize("name,cls", [("fuse-cnn", CNNFusion), ("fuse-dense", DenseFusion)])
def test_replacement_fusion_modules(name, cls):
    cfg = variant_config(name)
    mod = build_fusion(cfg, np.random.default_rng(0))
    assert isinstance(mod, cls)
    out = mod(*deep_pair(1, (2, 64, 4, 4)))
    assert out.shape == (2, 64, 4, 4)
    if cls is CNNFusion:
        assert len(mod.convs) == 4


def test_dataclass_replace_keeps_variant_switches():
    cfg = dataclasses.replace(variant_config("no-shift"), n_sa=2)
    assert CAM(cfg, np.random.default_rng(0)).offsets(8, 8) == (0, 0)
