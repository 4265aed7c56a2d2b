import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from xfuse import metrics
from xfuse.core import ShapeError

unit = st.floats(0, 1, allow_nan=False)


def q(img):
    return [[int(round(v * 255)) for v in row] for row in np.asarray(img)]


def loop_entropy(img):
    c = Counter(v for row in q(img) for v in row)
    n = sum(c.values())
    return -sum(k / n * math.log2(k / n) for k in c.values())


def loop_std(img):
    vals = [v for row in q(img) for v in row]
    m = sum(vals) / len(vals)
    return math.sqrt(sum((v - m) ** 2 for v in vals) / len(vals))


def loop_mi_pair(x, y):
    """(MI, joint entropy) from label grids via explicit counting."""
    pairs = Counter()
    for rx, ry in zip(x, y):
        for a, b in zip(rx, ry):
            pairs[(a, b)] += 1
    n = sum(pairs.values())
    px, py = Counter(), Counter()
    for (a, b), k in pairs.items():
        px[a] += k
        py[b] += k
    mi = sum(k / n * math.log2((k / n) / ((px[a] / n) * (py[b] / n))) for (a, b), k in pairs.items())
    hj = -sum(k / n * math.log2(k / n) for k in pairs.values())
    return mi, hj


def loop_mi(f, a, b):
    return loop_mi_pair(q(f), q(a))[0] + loop_mi_pair(q(f), q(b))[0]


def loop_nmi(x, y):
    mi, hj = loop_mi_pair(x, y)
    return 1.0 if hj == 0 else mi / hj


def loop_fmi_pixel(f, a, b):
    return 0.5 * (loop_nmi(q(f), q(a)) + loop_nmi(q(f), q(b)))


def loop_corr(x, y):
    xs, ys = np.asarray(x).ravel().tolist(), np.asarray(y).ravel().tolist()
    mx, my = sum(xs) / len(xs), sum(ys) / len(ys)
    sxy = sum((u - mx) * (v - my) for u, v in zip(xs, ys))
    sxx = sum((u - mx) ** 2 for u in xs)
    syy = sum((v - my) ** 2 for v in ys)
    return 0.0 if sxx * syy == 0 else sxy / math.sqrt(sxx * syy)


def loop_scd(f, a, b):
    return loop_corr(f - b, a) + loop_corr(f - a, b)


# ---------------------------------------------------------------------------
# EN / SD


def test_entropy_examples():
    assert metrics.entropy(np.full((8, 8), 0.4)) == 0.0
    uniform = (np.arange(256) / 255.0).reshape(16, 16)
    assert metrics.entropy(uniform) == pytest.approx(8.0, abs=1e-12)
    coin = np.zeros((8, 8))
    coin[:4] = 1.0
    assert metrics.entropy(coin) == pytest.approx(1.0, abs=1e-12)


def test_std_examples():
    assert metrics.std_dev(np.full((4, 4), 0.9)) == 0.0
    half = np.zeros((8, 8))
    half[:, :4] = 1.0
    assert metrics.std_dev(half) == pytest.approx(127.5, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("size", [8, 16])
def test_en_sd_against_loops(seed, size):
    img = np.random.default_rng(seed).random((size, size))
    assert metrics.entropy(img) == pytest.approx(loop_entropy(img), abs=1e-12)
    assert metrics.std_dev(img) == pytest.approx(loop_std(img), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (8, 8), elements=unit), st.integers(0, 2 ** 31))
def test_en_sd_permutation_invariant(img, seed):
    perm = np.random.default_rng(seed).permutation(img.ravel()).reshape(img.shape)
    assert metrics.entropy(perm) == pytest.approx(metrics.entropy(img), abs=1e-12)
    assert metrics.std_dev(perm) == pytest.approx(metrics.std_dev(img), abs=1e-9)


# ---------------------------------------------------------------------------
# MI


def independent_tiles(n=16):
    i, j = np.indices((n, n))
    f = (i % 4) / 3.0
    a = (j % 4) / 3.0
    b = ((i // 4) % 2).astype(float)
    return f, a, b


def test_mi_identical_is_twice_entropy(rng):
    f = rng.random((16, 16))
    assert metrics.mutual_info(f, f, f) == pytest.approx(2 * metrics.entropy(f), abs=1e-12)


def test_mi_independent_near_zero():
    f, a, b = independent_tiles()
    assert abs(metrics.mutual_info(f, a, b)) < 0.05


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("size", [8, 16])
def test_mi_against_loop(seed, size):
    f, a, b = np.random.default_rng(100 + seed).random((3, size, size))
    assert metrics.mutual_info(f, a, b) == pytest.approx(loop_mi(f, a, b), abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 8, 8), elements=unit))
def test_mi_source_order(x):
    f, a, b = x
    assert metrics.mutual_info(f, a, b) == metrics.mutual_info(f, b, a)


def test_mi_shape_mismatch():
    with pytest.raises(ShapeError):
        metrics.mutual_info(np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((8, 4)))


# ---------------------------------------------------------------------------
# FMI


@pytest.mark.parametrize("feature", ["pixel", "dct"])
def test_fmi_identical_is_one(rng, feature):
    f = rng.random((16, 16))
    assert metrics.fmi(f, f, f, feature) == pytest.approx(1.0, abs=1e-12)


def test_fmi_independent_near_zero():
    f, a, b = independent_tiles()
    assert metrics.fmi(f, a, b, "pixel") < 0.1


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("size", [8, 16])
def test_fmi_pixel_against_loop(seed, size):
    f, a, b = np.random.default_rng(200 + seed).random((3, size, size))
    assert metrics.fmi(f, a, b, "pixel") == pytest.approx(loop_fmi_pixel(f, a, b), abs=1e-9)


def test_fmi_windowed_is_mean_of_windows(rng):
    f, a, b = rng.random((3, 16, 16))
    parts = [loop_fmi_pixel(f[i:i + 8, j:j + 8], a[i:i + 8, j:j + 8], b[i:i + 8, j:j + 8])
             for i in (0, 8) for j in (0, 8)]
    assert metrics.fmi(f, a, b, "pixel", window=8) == pytest.approx(np.mean(parts), abs=1e-9)


def test_dct_features_oracle(rng):
    img = rng.random((8, 16))
    feats = metrics.dct_features(img)
    # direct orthonormal DCT-II of the second block
    blk = img[:, 8:]
    N = 8
    c = [math.sqrt(1 / N)] + [math.sqrt(2 / N)] * (N - 1)
    for u, v in [(0, 0), (1, 3), (7, 7)]:
        s = sum(blk[x, y] * math.cos((2 * x + 1) * u * math.pi / (2 * N)) * math.cos((2 * y + 1) * v * math.pi / (2 * N))
                for x in range(N) for y in range(N))
        want = int(round(min(abs(c[u] * c[v] * s) / 8, 1.0) * 255))
        assert feats[u, 8 + v] == want


def test_fmi_dct_needs_block_multiples():
    with pytest.raises(ShapeError):
        metrics.fmi(np.zeros((12, 12)), np.zeros((12, 12)), np.zeros((12, 12)), "dct")


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (3, 16, 16), elements=unit), st.sampled_from(["pixel", "dct"]))
def test_fmi_in_unit_interval(x, feature):
    v = metrics.fmi(*x, feature)
    assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------------------
# SCD


def test_scd_sum_of_sources(rng):
    a = rng.normal(size=(32, 32))
    b = rng.normal(size=(32, 32))
    a -= a.mean()
    b -= b.mean()
    assert metrics.scd(a + b, a, b) == pytest.approx(2.0, abs=0.05)


def test_scd_constant_fused():
    # with uncorrelated sources both terms vanish; all-constant inputs hit the zero-variance guard
    i, j = np.indices((8, 8))
    a = ((i % 2) * 2 - 1).astype(float) * 0.25 + 0.5
    b = ((j % 2) * 2 - 1).astype(float) * 0.25 + 0.5
    assert metrics.scd(np.full((8, 8), 0.5), a, b) == pytest.approx(0.0, abs=1e-12)
    c = np.full((8, 8), 0.3)
    assert metrics.scd(c, c, c) == 0.0


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("size", [8, 16])
def test_scd_against_loop(seed, size):
    f, a, b = np.random.default_rng(300 + seed).random((3, size, size))
    assert metrics.scd(f, a, b) == pytest.approx(loop_scd(f, a, b), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 8, 8), elements=unit))
def test_scd_bounded(x):
    assert -2 - 1e-12 <= metrics.scd(*x) <= 2 + 1e-12


# ---------------------------------------------------------------------------
# reports


def test_report_mean_and_csv(tmp_path, rng):
    rows = [metrics.evaluate_pair(f"p{i}", *rng.random((3, 16, 16))) for i in range(3)]
    report = metrics.MetricReport(rows)
    mean = report.mean()
    for m in metrics.METRIC_NAMES:
        assert getattr(mean, m) == pytest.approx(sum(getattr(r, m) for r in rows) / 3, abs=1e-12)
    path = tmp_path / "r.csv"
    report.write_csv(path, "ours")
    back = metrics.read_report(path)
    assert [r["method"] for r in back] == ["p0", "p1", "p2", "ours"]
    assert back[1]["EN"] == rows[1].EN  # repr round-trips floats exactly
