import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tpf.gap import FusionLocationTracker, MmdReport, layerwise_gap, median_bandwidth, mmd2
from tpf.tracker import TrackerConfig


def _loop_mmd(x, y, bw, unbiased=False):
    k = lambda a, b: math.exp(-sum((p - q) ** 2 for p, q in zip(a, b)) / (2 * bw * bw))  # noqa: E731
    n, m = len(x), len(y)
    if unbiased and n == m:
        return sum(k(x[i], x[j]) + k(y[i], y[j]) - k(x[i], y[j]) - k(x[j], y[i])
                   for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    if unbiased:
        sxx = sum(k(x[i], x[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
        syy = sum(k(y[i], y[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    else:
        sxx = sum(k(a, b) for a in x for b in x) / n ** 2
        syy = sum(k(a, b) for a in y for b in y) / m ** 2
    return sxx + syy - 2 * sum(k(a, b) for a in x for b in y) / (n * m)


def test_identical_sets_and_two_point_case():
    x = np.random.default_rng(0).normal(size=(8, 3))
    assert abs(mmd2(x, x, 1.0)) <= 1e-12
    assert mmd2(np.zeros((2, 1)), np.ones((2, 1)), 1.0) == pytest.approx(2 * (1 - math.exp(-0.5)), abs=1e-15)


@pytest.mark.parametrize("kind", ["biased", "unbiased"])
def test_matches_loop_oracle(kind):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(8, 4)), rng.normal(0.5, size=(8, 4))
        bw = median_bandwidth(np.concatenate([x, y]))
        ref = _loop_mmd(x.tolist(), y.tolist(), bw, kind == "unbiased")
        assert abs(mmd2(x, y, bw, kind) - ref) <= 1e-12


def test_unbiased_on_identical_sets_is_near_zero():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(150, 3))
    assert abs(mmd2(x, x.copy(), 1.0, "unbiased")) < 1e-6


def test_unbiased_unequal_sizes_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(6, 2)), rng.normal(size=(9, 2))
    assert abs(mmd2(x, y, 0.8, "unbiased") - _loop_mmd(x.tolist(), y.tolist(), 0.8, True)) <= 1e-12


def test_errors():
    with pytest.raises(ValueError):
        mmd2(np.zeros((2, 2)), np.zeros((2, 3)), 1.0)
    with pytest.raises(ValueError):
        mmd2(np.zeros((2, 2)), np.zeros((2, 2)), 0.0)
    with pytest.raises(ValueError):
        mmd2(np.zeros((1, 2)), np.zeros((2, 2)), 1.0, "unbiased")


def test_median_bandwidth():
    assert median_bandwidth(np.array([[0.0, 0.0], [0.0, 2.0]])) == 2.0
    assert median_bandwidth(np.ones((5, 3))) == 1e-6
    z = np.random.default_rng(2).normal(size=(10, 3))
    d = sorted(float(np.linalg.norm(z[i] - z[j])) for i in range(10) for j in range(i + 1, 10))
    assert median_bandwidth(z) == pytest.approx(d[22], abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 10), st.integers(2, 10))
def test_nonnegative_symmetric_translation_invariant(seed, n, m):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, 3)), rng.normal(1.0, 2.0, size=(m, 3))
    bw = float(rng.uniform(0.3, 3))
    v = mmd2(x, y, bw)
    assert v >= 0
    assert v == mmd2(y, x, bw)
    t = rng.normal(scale=5, size=3)
    assert abs(mmd2(x + t, y + t, bw) - v) <= 1e-10


def test_report_roundtrip_bit_exact(tmp_path):
    rep = MmdReport(2, [0.1, 1 / 3, 0.0, 0.0], 0.123456789012345678, [0.7, 1e-6], "biased")
    p = rep.to_csv(tmp_path / "r.csv")
    assert MmdReport.from_csv(p) == rep


def _batches(rng, n=2, size=2):
    for _ in range(n):
        yield (rng.random((size, 3, 32, 32)), rng.random((size, 3, 32, 32)),
               rng.random((size, 3, 16, 16)), rng.random((size, 3, 16, 16)))


SMALL = TrackerConfig(search_size=32, template_size=16, dim=16, depth=2, heads=2)


@pytest.mark.parametrize("k", [0, 1, 2])
def test_layerwise_gap_conventions(k):
    model = FusionLocationTracker(SMALL, k, np.random.default_rng(0))
    rep = layerwise_gap(model, list(_batches(np.random.default_rng(1))))
    assert rep.fusion_layer == k and len(rep.layer_mmd2) == SMALL.depth
    assert all(v == 0.0 for v in rep.layer_mmd2[k:])
    assert all(v > 0 for v in rep.layer_mmd2[:k])
    assert rep.final_mmd2 >= 0
    h = model(*next(_batches(np.random.default_rng(2))))
    assert h.logits.shape == (2, SMALL.grid ** 2)


def test_fusion_layer_range():
    with pytest.raises(ValueError):
        FusionLocationTracker(SMALL, 3)
