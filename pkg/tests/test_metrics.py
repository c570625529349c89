import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tpf.metrics import box_iou, center_error, compute_metrics, precision_rate


def _oracle(pred, gt, thr=20.0):
    cle, iou = [], []
    for p, g in zip(pred, gt):
        cle.append(math.hypot(p[0] + p[2] / 2 - g[0] - g[2] / 2, p[1] + p[3] / 2 - g[1] - g[3] / 2))
        ix = max(0.0, min(p[0] + p[2], g[0] + g[2]) - max(p[0], g[0]))
        iy = max(0.0, min(p[1] + p[3], g[1] + g[3]) - max(p[1], g[1]))
        u = p[2] * p[3] + g[2] * g[3] - ix * iy
        iou.append(ix * iy / u)
    pr = sum(c < thr for c in cle) / len(cle)
    ts = [i / 100 for i in range(51)]
    npr = sum(sum(c / math.sqrt(g[2] * g[3]) <= t for c, g in zip(cle, gt)) / len(gt) for t in ts) / len(ts)
    ts = [i / 20 for i in range(21)]
    sr = sum(sum(v >= t for v in iou) / len(iou) for t in ts) / len(ts)
    return pr, npr, sr, cle, iou


def _trace(seed, n=50):
    rng = np.random.default_rng(seed)
    gt = np.column_stack([rng.uniform(0, 100, (n, 2)), rng.uniform(5, 30, (n, 2))])
    pred = gt + rng.normal(scale=8, size=(n, 4))
    pred[:, 2:] = np.abs(pred[:, 2:]) + 1
    return pred, gt


def test_metrics_match_loop_oracle():
    for seed in range(20):
        pred, gt = _trace(seed)
        r = compute_metrics(pred, gt)
        pr, npr, sr, cle, iou = _oracle(pred.tolist(), gt.tolist())
        assert abs(r.pr - pr) <= 1e-12 and abs(r.npr - npr) <= 1e-12 and abs(r.sr - sr) <= 1e-12
        np.testing.assert_allclose(r.cle, cle, atol=1e-12)
        np.testing.assert_allclose(r.iou, iou, atol=1e-12)
        assert r.sr == pytest.approx(r.success_curve.mean(), abs=0)
        assert len(r.iou) == len(r.cle) == 50


def test_precision_example_and_perfect_tracking():
    assert precision_rate(np.array([0, 10, 25, 30]), 20) == 0.5
    assert precision_rate(np.array([20.0]), 20) == 0.0
    _, gt = _trace(0)
    r = compute_metrics(gt, gt)
    assert r.pr == r.npr == r.sr == 1.0


def test_iou_identity_and_disjoint():
    b = np.array([[10, 10, 5, 5]])
    assert box_iou(b, b)[0] == 1.0
    assert box_iou(b, b + [20, 0, 0, 0])[0] == 0.0
    assert center_error(b, b + [3, 4, 0, 0])[0] == 5.0


def test_length_mismatch():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((3, 4)) + 1, np.zeros((4, 4)) + 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 50), st.floats(0, 50))
def test_precision_is_monotone_in_threshold(seed, a, b):
    pred, gt = _trace(seed)
    lo, hi = sorted((a, b))
    assert compute_metrics(pred, gt, cle_threshold=lo).pr <= compute_metrics(pred, gt, cle_threshold=hi).pr
    r = compute_metrics(pred, gt)
    assert compute_metrics(pred, gt, cle_threshold=5).pr <= r.pr
    assert 0 <= r.sr <= 1 and 0 <= r.npr <= 1


def test_to_dict_keys():
    pred, gt = _trace(1)
    d = compute_metrics(pred, gt).to_dict()
    assert set(d) == {"pr", "npr", "sr", "mean_iou", "frames"} and d["frames"] == 50
    assert math.isnan(compute_metrics(pred, gt, norm=False).npr)
