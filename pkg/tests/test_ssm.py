import time

import numpy as np
import pytest

from tpf.autograd import ShapeError, Tensor, check_gradients_multi, ops
from tpf.ssm import VimBlock, VimBlockConfig, block_flops, causal_conv1d, selective_scan


def recurrence_oracle(u, delta, A, B, C):
    """Plain per-step ZOH recurrence, one state vector at a time."""
    nb, L, D = u.shape
    N = A.shape[1]
    y = np.zeros((nb, L, D))
    for b in range(nb):
        for d in range(D):
            h = np.zeros(N)
            for t in range(L):
                abar = np.exp(delta[b, t, d] * A[d])
                bbar = (abar - 1.0) / A[d] * B[b, t]
                h = abar * h + bbar * u[b, t, d]
                y[b, t, d] = float(C[b, t] @ h)
    return y


def _inputs(rng, nb, L, D, N):
    u = rng.normal(size=(nb, L, D))
    delta = np.log1p(np.exp(rng.normal(size=(nb, L, D))))
    A = -np.exp(rng.normal(size=(D, N)))
    return u, delta, A, rng.normal(size=(nb, L, N)), rng.normal(size=(nb, L, N))


def _scan(*arrs):
    return selective_scan(*(Tensor(a) for a in arrs)).data


def test_scan_matches_recurrence_all_lengths_up_to_32():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for L in range(1, 33):
            args = _inputs(rng, 2, L, 3, 4)
            np.testing.assert_allclose(_scan(*args), recurrence_oracle(*args), atol=1e-10, rtol=0)


def test_single_step_has_no_history():
    rng = np.random.default_rng(1)
    u, delta, A, B, C = _inputs(rng, 1, 1, 2, 3)
    abar = np.exp(delta[0, 0][:, None] * A)
    h = (abar - 1) / A * B[0, 0] * u[0, 0][:, None]
    np.testing.assert_allclose(_scan(u, delta, A, B, C)[0, 0], h @ C[0, 0], atol=1e-14)


def test_zero_input_gives_zero_output():
    rng = np.random.default_rng(2)
    u, delta, A, B, C = _inputs(rng, 2, 16, 3, 4)
    assert np.all(_scan(np.zeros_like(u), delta, A, B, C) == 0.0)


def test_unbatched_inputs_accepted():
    rng = np.random.default_rng(3)
    u, delta, A, B, C = _inputs(rng, 1, 5, 2, 3)
    out = _scan(u[0], delta[0], A, B[0], C[0])
    np.testing.assert_allclose(out, _scan(u, delta, A, B, C)[0], atol=0)


def test_scan_rejects_bad_parameters():
    rng = np.random.default_rng(4)
    u, delta, A, B, C = _inputs(rng, 1, 4, 2, 3)
    bad = delta.copy()
    bad[0, 1, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        _scan(u, bad, A, B, C)
    with pytest.raises(ValueError, match="negative"):
        _scan(u, delta, -A, B, C)
    with pytest.raises(ShapeError):
        _scan(u, delta, A[:, :2], B, C)


def test_scan_gradient_all_inputs():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        arrs = _inputs(rng, 2, 7, 3, 4)
        ts = [Tensor(a, requires_grad=True) for a in arrs]
        w = rng.normal(size=(2, 7, 3))
        err = check_gradients_multi(lambda xs: ops.sum(ops.mul(selective_scan(*xs), w)), ts)
        assert err < 1e-4


def test_causal_conv_is_causal_and_differentiable():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 6, 2))
    w, b = rng.normal(size=(2, 3)), rng.normal(size=2)
    out = causal_conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    x2 = x.copy()
    x2[0, 4:] += 10.0
    out2 = causal_conv1d(Tensor(x2), Tensor(w), Tensor(b)).data
    np.testing.assert_array_equal(out[0, :4], out2[0, :4])
    ts = [Tensor(a, requires_grad=True) for a in (x, w, b)]
    assert check_gradients_multi(lambda xs: ops.sum(ops.square(causal_conv1d(*xs))), ts) < 1e-4


@pytest.mark.parametrize("L", [1, 4, 64])
def test_block_preserves_shape(L):
    blk = VimBlock(VimBlockConfig(d_model=8), np.random.default_rng(0))
    x = Tensor(np.random.default_rng(L).normal(size=(2, L, 8)))
    assert blk(x).shape == (2, L, 8)
    assert blk(Tensor(x.data[0])).shape == (L, 8)


def test_zeroed_projections_are_pure_residual():
    blk = VimBlock(VimBlockConfig(d_model=8), np.random.default_rng(0))
    blk.in_proj.weight.data[:] = 0
    blk.out_proj.weight.data[:] = 0
    x = np.random.default_rng(1).normal(size=(1, 5, 8))
    np.testing.assert_array_equal(blk(Tensor(x)).data, x)


def test_reversal_symmetry_swaps_directions():
    blk = VimBlock(VimBlockConfig(d_model=8), np.random.default_rng(3))
    x = np.random.default_rng(4).normal(size=(2, 9, 8))
    lhs = blk(Tensor(x[:, ::-1].copy())).data[:, ::-1]
    rhs = blk.swapped()(Tensor(x)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_width_mismatch_rejected():
    blk = VimBlock(VimBlockConfig(d_model=8), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        blk(Tensor(np.zeros((1, 4, 16))))


def test_block_gradient_through_both_directions():
    cfg = VimBlockConfig(d_model=8, d_state=4)
    blk = VimBlock(cfg, np.random.default_rng(7))
    x = Tensor(np.random.default_rng(8).normal(size=(1, 6, 8)), requires_grad=True)
    params = [x, blk.fwd.A_log, blk.bwd.A_log, blk.fwd.dt_proj.weight, blk.bwd.x_proj.weight, blk.in_proj.weight]
    rng = np.random.default_rng(0)
    w = rng.normal(size=(1, 6, 8))

    def f(_):
        return ops.sum(ops.mul(blk(x), w))
    assert check_gradients_multi(f, params, max_coords=12, rng=rng) < 1e-4
    for p in (blk.fwd.A_log, blk.bwd.A_log):
        assert np.any(p.grad != 0)


def test_a_log_keeps_a_negative():
    blk = VimBlock(VimBlockConfig(d_model=16), np.random.default_rng(0))
    assert np.all(np.exp(blk.fwd.A_log.data) > 0)
    assert blk.fwd.A_log.shape == (32, 8)


def test_block_flops_scale_linearly():
    cfg = VimBlockConfig(d_model=8)
    assert block_flops(cfg, 200) == 2 * block_flops(cfg, 100)


def _median_time(fn, reps=5):
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def test_scan_runtime_is_linear_in_length():
    rng = np.random.default_rng(0)
    a2, a4 = _inputs(rng, 1, 2048, 16, 8), _inputs(rng, 1, 4096, 16, 8)
    _scan(*a2), _scan(*a4)  # compile / warm caches
    t2 = _median_time(lambda: _scan(*a2))
    t4 = _median_time(lambda: _scan(*a4))
    assert t4 <= 2.5 * t2
