import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tpf.autograd import AdamW, ShapeError, Tensor, check_gradients_multi, ops
from tpf.experts import average_expert
from tpf.pfa import PFA, FusedImage, PfaConfig, channel_swap, flop_count, fuse, param_count

SMALL = PfaConfig(d_state=4)


def test_reference_config_budget():
    cfg = PfaConfig()
    assert cfg.stage_dims == (8, 8, 16)
    n = param_count(cfg)
    assert 10_000 <= n <= 20_000
    assert n == 10_236  # frozen: non-tied dim-8 blocks, d_state 8
    f = flop_count(cfg, 256, 256)
    assert 0.14e9 <= f <= 0.57e9


def test_counts_vs_resolution():
    cfg = PfaConfig()
    assert param_count(cfg) == PFA(cfg).num_parameters()
    assert flop_count(cfg, 128, 128) * 4 == flop_count(cfg, 256, 256)
    assert flop_count(cfg, 64, 128) * 2 == flop_count(cfg, 128, 128)


def test_swap_has_no_parameters():
    names = [n for n, _ in PFA(SMALL).named_parameters()]
    assert not any("swap" in n for n in names)


@pytest.mark.parametrize("side", [32, 64, 256])
def test_fuse_keeps_spatial_shape(side):
    rng = np.random.default_rng(side)
    rgb, tir = rng.random((3, side, side)), rng.random((3, side, side))
    out = fuse(rgb, tir, PFA(SMALL))
    assert isinstance(out, FusedImage) and out.provenance == "pfa"
    assert out.shape == (3, side, side)
    assert np.all((out.data > 0) & (out.data < 1))


def test_fuse_is_deterministic_and_batched():
    rng = np.random.default_rng(0)
    rgb, tir = rng.random((2, 3, 16, 16)), rng.random((2, 3, 16, 16))
    m = PFA(SMALL, np.random.default_rng(1))
    a, b = m(rgb, tir).data, m(rgb, tir).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(fuse(rgb[1], tir[1], m).data, a[1], atol=1e-12)


def test_shape_and_input_errors():
    m = PFA(SMALL)
    with pytest.raises(ShapeError):
        m(np.zeros((3, 16, 16)), np.zeros((3, 16, 8)))
    with pytest.raises(ShapeError):
        m(np.zeros((3, 15, 15)), np.zeros((3, 15, 15)))
    bad = np.zeros((1, 3, 8, 8))
    bad[0, 0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        m.low_level_extract(Tensor(bad), "rgb")
    with pytest.raises(ValueError):
        m.low_level_extract(Tensor(np.zeros((1, 3, 8, 8))), "depth")


def test_extract_token_count_and_zero_image():
    m = PFA(SMALL)
    toks = m.low_level_extract(Tensor(np.random.default_rng(0).random((1, 3, 16, 12))), "tir")
    assert toks.shape == (1, 8 * 6, 8)
    m.extract_rgb.bias.data[:] = 0
    z = m.low_level_extract(Tensor(np.zeros((1, 3, 8, 8))), "rgb")
    assert np.all(z.data == 0)


def test_extract_gradient():
    m = PFA(SMALL, np.random.default_rng(2))
    x = Tensor(np.random.default_rng(3).random((1, 3, 8, 8)), requires_grad=True)
    w = np.random.default_rng(4).normal(size=(1, 16, 8))
    f = lambda ts: ops.sum(ops.mul(m.low_level_extract(ts[0], "rgb"), w))  # noqa: E731
    assert check_gradients_multi(f, [x, m.extract_rgb.weight]) < 1e-4


def test_end_to_end_gradient_at_16():
    m = PFA(SMALL, np.random.default_rng(5))
    rng = np.random.default_rng(6)
    rgb = Tensor(rng.random((1, 3, 16, 16)), requires_grad=True)
    tir = Tensor(rng.random((1, 3, 16, 16)), requires_grad=True)
    w = rng.normal(size=(1, 3, 16, 16))
    params = [rgb, tir, m.decode.weight, m.block_channels.fwd.A_log, m.extract_tir.weight]
    f = lambda ts: ops.sum(ops.mul(m(rgb, tir), w))  # noqa: E731
    assert check_gradients_multi(f, params, max_coords=15, rng=rng) < 1e-4


def test_streams_are_not_weight_tied():
    m = PFA(SMALL, np.random.default_rng(0))
    assert m.extract_rgb.weight is not m.extract_tir.weight
    assert m.block_rgb.in_proj.weight is not m.block_tir.in_proj.weight
    rng = np.random.default_rng(1)
    a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    assert not np.allclose(fuse(a, b, m).data, fuse(b, a, m).data)


def test_channel_swap_examples():
    a, b = Tensor(np.ones((2, 8))), Tensor(np.zeros((2, 8)))
    a2, b2 = channel_swap(a, b)
    np.testing.assert_array_equal(a2.data[0], [0, 0, 0, 0, 1, 1, 1, 1])
    np.testing.assert_array_equal(b2.data[0], [1, 1, 1, 1, 0, 0, 0, 0])
    same = Tensor(np.arange(8.0)[None])
    x, y = channel_swap(same, same)
    np.testing.assert_array_equal(x.data, same.data)
    np.testing.assert_array_equal(y.data, same.data)
    with pytest.raises(ValueError):
        channel_swap(Tensor(np.zeros((1, 7))), Tensor(np.zeros((1, 7))))
    with pytest.raises(ShapeError):
        channel_swap(Tensor(np.zeros((1, 8))), Tensor(np.zeros((2, 8))))


@pytest.mark.parametrize("pattern", ["first_half", "even"])
def test_channel_swap_is_involution(pattern):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a, b = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(3, 8)))
        a2, b2 = channel_swap(*channel_swap(a, b, pattern), pattern)
        np.testing.assert_array_equal(a2.data, a.data)
        np.testing.assert_array_equal(b2.data, b.data)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_channel_swap_preserves_multiset(half, seed):
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.normal(size=(2, 2 * half))), Tensor(rng.normal(size=(2, 2 * half)))
    a2, b2 = channel_swap(a, b)
    np.testing.assert_array_equal(np.sort(np.concatenate([a2.data, b2.data], 1)),
                                  np.sort(np.concatenate([a.data, b.data], 1)))


def test_distilled_on_constants_reproduces_the_constant():
    m = PFA(SMALL, np.random.default_rng(0))
    opt = AdamW(m.parameters(), lr=1e-2)
    rng = np.random.default_rng(1)
    for _ in range(150):
        c = rng.uniform(0.1, 0.9, size=(4, 1, 1, 1))
        img = np.broadcast_to(c, (4, 3, 8, 8)).copy()
        target = average_expert(img, img).data
        opt.zero_grad()
        loss = ops.mean_sq_err(m(img, img), target)
        loss.backward()
        opt.step()
    for c in (0.2, 0.5, 0.8):
        img = np.full((3, 8, 8), c)
        assert np.max(np.abs(fuse(img, img, m).data - c)) < 0.05
