import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scanmotion import ssm
from scanmotion import tensor as tt
from scanmotion.blocks import (
    ChannelScanBlock,
    TemporalScanBlock,
    build_scan_schedule,
)
from scanmotion.tensor import backward, tensor

from gradcheck import check_module_gradients


def clone_params(src, dst):
    src_params = dict(src.named_params())
    for name, p in dst.named_params():
        p.assign_(src_params[name].data)


# ---------------------------------------------------------------------------
# scan schedule


def test_schedule_n3():
    s = build_scan_schedule(3)
    assert s.encoder_scans == [5, 3, 1]
    assert s.decoder_scans == [1, 3, 5]


def test_schedule_n1():
    s = build_scan_schedule(1)
    assert s.encoder_scans == [1] and s.decoder_scans == [1]


def test_schedule_n5():
    assert build_scan_schedule(5).encoder_scans == [9, 7, 5, 3, 1]


def test_schedule_rejects_bad_depth():
    with pytest.raises(ValueError):
        build_scan_schedule(0)


@given(n=st.integers(1, 8))
@settings(max_examples=8, deadline=None)
def test_schedule_properties(n):
    s = build_scan_schedule(n)
    assert sum(s.encoder_scans) == n * n
    assert all(k % 2 == 1 for k in s.encoder_scans)
    assert all(
        s.encoder_scans[i] == s.decoder_scans[n - 1 - i] for i in range(n)
    )
    assert s.encoder_scans == sorted(s.encoder_scans, reverse=True)


# ---------------------------------------------------------------------------
# temporal block


def test_temporal_block_shape():
    rng = np.random.default_rng(0)
    block = TemporalScanBlock(64, scan_count=3, rng=rng)
    z = tensor(rng.standard_normal((16, 2, 64)))
    assert block(z).shape == (16, 2, 64)


def test_temporal_block_zero_init_is_identity():
    rng = np.random.default_rng(1)
    block = TemporalScanBlock(8, scan_count=1, rng=rng, zero_init_out=True)
    z = tensor(rng.standard_normal((5, 3, 8)))
    np.testing.assert_array_equal(block(z).data, z.data)


def test_temporal_block_k1_matches_composed_ops():
    """With k = 1 the block is exactly in-proj, conv+silu, one selective scan,
    gate, out-proj and residual, composed from the public primitives."""
    rng = np.random.default_rng(2)
    block = TemporalScanBlock(6, scan_count=1, rng=rng, zero_init_out=False)
    z = tensor(rng.standard_normal((7, 2, 6)))
    got = block(z).data

    unit = block.scans[0]
    xz = tt.matmul(z, block.in_proj.weight)
    x = tt.narrow(xz, -1, 0, block.inner)
    gate = tt.narrow(xz, -1, block.inner, 2 * block.inner)
    xc = tt.silu(tt.add(tt.conv1d_depthwise(x, unit.conv_kernel), unit.conv_bias))
    bc = tt.matmul(xc, unit.bc_proj.weight)
    b_t = tt.narrow(bc, -1, 0, unit.state_dim)
    c_t = tt.narrow(bc, -1, unit.state_dim, 2 * unit.state_dim)
    delta = tt.softplus(
        tt.add(
            tt.matmul(tt.matmul(xc, unit.dt_down.weight), unit.dt_up.weight),
            unit.dt_bias,
        )
    )
    y = ssm.selective_scan(
        unit._sys, ssm.SelectiveParams(b_t=b_t, c_t=c_t, delta=delta), xc
    )
    expected = tt.add(z, tt.matmul(tt.mul(y, tt.silu(gate)), block.out_proj.weight))
    np.testing.assert_allclose(got, expected.data, rtol=1e-12, atol=1e-14)


def test_temporal_block_has_k_independent_state_sets():
    rng = np.random.default_rng(3)
    block = TemporalScanBlock(4, scan_count=5, rng=rng, state_dim=3)
    assert len(block.scans) == 5
    assert len({id(u.a) for u in block.scans}) == 5
    for unit in block.scans:
        assert unit.a.shape == (4, 3)


def test_temporal_block_channel_mismatch():
    rng = np.random.default_rng(4)
    block = TemporalScanBlock(4, scan_count=1, rng=rng)
    with pytest.raises(tt.ShapeError):
        block(tensor(np.zeros((3, 2, 5))))


@settings(max_examples=10, deadline=None)
@given(
    t=st.integers(1, 6), b=st.integers(1, 3), c=st.integers(1, 6),
    k=st.sampled_from([1, 3]), seed=st.integers(0, 2**31 - 1),
)
def test_temporal_block_shape_preserving(t, b, c, k, seed):
    rng = np.random.default_rng(seed)
    block = TemporalScanBlock(c, scan_count=k, rng=rng, state_dim=2)
    z = tensor(rng.standard_normal((t, b, c)))
    assert block(z).shape == (t, b, c)


def test_temporal_block_gradient_liveness():
    rng = np.random.default_rng(5)
    block = TemporalScanBlock(5, scan_count=3, rng=rng, zero_init_out=False)
    z = tensor(rng.standard_normal((6, 2, 5)), requires_grad=True)
    w = tensor(rng.standard_normal((6, 2, 5)))
    backward(tt.tsum(tt.mul(block(z), w)))
    for name, p in block.named_params():
        assert p.grad is not None and np.abs(p.grad).max() > 0, f"dead branch: {name}"
    assert np.abs(z.grad).max() > 0


def test_temporal_block_finite_difference_gradients():
    rng = np.random.default_rng(6)
    block = TemporalScanBlock(
        3, scan_count=3, rng=rng, state_dim=2, conv_width=2, zero_init_out=False
    )
    z = rng.standard_normal((3, 2, 3))
    w = rng.standard_normal((3, 2, 3))

    def loss_tensor():
        return tt.tsum(tt.mul(block(tensor(z)), tensor(w)))

    backward(loss_tensor())

    def loss_value():
        with tt.no_grad():
            return loss_tensor().item()

    check_module_gradients(list(block.named_params()), loss_value)


# ---------------------------------------------------------------------------
# channel block


def test_channel_block_shape():
    rng = np.random.default_rng(7)
    block = ChannelScanBlock(64, tokens=16, rng=rng)
    z = tensor(rng.standard_normal((16, 2, 64)))
    assert block(z).shape == (16, 2, 64)


def test_channel_block_zero_init_is_identity():
    rng = np.random.default_rng(8)
    block = ChannelScanBlock(10, tokens=4, rng=rng, zero_init_out=True)
    z = tensor(rng.standard_normal((4, 3, 10)))
    np.testing.assert_array_equal(block(z).data, z.data)


def test_channel_block_single_channel_tied_branches():
    rng = np.random.default_rng(9)
    block = ChannelScanBlock(1, tokens=4, rng=rng)
    clone_src = dict(block.fwd.named_params())
    for name, p in block.bwd.named_params():
        p.assign_(clone_src[name].data)
    z = tensor(rng.standard_normal((4, 2, 1)))
    r = tt.transpose(z, (2, 1, 0))
    x, _ = (
        tt.narrow(tt.matmul(tt.layernorm(r, block.norm.gain, block.norm.bias),
                            block.in_proj.weight), -1, 0, block.inner),
        None,
    )
    y_f = block.fwd(x)
    y_b = tt.flip(block.bwd(tt.flip(x, axis=0)), axis=0)
    np.testing.assert_array_equal(y_f.data, y_b.data)


def test_channel_block_reversal_equivariance():
    rng = np.random.default_rng(10)
    base = ChannelScanBlock(12, tokens=3, rng=rng, zero_init_out=False)
    swapped = ChannelScanBlock(12, tokens=3, rng=np.random.default_rng(10),
                               zero_init_out=False)
    clone_params(base, swapped)
    clone_params(base.fwd, swapped.bwd)
    clone_params(base.bwd, swapped.fwd)
    z = rng.standard_normal((3, 2, 12))
    out = base(tensor(z)).data
    out_swapped = swapped(tensor(z[:, :, ::-1].copy())).data
    np.testing.assert_allclose(out_swapped, out[:, :, ::-1], atol=1e-10, rtol=0)


def test_channel_block_gradient_liveness():
    rng = np.random.default_rng(11)
    block = ChannelScanBlock(6, tokens=3, rng=rng, zero_init_out=False)
    z = tensor(rng.standard_normal((3, 2, 6)), requires_grad=True)
    w = tensor(rng.standard_normal((3, 2, 6)))
    backward(tt.tsum(tt.mul(block(z), w)))
    for name, p in block.named_params():
        assert p.grad is not None and np.abs(p.grad).max() > 0, f"dead branch: {name}"


def test_channel_block_finite_difference_gradients():
    rng = np.random.default_rng(12)
    block = ChannelScanBlock(
        4, tokens=2, rng=rng, expand=2, state_dim=2, conv_width=2,
        zero_init_out=False,
    )
    z = rng.standard_normal((2, 2, 4))
    w = rng.standard_normal((2, 2, 4))

    def loss_tensor():
        return tt.tsum(tt.mul(block(tensor(z)), tensor(w)))

    backward(loss_tensor())

    def loss_value():
        with tt.no_grad():
            return loss_tensor().item()

    check_module_gradients(list(block.named_params()), loss_value)


def test_scan_instrumentation_counts_block_scans():
    rng = np.random.default_rng(13)
    t_block = TemporalScanBlock(4, scan_count=3, rng=rng, name="t")
    c_block = ChannelScanBlock(4, tokens=5, rng=rng, name="c")
    z = tensor(rng.standard_normal((5, 2, 4)))
    with ssm.record_scan_calls() as rec:
        c_block(t_block(z))
    assert rec == ["t", "t", "t", "c", "c"]
