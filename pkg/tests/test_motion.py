import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hstrnet.config import ModelConfig
from hstrnet.motion import MotionBlock, MotionEstimator, estimate_flow, warp
from hstrnet.selftest import flow_gradient_error


def ramp(h=16, w=64):
    return (torch.arange(w, dtype=torch.float32) / w).expand(1, 3, h, w).contiguous()


def const_flow(dx, dy, h, w):
    return torch.tensor([dx, dy], dtype=torch.float32).view(1, 2, 1, 1).expand(1, 2, h, w)


def test_warp_zero_flow_is_bitwise_identity():
    x = torch.rand(2, 5, 24, 40)
    assert torch.equal(warp(x, torch.zeros(2, 2, 24, 40)), x)


def test_warp_unit_shift_on_ramp():
    r = ramp()
    out = warp(r, const_flow(1.0, 0.0, 16, 64))
    assert (out[..., :-1] - r[..., 1:]).abs().max() <= 1e-6
    # the last column clamps to the border
    assert torch.equal(out[..., -1], r[..., -1])


def test_warp_half_shift_averages_neighbours():
    r = ramp()
    out = warp(r, const_flow(0.5, 0.0, 16, 64))
    assert (out[..., :-1] - 0.5 * (r[..., :-1] + r[..., 1:])).abs().max() <= 1e-6


def test_warp_vertical_integer_shift_is_exact():
    x = torch.rand(1, 3, 20, 20)
    out = warp(x, const_flow(0.0, -2.0, 20, 20))
    assert torch.equal(out[:, :, 2:], x[:, :, :-2])


def test_warp_rejects_bad_flow():
    with pytest.raises(ValueError):
        warp(torch.rand(1, 3, 8, 8), torch.zeros(1, 2, 8, 9))
    with pytest.raises(ValueError):
        warp(torch.rand(1, 3, 8, 8), torch.zeros(1, 4, 8, 8))


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2 ** 16))
def test_warp_is_linear_in_source(a, b, seed):
    g = torch.Generator().manual_seed(seed)
    x, y = torch.rand(1, 3, 12, 12, generator=g), torch.rand(1, 3, 12, 12, generator=g)
    f = 4 * torch.rand(1, 2, 12, 12, generator=g) - 2
    lhs = warp(a * x + b * y, f)
    rhs = a * warp(x, f) + b * warp(y, f)
    assert (lhs - rhs).abs().max() <= 1e-5 * max(1.0, abs(a) + abs(b))


def test_warp_flow_gradient_32bit():
    assert flow_gradient_error(torch.float32) < 1e-2


def test_warp_flow_gradient_64bit():
    assert flow_gradient_error(torch.float64) < 1e-4


def _zeroed(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def test_motion_block_shapes_and_zero_params():
    block = MotionBlock(6, 32, 4)
    out = block(torch.rand(1, 6, 128, 128))
    assert out.shape == (1, 4, 128, 128)
    assert torch.equal(_zeroed(block)(torch.rand(1, 6, 128, 128)), torch.zeros(1, 4, 128, 128))


def test_motion_block_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        MotionBlock(6, 16, 4)(torch.rand(1, 5, 32, 32))


def test_motion_block_divisibility():
    with pytest.raises(ValueError, match="divisible"):
        MotionBlock(6, 16, 4)(torch.rand(1, 6, 24, 32))


@pytest.fixture(scope="module")
def estimator():
    torch.manual_seed(0)
    return MotionEstimator(ModelConfig()).eval()


def test_estimator_zero_params_gives_identity(estimator):
    est = _zeroed(MotionEstimator(ModelConfig()))
    lr, ref = torch.rand(1, 3, 32, 48), torch.rand(1, 3, 32, 48)
    flow, warped = estimate_flow(lr, ref, est)
    assert torch.equal(flow, torch.zeros(1, 4, 32, 48))
    assert torch.equal(warped, ref)


@pytest.mark.parametrize("hw", [(16, 16), (32, 80), (64, 48)])
def test_estimator_output_shapes(estimator, hw):
    with torch.no_grad():
        flow, warped = estimator(torch.rand(2, 3, *hw), torch.rand(2, 3, *hw))
    assert flow.shape == (2, 4, *hw) and warped.shape == (2, 3, *hw)


def test_estimator_warp_uses_forward_half(estimator):
    lr, ref = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        flow, warped = estimator(lr, ref)
    assert torch.equal(warped, warp(ref, flow[:, :2]))


def test_estimator_rejects_unpadded_and_mismatched(estimator):
    with pytest.raises(ValueError, match="divisible"):
        estimator(torch.rand(1, 3, 380, 672), torch.rand(1, 3, 380, 672))
    with pytest.raises(ValueError):
        estimator(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 48))


def test_feed_frames_widens_later_blocks():
    from hstrnet.config import MotionConfig
    est = MotionEstimator(ModelConfig(motion=MotionConfig(feed_frames=True)))
    assert est.block1.in_channels == est.block2.in_channels == 13
    assert MotionEstimator(ModelConfig()).block1.in_channels == 7
