import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from poseattn.gradcheck import grad_check
from poseattn.layers import ShapeError
from poseattn.pagn import PAGN, PAGNBlock, PagnState, adain


def adain_oracle(style, content, eps=1e-5):
    s = style.reshape(*style.shape[:2], -1).astype(np.float64)
    c = content.reshape(*content.shape[:2], -1).astype(np.float64)
    out = s.std(-1, keepdims=True) * (c - c.mean(-1, keepdims=True)) / np.sqrt(np.maximum(c.var(-1, keepdims=True), eps)) \
        + s.mean(-1, keepdims=True)
    return out.reshape(content.shape)


def test_adain_matches_oracle(rng):
    style = rng.normal(2, 3, (2, 5, 6, 4))
    content = rng.normal(-1, 0.5, (2, 5, 6, 4))
    got = adain(torch.from_numpy(style), torch.from_numpy(content)).numpy()
    assert np.allclose(got, adain_oracle(style, content), atol=1e-10)


def test_adain_self_identity(rng):
    x = torch.from_numpy(rng.normal(1, 2, (1, 3, 8, 8)))
    assert torch.allclose(adain(x, x), x, atol=1e-8)


def test_adain_moment_example(rng):
    content = rng.standard_normal((1, 1, 16, 16))
    content = (content - content.mean()) / content.std()
    style = rng.standard_normal((1, 1, 16, 16))
    style = (style - style.mean()) / style.std() * 3 + 2
    out = adain(torch.from_numpy(style), torch.from_numpy(content))
    assert out.mean().item() == pytest.approx(2, abs=1e-5)
    assert out.std(unbiased=False).item() == pytest.approx(3, abs=1e-5)


def test_adain_constant_content():
    style = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    style = style - style.mean() + 2
    out = adain(style, torch.full((1, 1, 8, 8), 5.0, dtype=torch.float64))
    assert torch.allclose(out, torch.full_like(out, 2.0), atol=1e-12)


def test_adain_channel_mismatch():
    with pytest.raises(ShapeError):
        adain(torch.randn(1, 3, 4, 4), torch.randn(1, 4, 4, 4))


@given(st.integers(0, 10 ** 6))
def test_adain_moments_property(seed):
    g = np.random.default_rng(seed)
    style = g.normal(g.normal(0, 3), g.uniform(0.1, 4), (2, 3, 8, 8))
    content = g.normal(g.normal(0, 3), g.uniform(0.05, 4), (2, 3, 8, 8))
    out = adain(torch.from_numpy(style), torch.from_numpy(content)).numpy()
    assert np.allclose(out.mean((2, 3)), style.mean((2, 3)), atol=1e-5)
    assert np.allclose(out.std((2, 3)), style.std((2, 3)), atol=1e-5)


def _state(c=4, h=8, w=8):
    return PagnState(torch.randn(2, c, h, w), torch.randn(2, c, h, w), [])


def test_eq4_identity():
    block = PAGNBlock(4)
    st0, p_t, f_app = _state(), torch.randn(2, 4, 8, 8), torch.randn(2, 4, 8, 8)
    a = block.style(torch.cat([st0.f_g, p_t], 1))
    x = adain(a, block.content(f_app))
    out = block(st0, p_t, f_app)
    assert torch.allclose(out.f_g - x, a, atol=1e-6)


def test_zero_attention_conv_gives_half_mask():
    block = PAGNBlock(4)
    with torch.no_grad():
        block.attention[0].weight.zero_()
    out = block(_state(), torch.randn(2, 4, 8, 8), torch.randn(2, 4, 8, 8))
    assert torch.equal(out.masks[0], torch.full_like(out.masks[0], 0.5))


def test_block_resolution_mismatch():
    with pytest.raises(ShapeError):
        PAGNBlock(4)(_state(), torch.randn(2, 4, 4, 4), torch.randn(2, 4, 8, 8))


def test_forward_shape_range_determinism():
    net = PAGN(8, 4).eval()
    f_app, f_pose, p_t = (torch.randn(2, 8, 16, 8) for _ in range(3))
    img, state = net(f_app, f_pose, p_t)
    assert img.shape == (2, 3, 64, 32)
    assert img.min() >= -1 and img.max() <= 1
    assert len(state.masks) == 4 and all((m >= 0).all() and (m <= 1).all() for m in state.masks)
    assert torch.equal(img, net(f_app, f_pose, p_t)[0])


def test_zero_blocks():
    with pytest.raises(ValueError):
        PAGN(4, 0)


def test_gradcheck_adain():
    assert grad_check("adain", 1e-5) < 1e-4


def test_gradcheck_block():
    assert grad_check("pagn_block") < 1e-4


def test_gradcheck_end_to_end():
    assert grad_check("generator") < 1e-4
