import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from makeupdiff.mga import Attention, GuidanceWeights, MixedGuidedAttention, fuse

weights = st.floats(0, 4, allow_nan=False)


def inputs(seed, b=2, n=5, L=2, dq=16, de=16):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)
    return r(b, n, dq), r(b, L, de), r(b, de), r(b, de)


def block(seed=0):
    torch.manual_seed(seed)
    return MixedGuidedAttention(16, 16, 4).double()


def test_guidance_validation():
    with pytest.raises(ValueError):
        GuidanceWeights(-1, 1, 1)
    with pytest.raises(ValueError):
        GuidanceWeights(float("nan"), 1, 1)
    assert GuidanceWeights(1, 2, 3).scaled(2).as_tuple() == (2, 4, 6)


def test_output_shape():
    z, c, fm, fi = inputs(0)
    assert block()(z, c, fm, fi, GuidanceWeights()).shape == z.shape


def test_attention_weights_are_distributions():
    att = Attention(8, 8, 2, 4).double()
    _, w = att(torch.randn(1, 3, 8, dtype=torch.float64), torch.randn(1, 4, 8, dtype=torch.float64),
               return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)))
    with pytest.raises(ValueError):
        att(torch.randn(1, 3, 8), torch.zeros(1, 0, 8))


def test_self_update_needs_text():
    m = block()
    _, _, fm, _ = inputs(0)
    with pytest.raises(ValueError):
        m.self_update_makeup(torch.zeros(2, 0, 16, dtype=torch.float64), fm)


def test_all_zero_weights_give_zero():
    z, c, fm, fi = inputs(1)
    assert torch.count_nonzero(block()(z, c, fm, fi, GuidanceWeights(0, 0, 0))) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), weights, weights)
def test_identity_branch_off_ignores_identity(seed, lt, lm):
    m = block()
    z, c, fm, fi = inputs(seed)
    g = GuidanceWeights(lt, lm, 0.0)
    a = m(z, c, fm, fi, g)
    b = m(z, c, fm, fi + torch.randn_like(fi) * 10, g)
    assert torch.equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), weights, weights)
def test_makeup_branch_off_ignores_makeup(seed, lt, li):
    m = block()
    z, c, fm, fi = inputs(seed)
    g = GuidanceWeights(lt, 0.0, li)
    assert torch.equal(m(z, c, fm, fi, g), m(z, c, -fm * 3, fi, g))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), weights, weights, weights)
def test_linear_in_weights(seed, a, b, c_):
    m = block()
    z, c, fm, fi = inputs(seed)
    parts = [m(z, c, fm, fi, g) for g in (GuidanceWeights(1, 0, 0), GuidanceWeights(0, 1, 0), GuidanceWeights(0, 0, 1))]
    out = m(z, c, fm, fi, GuidanceWeights(a, b, c_))
    assert torch.allclose(out, a * parts[0] + b * parts[1] + c_ * parts[2], atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), weights, weights, weights, st.floats(0, 5))
def test_homogeneous(seed, a, b, c_, k):
    m = block()
    z, c, fm, fi = inputs(seed)
    g = GuidanceWeights(a, b, c_)
    assert torch.allclose(m(z, c, fm, fi, g.scaled(k)), k * m(z, c, fm, fi, g), atol=1e-9)


def test_text_branch_sees_original_prompt_tokens():
    m = block()
    z, c, fm, fi = inputs(2)
    g = GuidanceWeights(1, 0, 0)
    assert torch.allclose(m(z, c, fm, fi, g), m.cross["text"](z, c))


def test_fuse_checks():
    z = torch.ones(1, 2, 3)
    with pytest.raises(ValueError):
        fuse(z, torch.ones(1, 2, 4), None, GuidanceWeights(1, 1, 0))
    with pytest.raises(ValueError):
        fuse(None, None, None, GuidanceWeights(0, 0, 0))
    with pytest.raises(ValueError):
        fuse(z, None, None, GuidanceWeights(1, 1, 0))
    assert torch.equal(fuse(None, None, None, GuidanceWeights(0, 0, 0), like=z), torch.zeros_like(z))


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        MixedGuidedAttention(16, 18, 4)
