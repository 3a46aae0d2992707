import math

import pytest
import torch

from gradcheck import fd_check
from hoitag.fusion import FusionConfig, ImageHoiFusion, Projector, split_tag_groups
from hoitag.layers import MultiHeadAttention, sine_position_grid
from hoitag.vocab import HOI_ID, PAD_ID, SEP_ID


def test_projector_zero_weights():
    p = Projector(64, 128)
    for param in p.parameters():
        torch.nn.init.zeros_(param)
    assert torch.equal(p(torch.randn(5, 64)), torch.zeros(5, 128))


def test_projector_shape_and_mismatch():
    p = Projector(64, 128)
    assert p(torch.randn(2, 3, 64)).shape == (2, 3, 128)
    with pytest.raises(ValueError):
        p(torch.randn(2, 32))


def test_projector_hand_computation():
    p = Projector(2, 2).double()
    with torch.no_grad():
        p.fc1.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, -1.0]]))
        p.fc1.bias.copy_(torch.tensor([-5.0, 0.0]))
        p.fc2.weight.copy_(torch.eye(2))
        p.fc2.bias.copy_(torch.tensor([0.25, -0.5]))
    x = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
    # both pre-activations are negative, so only b2 survives
    assert p(x).tolist() == [[0.25, -0.5]]
    x = torch.tensor([[7.0, -3.0]], dtype=torch.float64)
    assert p(x).tolist() == [[2.25, 2.5]]


def test_projector_gradients():
    torch.manual_seed(0)
    p = Projector(4, 6, hidden=5).double()
    x = torch.randn(3, 4, dtype=torch.float64)
    # keep pre-activations away from the ReLU kink
    with torch.no_grad():
        pre = p.fc1(x)
        p.fc1.bias.add_(torch.where(pre.abs().min(0).values < 0.05, 0.2, 0.0))
    w1, b1, w2, b2 = p.fc1.weight, p.fc1.bias, p.fc2.weight, p.fc2.bias

    def f(x, w1, b1, w2, b2):
        return (torch.relu(x @ w1.T + b1) @ w2.T + b2).pow(2).sum()

    assert torch.allclose(f(x, w1, b1, w2, b2), p(x).pow(2).sum())
    fd_check(f, [x, w1, b1, w2, b2])


# -- positions -------------------------------------------------------------------------


def test_position_closed_form_at_origin():
    grid = sine_position_grid(8, 16)
    assert grid.shape == (64, 16)
    expected = torch.tensor([0.0, 1.0] * 8)
    assert torch.allclose(grid[0], expected, atol=1e-7)


def test_position_closed_form_elsewhere():
    d = 16
    grid = sine_position_grid(8, d)
    y, x = 2, 5
    half = d // 2
    for i in range(half // 2):
        freq = 1.0 / 10000 ** (2 * i / half)
        assert grid[y * 8 + x, 2 * i] == pytest.approx(math.sin(y * freq), abs=1e-6)
        assert grid[y * 8 + x, 2 * i + 1] == pytest.approx(math.cos(y * freq), abs=1e-6)
        assert grid[y * 8 + x, half + 2 * i] == pytest.approx(math.sin(x * freq), abs=1e-6)


def test_positions_distinct():
    grid = sine_position_grid(8, 128)
    d = torch.cdist(grid, grid)
    assert (d + torch.eye(64) * 10).min() > 1e-3


def test_without_pos_is_identity():
    f = ImageHoiFusion(FusionConfig(without_pos=True))
    v, t = torch.randn(1, 64, 128), torch.randn(1, 3, 128)
    a, b = f.embed_positions(v, t)
    assert torch.equal(a, v) and torch.equal(b, t)


# -- attention --------------------------------------------------------------------------


def test_attention_rows_are_distributions():
    torch.manual_seed(1)
    mha = MultiHeadAttention(32, 4)
    q, k = torch.randn(2, 5, 32), torch.randn(2, 9, 32)
    _, w = mha(q, k, k)
    assert w.shape == (2, 4, 5, 9)
    assert torch.allclose(w.sum(-1), torch.ones(2, 4, 5), atol=1e-5)
    assert (w >= 0).all()


def test_single_key_gets_all_weight():
    mha = MultiHeadAttention(16, 2)
    _, w = mha(torch.randn(1, 3, 16), torch.randn(1, 1, 16), torch.randn(1, 1, 16))
    assert torch.equal(w, torch.ones_like(w))


def test_identical_keys_uniform():
    mha = MultiHeadAttention(16, 2)
    k = torch.randn(1, 1, 16).expand(1, 4, 16)
    _, w = mha(torch.randn(1, 2, 16), k, k)
    assert torch.allclose(w, torch.full_like(w, 0.25), atol=1e-6)


def test_masked_keys_get_zero_weight():
    mha = MultiHeadAttention(16, 2)
    k = torch.randn(1, 4, 16)
    mask = torch.tensor([[False, True, False, True]])
    _, w = mha(torch.randn(1, 2, 16), k, k, key_padding_mask=mask)
    assert (w[..., [1, 3]] == 0).all()
    assert torch.allclose(w.sum(-1), torch.ones(1, 2, 2), atol=1e-6)


def test_empty_keys_rejected():
    mha = MultiHeadAttention(16, 2)
    with pytest.raises(ValueError):
        mha(torch.randn(1, 2, 16), torch.randn(1, 0, 16), torch.randn(1, 0, 16))
    f = ImageHoiFusion()
    with pytest.raises(ValueError):
        f.cross_attend(torch.randn(1, 1, 128), torch.randn(1, 0, 128))


# -- full fusion --------------------------------------------------------------------------


def _fusion_inputs(f, tag_sequences, seed=0):
    g = torch.Generator().manual_seed(seed)
    emb = torch.nn.Embedding(30, 128)
    tags, pad = f.embed_tags(emb, tag_sequences)
    return torch.randn(len(tag_sequences), 64, 64, generator=g), tags, pad


def test_fused_layout_and_attention():
    torch.manual_seed(2)
    f = ImageHoiFusion().eval()
    seqs = [[HOI_ID, 6, 12, 7, SEP_ID, 6, 13, 8, SEP_ID], [HOI_ID]]
    vis, tags, pad = _fusion_inputs(f, seqs)
    assert tags.shape == (2, 3, 128) and pad.tolist() == [[False] * 3, [False, True, True]]
    out = f(vis, tags, pad)
    assert out.tokens.shape == (2, 67, 128)
    assert out.padding[:, :64].sum() == 0
    assert torch.equal(out.padding[:, 64:], pad)
    for w in out.attention:
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-5)
    assert torch.isfinite(out.tokens).all()


def test_bare_hoi_token_finite():
    f = ImageHoiFusion().eval()
    vis, tags, pad = _fusion_inputs(f, [[HOI_ID]])
    assert torch.isfinite(f(vis, tags, pad).tokens).all()


def test_without_pos_permutation_equivariance():
    torch.manual_seed(3)
    seqs = [[HOI_ID, 6, 12, 7, SEP_ID]]
    f = ImageHoiFusion(FusionConfig(without_pos=True)).eval()
    vis, tags, pad = _fusion_inputs(f, seqs)
    perm = torch.randperm(64)
    with torch.no_grad():
        a = f(vis, tags, pad).tokens
        b = f(vis[:, perm], tags, pad).tokens
    assert torch.allclose(b[:, :64], a[:, :64][:, perm], atol=1e-5)
    assert torch.allclose(b[:, 64:], a[:, 64:], atol=1e-5)

    with_pos = ImageHoiFusion(FusionConfig()).eval()
    with torch.no_grad():
        c = with_pos(vis, tags, pad).tokens
        d = with_pos(vis[:, perm], tags, pad).tokens
    assert not torch.allclose(d[:, 64:], c[:, 64:], atol=1e-5)


def test_split_tag_groups():
    assert split_tag_groups([HOI_ID, 6, 7, 8, SEP_ID, 9, 10, 11, SEP_ID, PAD_ID]) == [[6, 7, 8], [9, 10, 11]]
    assert split_tag_groups([HOI_ID]) == []
