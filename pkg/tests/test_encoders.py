import pytest
import torch

from gmu.encoders import SemanticEncoder, VisualBase, encode_query, encode_visual

from gradcheck import REL_TOL, check_gradients, worst


@pytest.fixture(autouse=True)
def _float64(float64):
    torch.manual_seed(0)


def test_zero_recurrence_gives_projection_bias():
    enc = SemanticEncoder(10, 8)
    with torch.no_grad():
        for p in enc.lstm.parameters():
            p.zero_()
    s = encode_query(torch.tensor([3, 4, 5]), enc)
    torch.testing.assert_close(s, enc.proj.bias.detach(), rtol=0, atol=0)


def test_query_shape_and_range_errors():
    enc = SemanticEncoder(10, 8)
    s = encode_query(torch.tensor([3, 4, 9]), enc)
    assert s.shape == (8,) and torch.isfinite(s).all()
    with pytest.raises(ValueError):
        encode_query(torch.tensor([3, 10]), enc)
    with pytest.raises(ValueError):
        encode_query(torch.tensor([], dtype=torch.long), enc)


def _mirror_directions(enc):
    with torch.no_grad():
        for name, p in enc.lstm.named_parameters():
            if name.endswith("_reverse"):
                p.copy_(getattr(enc.lstm, name[: -len("_reverse")]))
        d_e = enc.embedding.embedding_dim
        half = enc.proj.weight[:, :d_e].clone()
        enc.proj.weight[:, d_e:] = half


def test_direction_symmetry():
    enc = SemanticEncoder(12, 8)
    _mirror_directions(enc)
    d_e = 8
    # palindrome: both directions read the same sequence
    h = enc.final_states(torch.tensor([[5, 5]]))[0]
    torch.testing.assert_close(h[:d_e], h[d_e:])
    pal = enc.final_states(torch.tensor([[4, 9, 4]]))[0]
    torch.testing.assert_close(pal[:d_e], pal[d_e:])
    # reversal swaps the two directions' final states
    fwd = enc.final_states(torch.tensor([[3, 6, 8]]))[0]
    rev = enc.final_states(torch.tensor([[8, 6, 3]]))[0]
    torch.testing.assert_close(fwd[:d_e], rev[d_e:])
    torch.testing.assert_close(fwd[d_e:], rev[:d_e])
    torch.testing.assert_close(enc(torch.tensor([[3, 6, 8]])), enc(torch.tensor([[8, 6, 3]])))


def test_padding_excluded():
    enc = SemanticEncoder(12, 8)
    a = enc(torch.tensor([[4, 5, 6, 0, 0]]), torch.tensor([3]))
    b = enc(torch.tensor([[4, 5, 6]]))
    torch.testing.assert_close(a, b)
    batch = enc(torch.tensor([[4, 5, 6, 0], [7, 8, 9, 10]]), torch.tensor([3, 4]))
    torch.testing.assert_close(batch[0], b[0])


def test_query_gradients_match_finite_differences():
    enc = SemanticEncoder(12, 8)
    tokens = torch.tensor([[3, 7, 5]])
    target = torch.randn(8)
    rows = check_gradients(enc.named_parameters(), lambda: ((enc(tokens)[0] - target) ** 2).sum())
    name, probe, a, n, err = worst(rows)
    assert err < REL_TOL, (name, probe, a, n)


def test_visual_examples():
    vb = VisualBase(5, 4, 3)
    with torch.no_grad():
        vb.base.weight.zero_()
        vb.pos.zero_()
    assert (encode_visual(torch.randn(3, 5), vb) == 0).all()
    vb = VisualBase(5, 4, 3)
    v = torch.tensor([0.5, -1.0, 2.0, -0.1])
    with torch.no_grad():
        vb.pos[1] = v
    out = encode_visual(torch.zeros(3, 5), vb)
    torch.testing.assert_close(out[1], v.clamp_min(0))
    with pytest.raises(ValueError):
        encode_visual(torch.zeros(4, 5), vb)


def test_visual_relu_count_oracle():
    vb = VisualBase(5, 4, 3)
    x = torch.randn(3, 5)
    W = vb.base.weight.detach().numpy()
    P = vb.pos.detach().numpy()
    xn = x.numpy()
    neg = 0
    for t in range(3):
        for c in range(4):
            pre = sum(xn[t, k] * W[c, k] for k in range(5)) + P[t, c]
            neg += pre < 0
    out = encode_visual(x, vb)
    assert int((out == 0).sum()) == neg


def test_visual_homogeneity_and_positions():
    vb = VisualBase(5, 4, 3)
    x = torch.randn(3, 5)
    x[2] = x[0]
    base = encode_visual(x, vb)
    with torch.no_grad():
        vb.base.weight.mul_(2.5)
        vb.pos.mul_(2.5)
    torch.testing.assert_close(encode_visual(x, vb), 2.5 * base)
    with torch.no_grad():
        vb.pos[2] = vb.pos[0]
    out = encode_visual(x, vb)
    torch.testing.assert_close(out[0], out[2])
