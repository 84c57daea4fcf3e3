import math

import numpy as np
import pytest
import torch

from gmu.moment_level import (
    BoundaryScorer,
    GlobalAttention,
    LocalAttention,
    MaskHead,
    MomentGenerator,
    MomentPredictor,
    biaffine_map,
    boundary_scores,
    fuse_semantic,
    generate,
    global_attention,
    local_attention,
    mask_logits,
)
from gmu.objectives import loss_ce

from gradcheck import REL_TOL, check_gradients, worst


@pytest.fixture(autouse=True)
def _float64(float64):
    torch.manual_seed(0)


def test_fuse_semantic():
    v = torch.randn(4, 3)
    torch.testing.assert_close(fuse_semantic(v, torch.ones(3)), v)
    assert (fuse_semantic(v, torch.zeros(3)) == 0).all()
    v2, s2 = torch.randn(2, 3), torch.randn(3)
    out = fuse_semantic(v2, s2)
    for i in range(2):
        for c in range(3):
            assert out[i, c].item() == v2[i, c].item() * s2[c].item()
    with pytest.raises(ValueError):
        fuse_semantic(v, torch.ones(4))


def _zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_local_attention_zero_blocks_is_relu():
    la = LocalAttention(5, n_l=3)
    _zero_(la)
    x = torch.randn(2, 6, 5)
    torch.testing.assert_close(la(x), x.clamp_min(0))
    assert local_attention(torch.randn(6, 5), la).shape == (6, 5)


def test_local_attention_single_layer_oracle():
    la = LocalAttention(2, n_l=1).eval()
    W = torch.tensor([[0.5, -1.0], [2.0, 0.25]])
    b = torch.tensor([0.1, -0.2])
    gamma, beta = torch.tensor([1.5, 0.5]), torch.tensor([0.0, 0.3])
    rm, rv = torch.tensor([0.2, -0.1]), torch.tensor([0.8, 2.0])
    blk = la.blocks[0]
    with torch.no_grad():
        blk.conv.weight.copy_(W.unsqueeze(-1))
        blk.conv.bias.copy_(b)
        blk.norm.weight.copy_(gamma)
        blk.norm.bias.copy_(beta)
        blk.norm.running_mean.copy_(rm)
        blk.norm.running_var.copy_(rv)
    f = [[1.0, -2.0], [0.5, 3.0]]
    expected = []
    for t in range(2):
        row = []
        for o in range(2):
            conv = sum(W[o, c].item() * f[t][c] for c in range(2)) + b[o].item()
            norm = (conv - rm[o].item()) / math.sqrt(rv[o].item() + 1e-5) * gamma[o].item() + beta[o].item()
            row.append(max(0.0, f[t][o] + max(0.0, norm)))
        expected.append(row)
    out = local_attention(torch.tensor(f), la)
    torch.testing.assert_close(out, torch.tensor(expected))


def test_norm_uses_running_stats_for_single_sample():
    la = LocalAttention(3, n_l=1).train()
    x = torch.randn(1, 5, 3)
    before = la.blocks[0].norm.running_mean.clone()
    out_train = la(x)
    torch.testing.assert_close(la.blocks[0].norm.running_mean, before)
    torch.testing.assert_close(out_train, la.eval()(x))


def test_global_attention_identity_cases():
    ga = GlobalAttention(4, n_g=2)
    with torch.no_grad():
        for blk in ga.blocks:
            blk.value.weight.zero_()
    x = torch.randn(5, 4)
    torch.testing.assert_close(global_attention(x, ga), x)
    ga1 = GlobalAttention(4, n_g=1)
    x1 = torch.randn(1, 4)
    Wv = ga1.blocks[0].value.weight
    torch.testing.assert_close(ga1(x1), x1 + x1 @ Wv.T)


def test_global_attention_hand_oracle():
    ga = GlobalAttention(2, n_g=1)
    with torch.no_grad():
        for lin in (ga.blocks[0].query, ga.blocks[0].key, ga.blocks[0].value):
            lin.weight.copy_(torch.eye(2))
    f = [[1.0, 0.0], [0.5, 2.0]]
    out = []
    for t in range(2):
        logits = [sum(f[t][c] * f[u][c] for c in range(2)) / math.sqrt(2) for u in range(2)]
        z = [math.exp(v) for v in logits]
        a = [v / sum(z) for v in z]
        out.append([f[t][c] + sum(a[u] * f[u][c] for u in range(2)) for c in range(2)])
    torch.testing.assert_close(ga(torch.tensor(f)), torch.tensor(out))


def test_generator_pooling():
    gen = MomentGenerator(3)
    with torch.no_grad():
        gen.ap.weight.zero_()
        gen.ap.bias.fill_(0.7)
    f_o = torch.randn(6, 3)
    out = generate(f_o, gen)
    torch.testing.assert_close(out.w_a, torch.full((6,), 1 / 6))
    torch.testing.assert_close(out.f_a, f_o.mean(0))
    # a 50-unit margin concentrates all weight on one row
    f_o = torch.randn(4, 3)
    with torch.no_grad():
        gen.ap.weight.copy_(torch.tensor([[1.0, 0.0, 0.0]]))
        gen.ap.bias.zero_()
    f_o[:, 0] = torch.tensor([0.0, 50.0, 0.0, -1.0])
    out = generate(f_o, gen)
    torch.testing.assert_close(out.f_a, f_o[1], atol=1e-18, rtol=1e-12)
    gen = MomentGenerator(5)
    w = generate(torch.randn(2, 7, 5), gen).w_a
    assert w.shape == (2, 7) and (w >= 0).all()
    torch.testing.assert_close(w.sum(-1), torch.ones(2), atol=1e-6, rtol=0)


def test_boundary_scores_examples():
    sc = BoundaryScorer(4)
    with torch.no_grad():
        sc.w_b.weight.copy_(torch.eye(4))
        sc.w_a.weight.fill_(1.0)
        sc.w_a.bias.zero_()
    f = torch.tensor([0.3, -1.0, 2.0, 0.5])
    v = torch.stack([f, torch.zeros(4), -f])
    out = boundary_scores(v, f, sc)
    assert out[0].item() == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
    assert out[1].item() == pytest.approx(0.5, abs=1e-12)
    assert out[2].item() == pytest.approx(1 / (1 + math.exp(1)), abs=1e-12)
    with torch.no_grad():
        sc.w_a.bias.fill_(0.8)
    assert boundary_scores(v, f, sc)[1].item() == pytest.approx(1 / (1 + math.exp(-0.8)))
    with pytest.raises(ValueError):
        boundary_scores(v, torch.zeros(4), sc)


def test_boundary_scores_range_and_scale_invariance():
    sc = BoundaryScorer(6)
    v = torch.randn(8, 6).clamp_min(0)
    f = torch.randn(6)
    out = boundary_scores(v, f, sc)
    assert out.shape == (8,) and ((out > 0) & (out < 1)).all()
    torch.testing.assert_close(boundary_scores(v, 13.5 * f, sc), out)


def test_biaffine_examples():
    e0, e3 = torch.zeros(4), torch.zeros(4)
    e0[0], e3[3] = 1.0, 1.0
    m = biaffine_map(e0, e3)
    assert m[0, 3] == 1.0 and m.sum() == 1.0
    s = torch.rand(4)
    s[2] = 0.0
    assert (biaffine_map(s, torch.rand(4))[2] == 0).all()
    m = biaffine_map(torch.tensor([0.25, 0.25]), torch.tensor([0.64, 0.64]))
    torch.testing.assert_close(m, torch.tensor([[0.4, 0.4], [0.0, 0.4]]))


def test_biaffine_validity_and_monotonicity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        T = int(rng.integers(2, 10))
        a, b = torch.rand(T), torch.rand(T)
        m = biaffine_map(a, b)
        assert (m.tril(-1) == 0).all() and (m <= 1).all()
        c = float(rng.uniform(0.01, 1.0))
        m2 = biaffine_map(c * a, c * b)
        assert int(m.argmax()) == int(m2.argmax())


def test_biaffine_gradient_at_zero_is_finite():
    a = torch.tensor([0.0, 0.5], requires_grad=True)
    biaffine_map(a, torch.tensor([0.3, 0.2])).sum().backward()
    assert torch.isfinite(a.grad).all()


def test_mask_head():
    head = MaskHead(4, 5)
    with torch.no_grad():
        head.proj.weight.zero_()
    torch.testing.assert_close(mask_logits(torch.randn(4), head), head.proj.bias)
    assert mask_logits(torch.randn(3, 4), head).shape == (3, 5)
    head = MaskHead(4, 5)
    s = torch.randn(2, 4)
    tgt = torch.tensor([3, 1])
    rows = check_gradients(head.named_parameters(), lambda: loss_ce(head(s), tgt)[0])
    assert worst(rows)[4] < REL_TOL


@pytest.mark.parametrize("guided", [True, False])
def test_moment_path_gradients(guided):
    T, d, V = 4, 8, 12
    model = MomentPredictor(d, V, generation_guided=guided).train()
    v_f = torch.randn(2, T, d).clamp_min(0) + 0.1
    s = torch.randn(2, d)
    lab = torch.rand(2, T)

    def loss():
        out = model(v_f, s)
        return ((out.S_m - 0.3) ** 2).sum() + (out.w_a * lab).sum() + torch.log_softmax(
            out.mask_logits, -1)[:, 3].sum() + (out.s_start * lab).sum()

    out = model(v_f, s)
    assert torch.isfinite(out.S_m).all()
    rows = check_gradients(model.named_parameters(), loss)
    name, probe, a, n, err = worst(rows)
    assert err < REL_TOL, (name, probe, a, n)
