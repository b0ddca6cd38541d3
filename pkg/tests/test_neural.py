import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from torch import nn

from tipsynth.neural.blocks import (FiLMGenerator, GraphConv, MultiHeadSelfAttention, NetConfigError, ShapeError,
                                    TemporalResBlock, TemporalResNet, TransformerEncoder, film)
from tipsynth.neural.gradcheck import gradient_check
from tipsynth.neural.params import ParamFileError, ParamStore
from tipsynth.neural.train import TrainingDiverged, train


def test_film_identity_and_constant():
    x = torch.randn(2, 7, 4)
    assert torch.equal(film(x, torch.ones(4), torch.zeros(4)), x)
    c = torch.full((4,), 3.5)
    assert torch.equal(film(x, torch.zeros(4), c), c.expand_as(x))


@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 5), st.integers(0, 1000))
def test_film_scalar_oracle(B, T, D, seed):
    g = torch.Generator().manual_seed(seed)
    x, gam, bet = (torch.randn(B, T, D, generator=g) for _ in range(3))
    out = film(x, gam, bet)
    for b in range(B):
        for t in range(T):
            for d in range(D):
                assert abs(out[b, t, d].item() - (gam[b, t, d].item() * x[b, t, d].item() + bet[b, t, d].item())) < 1e-6


def test_film_rejects_bad_broadcast():
    with pytest.raises(ShapeError):
        film(torch.zeros(2, 3, 4), torch.ones(2, 3, 5), torch.zeros(2, 3, 5))


def test_film_generator_starts_as_identity():
    gen = FiLMGenerator(3, 4, groups=2)
    mods = gen(torch.randn(2, 5, 3))
    assert len(mods) == 2
    for g, b in mods:
        assert torch.equal(g, torch.ones_like(g)) and torch.equal(b, torch.zeros_like(b))


def test_attention_shape_and_row_sums():
    torch.manual_seed(0)
    att = MultiHeadSelfAttention(8, 2)
    x = torch.randn(3, 11, 8)
    valid = torch.ones(3, 11, dtype=torch.bool)
    valid[1, 7:] = False
    y = att(x, valid, keep_weights=True)
    assert y.shape == x.shape
    w = att.last_weights
    assert torch.allclose(w.sum(-1), torch.ones(w.shape[:-1]), atol=1e-5)
    assert (w[1, :, :, 7:] == 0).all()


def test_attention_hand_computed_2x2():
    att = MultiHeadSelfAttention(2, 1)
    with torch.no_grad():
        att.qkv.weight.copy_(torch.cat([torch.eye(2)] * 3))
        att.qkv.bias.zero_()
        att.out.weight.copy_(torch.eye(2))
        att.out.bias.zero_()
    x = torch.tensor([[[1.0, 0.0], [0.0, 2.0]]])
    y = att(x)[0]
    s = np.array([[1.0, 0.0], [0.0, 4.0]]) / math.sqrt(2)
    w = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    expect = w @ np.array([[1.0, 0.0], [0.0, 2.0]])
    assert np.allclose(y.detach().numpy(), expect, atol=1e-6)


def test_encoder_width_check():
    with pytest.raises(NetConfigError):
        TransformerEncoder(10, 1, 3)


def test_temporal_resnet_identity_at_init():
    net = TemporalResNet(6, 3, 5)
    x = torch.randn(2, 13, 6)
    assert torch.equal(net(x), x)


@given(st.integers(1, 40))
def test_temporal_resnet_length_preserved(T):
    net = TemporalResNet(3, 2, 5)
    with torch.no_grad():
        for p in net.parameters():
            p.normal_()
    assert net(torch.randn(1, T, 3)).shape == (1, T, 3)


def test_temporal_conv_impulse_oracle():
    blk = TemporalResBlock(1, 3)
    k = np.array([0.25, 0.5, -1.0])
    with torch.no_grad():
        blk.conv1.weight.copy_(torch.tensor(k, dtype=torch.float32).view(1, 1, 3))
        blk.conv1.bias.zero_()
    x = np.zeros(9)
    x[4] = 1.0
    h = blk.conv1(torch.tensor(x, dtype=torch.float32).view(1, 1, 9))[0, 0].detach().numpy()
    # direct cross-correlation with zero padding
    xp = np.pad(x, 1)
    direct = np.array([sum(k[j] * xp[t + j] for j in range(3)) for t in range(9)])
    assert np.allclose(h, direct)
    with pytest.raises(NetConfigError):
        TemporalResBlock(2, 4)


def test_graph_conv_oracle():
    A = torch.rand(2, 4, 4)
    gc = GraphConv(3, 2, A)
    x = torch.randn(1, 3, 5, 4)
    y = gc(x).detach().numpy()
    W = gc.conv.weight.detach().numpy()[:, :, 0, 0]
    b = gc.conv.bias.detach().numpy()
    xn = x.numpy()
    expect = np.zeros((1, 2, 5, 4))
    for k in range(2):
        for c in range(2):
            for t in range(5):
                for w in range(4):
                    for v in range(4):
                        h = W[k * 2 + c] @ xn[0, :, t, v] + b[k * 2 + c]
                        expect[0, c, t, w] += h * A[k, v, w].item()
    assert np.allclose(y, expect, atol=1e-5)
    with pytest.raises(ShapeError):
        GraphConv(3, 2, torch.rand(4, 4))


def test_gradcheck_linear_squared_loss():
    torch.manual_seed(0)
    lin = nn.Linear(4, 3)
    x = torch.randn(5, 4)
    assert gradient_check(lin, [x], lambda o: (o ** 2).sum(), eps=1e-5, wrt_inputs=(0,)) < 1e-4


def test_gradcheck_film():
    class M(nn.Module):
        def __init__(self):
            super().__init__()
            self.g = nn.Parameter(torch.randn(4))
            self.b = nn.Parameter(torch.randn(4))

        def forward(self, x):
            return film(x, self.g, self.b)

    assert gradient_check(M(), [torch.randn(3, 4)], lambda o: (o ** 3).sum(), eps=1e-5, wrt_inputs=(0,)) < 1e-4


def test_gradcheck_zero_gradient_uses_absolute_rule():
    class Const(nn.Module):
        def __init__(self):
            super().__init__()
            self.w = nn.Parameter(torch.randn(3))

        def forward(self, x):
            return (self.w * 0).sum() + x.sum() * 0 + 1.0

    assert gradient_check(Const(), [torch.randn(2)], wrt_inputs=(0,)) < 1e-8


def test_gradcheck_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            return g * 3.0

    class M(nn.Module):
        def __init__(self):
            super().__init__()
            self.w = nn.Parameter(torch.tensor([1.5, -0.5]))

        def forward(self):
            return Wrong.apply(self.w).sum()

    assert gradient_check(M(), []) > 0.1


def _linear_data():
    xs = torch.linspace(-1, 1, 100).view(-1, 1)
    return [(x, 2 * x) for x in xs]


def _lin_loss(model, batch):
    x = torch.stack([b[0] for b in batch])
    y = torch.stack([b[1] for b in batch])
    return ((model(x) - y) ** 2).mean()


def test_train_fits_linear_map():
    torch.manual_seed(0)
    model = nn.Linear(1, 1)
    res = train(model, _linear_data(), _lin_loss, 600, seed=0, lr=0.05, batch_size=16)
    assert res.losses[-1] < 1e-4


def test_train_zero_lr_keeps_parameters():
    torch.manual_seed(0)
    model = nn.Linear(1, 1)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train(model, _linear_data(), _lin_loss, 20, seed=0, lr=0.0, batch_size=4)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_train_deterministic():
    curves = []
    for _ in range(2):
        torch.manual_seed(5)
        model = nn.Linear(1, 1)
        curves.append(train(model, _linear_data(), _lin_loss, 50, seed=3, lr=0.01, batch_size=8))
    assert curves[0].losses == curves[1].losses
    assert curves[0].params == curves[1].params


def test_train_divergence_and_empty():
    model = nn.Linear(1, 1)
    with pytest.raises(TrainingDiverged):
        train(model, _linear_data(), lambda m, b: m.weight.sum() * float("nan"), 3, seed=0)
    with pytest.raises(ValueError):
        train(model, [], _lin_loss, 3, seed=0)


def test_param_store_roundtrip(tmp_path):
    torch.manual_seed(0)
    net = TemporalResNet(4, 2, 3)
    store = ParamStore.from_module(net, seed=9, meta={"net": "x", "config": {"a": 1}})
    path = tmp_path / "m.tpnn"
    store.save(path)
    back = ParamStore.load(path)
    assert back == store and back.seed == 9 and back.meta == store.meta
    other = TemporalResNet(4, 2, 3)
    back.apply_to(other)
    x = torch.randn(1, 6, 4)
    assert torch.equal(other(x), net(x))


def test_param_store_corruption(tmp_path):
    store = ParamStore({"w": np.ones((2, 3))})
    raw = bytearray(store.to_bytes())
    raw[-8] ^= 0xFF
    with pytest.raises(ParamFileError):
        ParamStore.from_bytes(bytes(raw))
    with pytest.raises(ParamFileError):
        ParamStore.from_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(ParamFileError):
        ParamStore({"other": np.ones(1)}).apply_to(nn.Linear(1, 1))
