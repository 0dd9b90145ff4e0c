import math

import numpy as np
import pytest
import torch

from copymove.config import EncoderConfig
from copymove.encoder import (EfficientSelfAttention, HierarchicalEncoder,
                              MixFFN, OverlapPatchMerge, spatial_reduce)
from copymove.errors import ShapeError
from copymove.model import build_model, parameter_count

from conftest import (finite_difference_check, micro_model_config,
                      tiny_encoder_config, tiny_model_config)
from oracles import ref_attention, ref_spatial_reduce


def _seeded(*shape, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=dtype)


class TestOverlapPatchMerge:
    def test_stage1_stride_arithmetic(self):
        merge = OverlapPatchMerge(3, 8, 7, 4, 3)
        out = merge(torch.zeros(1, 3, 64, 64))
        assert out.shape == (1, 8, 16, 16)

    def test_stage2_stride_arithmetic(self):
        merge = OverlapPatchMerge(8, 16, 3, 2, 1)
        out = merge(torch.zeros(1, 8, 16, 16))
        assert out.shape == (1, 16, 8, 8)

    def test_zero_weights_zero_output(self):
        merge = OverlapPatchMerge(3, 4, 3, 2, 1)
        with torch.no_grad():
            merge.proj.weight.zero_()
            merge.proj.bias.zero_()
        out = merge(torch.rand(2, 3, 16, 16))
        assert out.shape == (2, 4, 8, 8)
        assert torch.equal(out, torch.zeros_like(out))

    def test_too_small_input(self):
        merge = OverlapPatchMerge(3, 4, 7, 4, 0)
        with pytest.raises(ShapeError):
            merge(torch.zeros(1, 3, 4, 4))


class TestSpatialReduce:
    def test_row_count(self):
        x = _seeded(2, 64, 6)
        w = _seeded(4 * 6, 6, seed=1)
        assert spatial_reduce(x, 4, w).shape == (2, 16, 6)

    def test_identity_at_reduction_one(self):
        x = _seeded(1, 12, 5, seed=2)
        out = spatial_reduce(x, 1, torch.eye(5, dtype=torch.float64))
        assert torch.allclose(out, x)
        assert out.shape[1] == 12

    def test_non_divisible_rejected(self):
        with pytest.raises(ShapeError):
            spatial_reduce(_seeded(1, 6, 4), 4, _seeded(16, 4, seed=1))

    @pytest.mark.parametrize("seed", range(6))
    def test_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        length, channels, reduction = 12, 5, 4
        x = rng.normal(size=(length, channels))
        w = rng.normal(size=(reduction * channels, channels))
        expected = ref_spatial_reduce(x, reduction, w)
        got = spatial_reduce(torch.from_numpy(x).unsqueeze(0), reduction,
                             torch.from_numpy(w))[0].numpy()
        np.testing.assert_allclose(got, expected, atol=1e-6)


def _randomize(module, seed, scale=0.5):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def _attention_oracle(attn, x):
    """Numpy re-implementation of the attention module, head by head."""
    xq = x @ attn.q.weight.detach().numpy().T
    if attn.reduction == 1:
        kv_in = x
    else:
        reduced = ref_spatial_reduce(x, attn.reduction,
                                     attn.sr_weight.detach().numpy())
        g = attn.sr_norm.weight.detach().numpy()
        b = attn.sr_norm.bias.detach().numpy()
        mu = reduced.mean(axis=-1, keepdims=True)
        var = reduced.var(axis=-1, keepdims=True)
        kv_in = (reduced - mu) / np.sqrt(var + attn.sr_norm.eps) * g + b
    xk = kv_in @ attn.k.weight.detach().numpy().T
    xv = kv_in @ attn.v.weight.detach().numpy().T
    d = attn.head_dim
    heads = []
    for h in range(attn.heads):
        cols = slice(h * d, (h + 1) * d)
        heads.append(ref_attention(xq[:, cols], xk[:, cols], xv[:, cols], d))
    return np.concatenate(heads, axis=-1) @ attn.proj.weight.detach().numpy().T


class TestAttention:
    def test_weight_rows_sum_to_one(self):
        attn = EfficientSelfAttention(8, 2, 4).double()
        _randomize(attn, 3)
        w = attn.attention_weights(_seeded(2, 16, 8, seed=4))
        assert w.shape == (2, 2, 16, 4)
        np.testing.assert_allclose(w.sum(-1).detach().numpy(), 1.0, atol=1e-6)

    def test_identical_rows_give_uniform_attention(self):
        attn = EfficientSelfAttention(6, 1, 1).double()
        _randomize(attn, 5)
        row = _seeded(6, seed=6)
        x = row.repeat(10, 1).unsqueeze(0)
        w = attn.attention_weights(x)
        np.testing.assert_allclose(w.detach().numpy(), 0.1, atol=1e-9)
        out = attn(x)
        expected = attn.proj(attn.v(row))
        np.testing.assert_allclose(
            out[0].detach().numpy(),
            expected.detach().numpy()[None].repeat(10, axis=0), atol=1e-9)

    @pytest.mark.parametrize("seed", range(6))
    def test_double_loop_oracle_full(self, seed):
        # 4x4 token map, no key/value reduction
        attn = EfficientSelfAttention(8, 2, 1).double()
        _randomize(attn, seed)
        x = _seeded(1, 16, 8, seed=seed + 100)
        got = attn(x)[0].detach().numpy()
        expected = _attention_oracle(attn, x[0].numpy())
        np.testing.assert_allclose(got, expected, atol=1e-5)

    @pytest.mark.parametrize("seed", range(4))
    def test_double_loop_oracle_reduced(self, seed):
        attn = EfficientSelfAttention(6, 2, 4).double()
        _randomize(attn, seed)
        x = _seeded(1, 16, 6, seed=seed + 200)
        got = attn(x)[0].detach().numpy()
        expected = _attention_oracle(attn, x[0].numpy())
        np.testing.assert_allclose(got, expected, atol=1e-5)

    def test_debug_flags_non_finite(self):
        attn = EfficientSelfAttention(4, 1, 1, debug=True)
        x = torch.full((1, 4, 4), float("nan"))
        with pytest.raises(FloatingPointError):
            attn(x)


class TestMixFFN:
    def test_zero_weights_identity(self):
        ffn = MixFFN(6, 2)
        with torch.no_grad():
            for name, p in ffn.named_parameters():
                if not name.startswith("norm"):
                    p.zero_()
        x = torch.rand(2, 12, 6)
        assert torch.equal(ffn(x, (3, 4)), x)

    def test_shape_preserved(self):
        ffn = MixFFN(8, 2)
        out = ffn(torch.rand(2, 16, 8), (4, 4))
        assert out.shape == (2, 16, 8)

    def test_sequence_length_mismatch(self):
        with pytest.raises(ShapeError):
            MixFFN(4, 2)(torch.rand(1, 9, 4), (2, 4))

    def test_gradients_match_finite_differences(self):
        ffn = MixFFN(4, 2).double()
        _randomize(ffn, 7, scale=0.3)
        x = _seeded(1, 4, 4, seed=8)
        probe = _seeded(1, 4, 4, seed=9)
        params = [p for p in ffn.parameters()]

        def loss_fn():
            return (ffn(x, (2, 2)) * probe).sum()

        finite_difference_check(loss_fn, params, n_samples=25)


class TestEncode:
    def test_default_config_shapes(self):
        enc = HierarchicalEncoder(EncoderConfig())
        feats = enc(torch.rand(1, 3, 64, 64))
        shapes = [tuple(f.shape) for f in feats]
        assert shapes == [(1, 32, 16, 16), (1, 64, 8, 8),
                          (1, 160, 4, 4), (1, 256, 2, 2)]

    def test_rectangular_input(self):
        enc = HierarchicalEncoder(tiny_encoder_config())
        feats = enc(torch.rand(1, 3, 96, 64))
        spatial = [tuple(f.shape[-2:]) for f in feats]
        assert spatial == [(24, 16), (12, 8), (6, 4), (3, 2)]

    def test_determinism(self):
        cfg = tiny_model_config(seed=21)
        m1, m2 = build_model(cfg), build_model(cfg)
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)
        x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
        f1 = m1.encoder(x)
        f2 = m2.encoder(x)
        assert all(torch.equal(a, b) for a, b in zip(f1, f2))

    def test_different_seeds_differ(self):
        m1 = build_model(tiny_model_config(seed=0))
        m2 = build_model(tiny_model_config(seed=1))
        assert any(not torch.equal(p1, p2)
                   for p1, p2 in zip(m1.parameters(), m2.parameters()))

    def test_indivisible_dims_rejected(self):
        enc = HierarchicalEncoder(tiny_encoder_config())
        with pytest.raises(ShapeError):
            enc(torch.rand(1, 3, 50, 64))

    def test_wrong_channel_count_rejected(self):
        enc = HierarchicalEncoder(tiny_encoder_config())
        with pytest.raises(ShapeError):
            enc(torch.rand(1, 1, 64, 64))

    def test_micro_encoder_gradients(self):
        model = build_model(micro_model_config(seed=2), dtype=torch.float64)
        enc = model.encoder
        assert parameter_count(enc) <= 5000
        x = torch.rand(1, 3, 32, 32, dtype=torch.float64,
                       generator=torch.Generator().manual_seed(3))
        params = [p for p in enc.parameters()]

        def loss_fn():
            return sum(f.sum() for f in enc(x))

        finite_difference_check(loss_fn, params, n_samples=20)
