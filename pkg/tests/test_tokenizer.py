import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_clip, tiny_tokenizer_config
from occ4d.core import OccupancySequence
from occ4d.tokenizer import (Codebook, NonFiniteError, Tokenizer, TokenizerConfig, _update_codebook_usage,
                             compression_ratio, decode, embed_categories, encode, load_tokenizer, make_optimizer,
                             nearest_code, quantize, quantize_latent, save_tokenizer, tokenizer_loss,
                             tokenizer_train_step, vq_loss_terms)


def toy_model(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = dict(dropout=0.0)
    cfg.update(kw)
    return Tokenizer(TokenizerConfig(**cfg)).eval()


class TestConfig:
    def test_channels(self):
        cfg = TokenizerConfig(depth=4, class_embed_dim=2, levels=2)
        assert cfg.base_channels == 8 and cfg.deep_channels == 32
        assert cfg.token_dims((8, 16, 16, 4)) == (2, 4, 4)

    def test_indivisible(self):
        with pytest.raises(ValueError, match="T=6"):
            TokenizerConfig(levels=2).token_dims((6, 16, 16))

    def test_attn_groups_must_divide(self):
        with pytest.raises(ValueError):
            TokenizerConfig(depth=4, class_embed_dim=1, levels=0, attn_groups=3)

    def test_dict_round_trip(self):
        cfg = TokenizerConfig(class_weights=[1.0] * 8)
        assert TokenizerConfig.from_dict(cfg.to_dict()) == cfg


class TestEmbedding:
    def test_lookup(self):
        model = Tokenizer(TokenizerConfig(depth=1, class_embed_dim=2, levels=0, attn_groups=2))
        labels = np.zeros((1, 1, 1, 1), np.uint8)
        labels[0, 0, 0, 0] = 5
        out = embed_categories(OccupancySequence(labels), model)
        assert out.shape == (2, 1, 1, 1)
        torch.testing.assert_close(out[:, 0, 0, 0], model.embedding.weight[5], rtol=0, atol=0)

    def test_empty_grid_is_tiled_empty_vector(self):
        model = toy_model(class_embed_dim=2)
        out = embed_categories(OccupancySequence(np.zeros((8, 16, 16, 4), np.uint8)), model)
        assert out.shape == (8, 8, 16, 16)
        expect = model.embedding.weight[0].repeat(4)  # channel = d * c' + k
        torch.testing.assert_close(out, expect[:, None, None, None].expand_as(out), rtol=0, atol=0)

    def test_channel_layout(self):
        model = toy_model(class_embed_dim=2)
        rng = np.random.default_rng(0)
        seq, _ = random_clip(rng, (4, 4, 4, 4))
        out = embed_categories(seq, model)
        t, h, w = 1, 2, 3
        for d in range(4):
            k = seq.labels[t, h, w, d]
            torch.testing.assert_close(out[2 * d:2 * d + 2, t, h, w], model.embedding.weight[k], rtol=0, atol=0)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            toy_model().embed(torch.full((1, 4, 4, 4, 4), 8))


class TestEncodeDecode:
    def test_toy_shapes(self):
        model = toy_model()
        seq, _ = random_clip(np.random.default_rng(1), (8, 16, 16, 4))
        latent = encode(seq, model)
        assert latent.shape == (16, 2, 4, 4)
        assert decode(quantize(latent, model.codebook), model).shape == (8, 8, 16, 16, 4)

    def test_indivisible_input(self):
        with pytest.raises(ValueError):
            toy_model().encode(torch.zeros(1, 6, 16, 16, 4, dtype=torch.long))

    @settings(max_examples=8, deadline=None)
    @given(st.integers(0, 2), st.integers(1, 2), st.integers(1, 3), st.data())
    def test_shape_contract(self, levels, depth, k, data):
        f = 2**levels
        T, H, W = (f * data.draw(st.integers(1, 2)) for _ in range(3))
        cfg = TokenizerConfig(num_classes=4, depth=depth, class_embed_dim=2, levels=levels, latent_channels=4,
                              codebook_size=4, attn_groups=2, dropout=0.0)
        model = Tokenizer(cfg).eval()
        labels = torch.randint(0, 4, (k, T, H, W, depth))
        latent = model.encode(labels)
        assert latent.shape == (k, 4, T // f, H // f, W // f)
        assert model.decode(model.quantize(latent)[0]).shape == (k, 4, T, H, W, depth)

    def test_zero_propagation(self):
        model = toy_model()
        with torch.no_grad():
            model.embedding.weight.zero_()
            for name, p in model.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
        latent = model.encode(torch.randint(0, 8, (1, 8, 16, 16, 4)))
        assert torch.count_nonzero(latent) == 0

    def test_zero_decoder_picks_class_zero(self):
        model = toy_model()
        with torch.no_grad():
            for p in model.decoder.parameters():
                p.zero_()
        logits = model.decode(torch.zeros(1, 16, 2, 4, 4))
        assert torch.count_nonzero(logits) == 0
        assert (logits.argmax(1) == 0).all()


class TestQuantize:
    def test_examples(self):
        codes = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
        assert nearest_code(torch.tensor([[0.9, 0.8]]), codes).item() == 1
        assert nearest_code(torch.tensor([[0.5, 0.5]]), codes).item() == 0
        grid = quantize(torch.tensor([1.0, 1.0]).reshape(2, 1, 1, 1), codes)
        assert grid.code_indices.item() == 1
        assert torch.equal(grid.values.reshape(2), codes[1])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 64), st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_brute_force_and_idempotence(self, N, c, seed):
        gen = torch.Generator().manual_seed(seed)
        codes = torch.randn(N, c, generator=gen)
        latent = torch.randn(1, c, 2, 2, 3, generator=gen)
        values, idx, _ = quantize_latent(latent, codes)
        flat = latent.permute(0, 2, 3, 4, 1).reshape(-1, c).double()
        for v, i in zip(flat, idx.reshape(-1)):
            d = [float(((v - code.double()) ** 2).sum()) for code in codes]
            assert i.item() == min(range(N), key=lambda j: (d[j], j))
        values2, idx2, _ = quantize_latent(values.detach(), codes)
        assert torch.equal(idx, idx2) and torch.equal(values, values2)
        # token values equal their selected code exactly
        sel = codes[idx.reshape(-1)].reshape(1, 2, 2, 3, c).permute(0, 4, 1, 2, 3)
        assert torch.equal(values.detach(), sel)

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            quantize_latent(torch.full((1, 2, 1, 1, 1), math.nan), torch.zeros(2, 2))

    def test_straight_through(self):
        model = toy_model()
        labels = torch.randint(0, 8, (1, 8, 16, 16, 4))
        latent = model.encode(labels).detach().requires_grad_(True)
        values, _, _ = model.quantize(latent)
        values.retain_grad()
        loss = torch.nn.functional.cross_entropy(model.decode(values), labels)
        loss.backward()
        torch.testing.assert_close(latent.grad, values.grad, rtol=0, atol=0)


class TestLoss:
    def test_uniform_logits(self):
        labels = torch.randint(0, 8, (1, 2, 2, 2, 2))
        z = torch.zeros(1, 3, 1, 1, 1)
        parts = vq_loss_terms(torch.zeros(1, 8, 2, 2, 2, 2), labels, z, z, 0.25)
        assert parts["recon"].item() == pytest.approx(math.log(8), abs=1e-6)
        assert parts["codebook"].item() == 0 and parts["commit"].item() == 0

    def test_peaked_logits(self):
        labels = torch.randint(0, 8, (1, 2, 2, 2, 2))
        logits = torch.nn.functional.one_hot(labels, 8).permute(0, 5, 1, 2, 3, 4).double() * 60
        z = torch.randn(1, 3, 1, 1, 1)
        parts = vq_loss_terms(logits, labels, z, z.clone(), 0.25)
        assert parts["recon"].item() < 1e-20
        assert parts["codebook"].item() == 0 and parts["commit"].item() == 0

    def test_terms_non_negative_and_sum(self):
        model = toy_model()
        seq, _ = random_clip(np.random.default_rng(2), (8, 16, 16, 4))
        total, parts = tokenizer_loss(seq, model)
        assert all(v.item() >= 0 for v in parts.values())
        torch.testing.assert_close(total, parts["recon"] + parts["codebook"] + parts["commit"])

    def test_beta_zero_removes_commit(self):
        gen = torch.Generator().manual_seed(0)
        labels = torch.randint(0, 8, (1, 2, 2, 2, 2), generator=gen)
        logits = torch.randn(1, 8, 2, 2, 2, 2, generator=gen)
        codes = torch.randn(1, 3, 1, 1, 1, generator=gen)
        latent = torch.randn(1, 3, 1, 1, 1, generator=gen)
        moved = latent + 0.5 * (codes - latent)
        a = vq_loss_terms(logits, labels, latent, codes, 0.0)
        b = vq_loss_terms(logits, labels, moved, codes, 0.0)
        assert a["commit"].item() == 0 == b["commit"].item()
        # only the codebook term, which measures the same distance, changes
        assert a["recon"].item() == b["recon"].item()

    def test_stop_gradients(self):
        latent = torch.randn(1, 3, 2, 1, 1, requires_grad=True)
        codes = torch.randn(4, 3, requires_grad=True)
        _, _, selected = quantize_latent(latent, codes)
        labels = torch.zeros(1, 1, 1, 1, 1, dtype=torch.long)
        logits = torch.zeros(1, 2, 1, 1, 1, 1)
        parts = vq_loss_terms(logits, labels, latent, selected, 0.25)
        g_lat, g_codes = torch.autograd.grad(parts["commit"], (latent, codes), allow_unused=True)
        assert g_codes is None or torch.count_nonzero(g_codes) == 0
        assert torch.count_nonzero(g_lat) > 0
        g_lat, g_codes = torch.autograd.grad(parts["codebook"], (latent, codes), allow_unused=True)
        assert g_lat is None or torch.count_nonzero(g_lat) == 0
        assert torch.count_nonzero(g_codes) > 0


class TestCompressionRatio:
    def test_values(self):
        assert compression_ratio((32, 200, 200), (4, 25, 25)) == 512
        assert compression_ratio((12, 200, 200), (3, 50, 50)) == 64
        assert compression_ratio((5, 6, 7), (5, 6, 7)) == 1
        assert compression_ratio((8, 16, 16), (3, 5, 5)) == Fraction(2048, 75)

    def test_zero(self):
        with pytest.raises(ValueError):
            compression_ratio((0, 1, 1), (1, 1, 1))


class TestTrainStep:
    def test_zero_lr(self):
        model = toy_model(3)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        opt = make_optimizer(model, lr=0.0)
        labels = torch.randint(0, 8, (2, 8, 16, 16, 4))
        tokenizer_train_step(model, opt, labels)
        after = model.state_dict()
        for k, v in before.items():
            if k.startswith("codebook.usage_counts") or k.startswith("codebook.idle_steps"):
                continue
            assert torch.equal(v, after[k]), k
        assert after["codebook.usage_counts"].sum() == 2 * 2 * 4 * 4

    def test_descent_on_quadratic_probe(self):
        torch.manual_seed(0)
        theta = torch.nn.Parameter(torch.randn(10))
        target = torch.randn(10)
        module = torch.nn.Module()
        module.theta = theta
        opt = make_optimizer(module, lr=1e-3)
        f = lambda: ((theta - target) ** 2).sum()
        before = f().item()
        opt.zero_grad()
        f().backward()
        opt.step()
        assert f().item() <= before

    def test_record_fields(self):
        model = toy_model()
        rec = tokenizer_train_step(model, make_optimizer(model, 1e-3), torch.randint(0, 8, (1, 8, 16, 16, 4)))
        assert set(rec) == {"recon", "codebook", "commit", "total", "accuracy"}

    def test_nonfinite_gradient_named(self):
        model = toy_model()
        model.decoder.head.weight.register_hook(lambda g: g * math.nan)
        with pytest.raises(NonFiniteError, match="decoder.head.weight"):
            tokenizer_train_step(model, make_optimizer(model, 1e-3), torch.randint(0, 8, (1, 8, 16, 16, 4)))

    def test_empty_batch(self):
        model = toy_model()
        with pytest.raises(ValueError):
            tokenizer_train_step(model, make_optimizer(model, 1e-3), torch.zeros(0, 8, 16, 16, 4, dtype=torch.long))

    def test_dead_code_reinit(self):
        model = toy_model(dead_code_steps=3, codebook_size=4, latent_channels=16)
        cb = model.codebook
        latent = torch.randn(1, 16, 1, 1, 2)
        idx = torch.zeros(1, 1, 1, 2, dtype=torch.long)
        old = cb.codes.detach().clone()
        for _ in range(2):
            _update_codebook_usage(model, idx, latent)
        assert torch.equal(cb.codes, old)
        _update_codebook_usage(model, idx, latent)
        flat = latent.permute(0, 2, 3, 4, 1).reshape(-1, 16)
        assert torch.equal(cb.codes[0], old[0])
        for j in (1, 2, 3):
            assert any(torch.equal(cb.codes[j], row) for row in flat)
        assert cb.usage_counts.tolist() == [6, 0, 0, 0]


def test_checkpoint_round_trip(tmp_path):
    model = toy_model(5)
    opt = make_optimizer(model, 1e-3)
    tokenizer_train_step(model, opt, torch.randint(0, 8, (1, 8, 16, 16, 4)))
    save_tokenizer(tmp_path / "t.otk", model, opt, step=1, extra={"note": "x"})
    loaded, opt2, meta = load_tokenizer(tmp_path / "t.otk", opt_lr=1e-3)
    assert meta["step"] == 1 and meta["note"] == "x"
    assert loaded.cfg == model.cfg
    for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k
    s1, s2 = opt.state_dict()["state"], opt2.state_dict()["state"]
    for i in s1:
        for key in ("exp_avg", "exp_avg_sq", "step"):
            assert torch.equal(torch.as_tensor(s1[i][key]), torch.as_tensor(s2[i][key]))
