import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from smap.tokenizer import SMAPTokenizer, TokenizerConfig, sample_prefix_length

SMALL = TokenizerConfig(image_size=16, patch_size=4, width=16, latent_count=4, latent_dim=4,
                        enc_depth=1, dec_depth=2, heads=2, mlp_ratio=2.0)


def randomized(config, seed=0, scale=0.2):
    torch.manual_seed(seed)
    model = SMAPTokenizer(config).double()
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * scale)
    return model.eval()


def images(n, size=16, seed=0):
    return torch.rand(n, size, size, 1, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def capture_input_length(blocks):
    seen = []
    handle = blocks[0].register_forward_pre_hook(lambda m, args: seen.append(args[0].shape[1]))
    return seen, handle


@pytest.fixture(scope="module")
def model():
    return randomized(SMALL)


class TestConfig:
    def test_k_must_be_positive(self):
        with pytest.raises(ValueError, match="K >= 1"):
            TokenizerConfig(latent_count=0)

    def test_patch_divides_image(self):
        with pytest.raises(ValueError):
            TokenizerConfig(image_size=30, patch_size=4)

    def test_unknown_regularizer(self):
        with pytest.raises(ValueError):
            TokenizerConfig(regu="fsq")


class TestPatches:
    @given(st.integers(0, 1000), st.sampled_from([(16, 4, 1), (8, 2, 3), (12, 3, 1)]))
    def test_roundtrip(self, seed, shape):
        size, f, ch = shape
        tok = SMAPTokenizer(TokenizerConfig(image_size=size, patch_size=f, channels=ch, width=8,
                                            heads=2, enc_depth=0, dec_depth=0))
        x = torch.rand(2, size, size, ch, generator=torch.Generator().manual_seed(seed))
        assert torch.equal(tok.unpatchify(tok.patchify(x)), x)

    def test_patch_order_is_row_major(self):
        tok = SMAPTokenizer(TokenizerConfig(image_size=4, patch_size=2, width=8, heads=2, enc_depth=0, dec_depth=0))
        x = torch.arange(16.0).reshape(1, 4, 4, 1)
        assert tok.patchify(x)[0, 1].tolist() == [2.0, 3.0, 6.0, 7.0]

    def test_wrong_size(self, model):
        with pytest.raises(Exception):
            model.encode(images(1, 8), 0)


class TestEncode:
    def test_default_sequence_length_and_shape(self):
        tok = SMAPTokenizer(TokenizerConfig())
        seen, h = capture_input_length(tok.encoder)
        z = tok.encode(torch.rand(2, 32, 32, 1), torch.tensor([0, 1]))
        h.remove()
        assert seen == [64 + 1 + 8]
        assert z.shape == (2, 8, 128)

    def test_depends_on_content(self, model):
        x = images(1)
        y = x.clone()
        y[0, 0, 0] += 0.5
        assert (model.encode(x, 0) - model.encode(y, 0)).abs().max() > 0

    def test_depends_on_class(self, model):
        x = images(1)
        assert (model.encode(x, 0) - model.encode(x, 2)).abs().max() > 0

    def test_class_id_range(self, model):
        with pytest.raises(ValueError):
            model.encode(images(1), 7)


class TestDecode:
    def test_k0_uses_mask_and_condition_only(self, model):
        seen, h = capture_input_length(model.decoder)
        lat = torch.zeros(3, 0, SMALL.latent_dim, dtype=torch.float64)
        out = model.decode(lat, torch.tensor([0, 1, 2]))
        h.remove()
        assert seen == [SMALL.num_patches + 1]
        assert out.shape == (3, 16, 16, 1) and torch.isfinite(out).all()

    @pytest.mark.parametrize("k", range(SMALL.latent_count + 1))
    def test_truncated_equals_masked(self, model, k):
        x = images(3)
        ids = torch.tensor([0, 3, 1])
        lat = model.latents(x, ids)
        a = model.decode(lat[:, :k], ids)
        b = model.decode(lat, ids, k=k)
        assert (a - b).abs().max() < 1e-9

    def test_per_sample_prefix_lengths(self, model):
        x = images(3)
        ids = torch.tensor([0, 1, 2])
        lat = model.latents(x, ids)
        ks = torch.tensor([0, 2, 4])
        batched = model.decode(lat, ids, k=ks)
        for b, k in enumerate(ks.tolist()):
            assert (batched[b] - model.decode(lat[b : b + 1, :k], ids[b])[0]).abs().max() < 1e-9

    @pytest.mark.parametrize("j", range(SMALL.latent_count))
    def test_prefix_ignores_later_rows(self, model, j):
        x = images(2)
        lat = model.latents(x, 1)
        noisy = lat.clone()
        noisy[:, j:] += 10.0
        assert (model.decode(lat, 1, k=j) - model.decode(noisy, 1, k=j)).abs().max() < 1e-12

    def test_shape_for_every_k(self, model):
        lat = model.latents(images(2), 0)
        for k in range(SMALL.latent_count + 1):
            assert model.decode(lat[:, :k], 0).shape == (2, 16, 16, 1)

    def test_too_many_latents(self, model):
        with pytest.raises(ValueError):
            model.decode(torch.zeros(1, 5, 4, dtype=torch.float64), 0)


class TestPrefixSampling:
    def test_support(self):
        k = sample_prefix_length(torch.Generator().manual_seed(0), 8, 100_000)
        assert int(k.min()) == 0 and int(k.max()) == 8

    def test_uniform(self):
        K, n = 8, 100_000
        k = sample_prefix_length(torch.Generator().manual_seed(1), K, n)
        counts = np.bincount(k.numpy(), minlength=K + 1)
        p = 1 / (K + 1)
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) < 3 * sigma)
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_scalar_draw(self):
        k = sample_prefix_length(torch.Generator().manual_seed(0), 3)
        assert isinstance(k, int) and 0 <= k <= 3


class TestForwardTrain:
    def test_full_prefix_equals_untruncated_pipeline(self, model):
        x, ids = images(2), torch.tensor([1, 2])
        out = model.forward_train(x, ids, torch.Generator().manual_seed(5), k=SMALL.latent_count)
        g = torch.Generator().manual_seed(5)
        noise = torch.randn(2, SMALL.latent_count, SMALL.latent_dim, generator=g).double()
        reg = model.regularize(model.encode(x, ids), noise)
        recon = model.decode(reg.latents, ids)
        loss = ((recon - x) ** 2).mean() + SMALL.kl_weight * reg.aux_loss
        assert torch.equal(out["recon"], recon)
        assert abs(out["loss"].item() - loss.item()) <= 1e-15 * loss.item()

    def test_k0_cuts_gradient_to_queries_but_not_condition(self):
        tok = randomized(SMALL, seed=3)
        out = tok.forward_train(images(2), torch.tensor([0, 1]), torch.Generator().manual_seed(0), k=0)
        out["loss"].backward()
        assert torch.equal(tok.latent_queries.grad, torch.zeros_like(tok.latent_queries))
        assert tok.class_table.grad[:2].abs().sum() > 0

    def test_loss_finite_positive_at_init(self):
        tok = SMAPTokenizer(SMALL)
        out = tok.forward_train(images(4).float(), torch.arange(4), torch.Generator().manual_seed(0))
        assert torch.isfinite(out["loss"]) and out["loss"].item() > 0
        assert out["k"].shape == (4,)

    def test_tail_drop_off_keeps_every_token(self):
        tok = SMAPTokenizer(TokenizerConfig(**{**SMALL.to_dict(), "tail_drop": False}))
        out = tok.forward_train(images(4).float(), 0, torch.Generator().manual_seed(0))
        assert out["k"].tolist() == [4] * 4

    @pytest.mark.parametrize("kind", ["vq", "softvq"])
    def test_quantized_modes(self, kind):
        tok = SMAPTokenizer(TokenizerConfig(**{**SMALL.to_dict(), "regu": kind, "codebook_size": 8}))
        out = tok.forward_train(images(2).float(), 0, torch.Generator().manual_seed(0))
        out["loss"].backward()
        assert torch.isfinite(out["loss"])
        assert tok.codebook.weight.grad is not None


class TestInference:
    def test_reconstruct_is_deterministic(self, model):
        x = images(2)
        assert torch.equal(model.reconstruct(x, 1, 3), model.reconstruct(x, 1, 3))

    def test_sweep_count(self, model):
        x = images(1)
        outs = [model.reconstruct(x, 0, k) for k in range(SMALL.latent_count + 1)]
        assert len(outs) == SMALL.latent_count + 1

    def test_non_semantic_uses_null_row(self):
        tok = randomized(TokenizerConfig(**{**SMALL.to_dict(), "semantic": False}))
        x = images(1)
        assert torch.equal(tok.encode(x, 0), tok.encode(x, 3))
        assert torch.equal(tok.condition(torch.tensor([1]))[0, 0], tok.class_table[SMALL.null_class])
