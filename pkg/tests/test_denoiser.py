import numpy as np
import pytest
import torch

import tamperdiff as td
from tamperdiff.conditioner import GuidanceCondition
from tamperdiff.denoiser import (
    DeformableDecoder,
    Denoiser,
    TinyDecoder,
    timestep_encoding,
)
from tamperdiff.losses import combined_loss
from tests.conftest import small_config


def make_parts(cfg=None):
    cfg = cfg or small_config()
    torch.manual_seed(0)
    model = td.build_model(cfg)
    return model, cfg


def conds_for(model, n, batch=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    h = model.latent_size
    c = model.cond_encoder.out_channels
    return tuple(
        GuidanceCondition(torch.randn(batch, c, h, h, generator=g), role)
        for role in ("forged", "original")[:n]
    )


class TestTimestepEncoding:
    def test_shape_and_determinism(self):
        t = torch.tensor([1, 500, 1000])
        enc = timestep_encoding(t, 64)
        assert enc.shape == (3, 64)
        assert torch.equal(enc, timestep_encoding(t, 64))

    def test_distinct_timesteps_distinct_codes(self):
        enc = timestep_encoding(torch.tensor([1, 2]), 32)
        assert not torch.equal(enc[0], enc[1])


class TestFuseInputs:
    def test_iml_slot_b_exactly_zero(self):
        model, _ = make_parts()
        x = torch.randn(2, model.codec.embed_dim, 8, 8)
        fused = model.denoiser.fuse_inputs(x, conds_for(model, 1, batch=2))
        width = fused.shape[1] // 2
        assert torch.equal(fused[:, width:], torch.zeros_like(fused[:, width:]))
        assert not torch.equal(fused[:, :width], torch.zeros_like(fused[:, :width]))

    def test_ciml_identical_conditions_equal_slots(self):
        model, _ = make_parts()
        x = torch.randn(1, model.codec.embed_dim, 8, 8)
        c = conds_for(model, 1)[0]
        fused = model.denoiser.fuse_inputs(
            x, (c, GuidanceCondition(c.features.clone(), "original"))
        )
        width = fused.shape[1] // 2
        assert torch.equal(fused[:, :width], fused[:, width:])

    def test_fixed_width_both_modes(self):
        model, cfg = make_parts()
        x = torch.randn(1, model.codec.embed_dim, 8, 8)
        w1 = model.denoiser.fuse_inputs(x, conds_for(model, 1)).shape[1]
        w2 = model.denoiser.fuse_inputs(x, conds_for(model, 2)).shape[1]
        assert w1 == w2 == 2 * cfg.model.fusion_width

    def test_grid_misalignment_error(self):
        model, _ = make_parts()
        x = torch.randn(1, model.codec.embed_dim, 4, 4)
        with pytest.raises(ValueError, match="does not match"):
            model.denoiser.fuse_inputs(x, conds_for(model, 1))


class TestDenoise:
    def test_output_shape(self):
        model, _ = make_parts()
        x = torch.randn(3, model.codec.embed_dim, 8, 8)
        out = model.denoise(x, conds_for(model, 1, batch=3), torch.tensor([1, 2, 3]))
        assert out.shape == (3, 2, 8, 8)

    def test_deterministic(self):
        model, _ = make_parts()
        model.eval()
        x = torch.randn(1, model.codec.embed_dim, 8, 8)
        conds = conds_for(model, 1)
        t = torch.tensor([17])
        assert torch.equal(model.denoise(x, conds, t), model.denoise(x, conds, t))

    def test_timestep_range_errors(self):
        model, _ = make_parts()
        x = torch.randn(1, model.codec.embed_dim, 8, 8)
        conds = conds_for(model, 1)
        for bad in (0, 1001):
            with pytest.raises(ValueError, match="out of range"):
                model.denoise(x, conds, torch.tensor([bad]))

    def test_timestep_changes_output(self):
        model, _ = make_parts()
        model.eval()
        x = torch.randn(1, model.codec.embed_dim, 8, 8)
        conds = conds_for(model, 1)
        a = model.denoise(x, conds, torch.tensor([1]))
        b = model.denoise(x, conds, torch.tensor([1000]))
        assert not torch.equal(a, b)

    def test_input_gate_zero_at_final_timestep(self):
        # at t = T the state is numerically pure noise; the denoiser must
        # ignore it entirely, so any two states give identical logits
        model, _ = make_parts()
        model.eval()
        conds = conds_for(model, 1)
        t = torch.tensor([1000])
        a = model.denoise(torch.randn(1, model.codec.embed_dim, 8, 8), conds, t)
        b = model.denoise(torch.zeros(1, model.codec.embed_dim, 8, 8), conds, t)
        assert torch.equal(a, b)

    def test_state_matters_at_low_timestep(self):
        model, _ = make_parts()
        model.eval()
        conds = conds_for(model, 1)
        t = torch.tensor([1])
        a = model.denoise(torch.randn(1, model.codec.embed_dim, 8, 8), conds, t)
        b = model.denoise(torch.zeros(1, model.codec.embed_dim, 8, 8), conds, t)
        assert not torch.equal(a, b)


class TestModeParameterInvariance:
    def test_identical_names_and_counts(self):
        cfg_iml = small_config(**{"train.mode": "iml"})
        cfg_ciml = small_config(**{"train.mode": "ciml"})
        torch.manual_seed(0)
        m1 = td.build_model(cfg_iml)
        torch.manual_seed(0)
        m2 = td.build_model(cfg_ciml)
        n1 = [(n, tuple(p.shape)) for n, p in m1.named_parameters()]
        n2 = [(n, tuple(p.shape)) for n, p in m2.named_parameters()]
        assert n1 == n2

    def test_all_parameters_receive_gradients_in_both_modes(self):
        for n_conds in (1, 2):
            model, _ = make_parts()
            x = torch.randn(2, model.codec.embed_dim, 8, 8)
            imgs = torch.randn(2, 3, 32, 32)
            conds = model.conditions(
                "ciml" if n_conds == 2 else "iml",
                imgs,
                torch.randn(2, 3, 32, 32) if n_conds == 2 else None,
            )
            emb = model.codec.embed_mask(np.zeros((2, 32, 32), dtype=np.uint8))
            logits = model.denoise(x + emb.values * 0, conds, torch.tensor([3, 998]))
            probs = model.codec.full_probs(logits)
            gt = torch.zeros(2, 32, 32)
            loss = combined_loss(probs, gt) + 0.0 * emb.values.sum()
            loss.backward()
            missing = [n for n, p in model.named_parameters() if p.grad is None]
            assert missing == []


class TestGradientFlow:
    def test_backprop_matches_finite_differences(self):
        # spot-check 10 random weights at float32 with a small batch
        model, cfg = make_parts()
        model.train()
        g = torch.Generator().manual_seed(7)
        x = torch.randn(2, model.codec.embed_dim, 8, 8, generator=g)
        conds = conds_for(model, 1, batch=2, seed=7)
        t = torch.tensor([100, 900])
        gt = torch.zeros(2, 32, 32)
        gt[:, 8:20, 8:20] = 1.0

        def loss_value():
            logits = model.denoise(x, conds, t)
            return combined_loss(model.codec.full_probs(logits), gt)

        loss = loss_value()
        model.zero_grad()
        loss.backward()

        params = [p for p in model.denoiser.parameters() if p.requires_grad]
        rng = np.random.default_rng(0)
        checked = 0
        attempts = 0
        while checked < 10 and attempts < 40:
            attempts += 1
            p = params[int(rng.integers(len(params)))]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            ag = float(p.grad[idx])
            if abs(ag) < 1e-4:
                continue  # FD is noise-dominated for near-zero gradients
            h = 1e-2 * max(abs(float(p.data[idx])), 0.1)
            with torch.no_grad():
                orig = float(p.data[idx])
                p.data[idx] = orig + h
                lp = float(loss_value())
                p.data[idx] = orig - h
                lm = float(loss_value())
                p.data[idx] = orig
            fd = (lp - lm) / (2 * h)
            assert fd == pytest.approx(ag, rel=1e-2, abs=2e-4)
            checked += 1
        assert checked == 10


class TestDecoders:
    def test_tiny_decoder_contract(self):
        torch.manual_seed(0)
        dec = TinyDecoder(in_channels=24, dim=32, t_dim=16, layers=2)
        out = dec(torch.randn(2, 24, 8, 8), torch.randn(2, 16))
        assert out.shape == (2, 2, 8, 8)

    def test_deformable_decoder_contract(self):
        torch.manual_seed(0)
        dec = DeformableDecoder(in_channels=24, dim=32, t_dim=16, layers=6, heads=4)
        out = dec(torch.randn(2, 24, 8, 8), torch.randn(2, 16))
        assert out.shape == (2, 2, 8, 8)

    def test_deformable_deterministic(self):
        torch.manual_seed(0)
        dec = DeformableDecoder(in_channels=8, dim=16, t_dim=8, layers=2, heads=2)
        dec.eval()
        x = torch.randn(1, 8, 8, 8)
        t = torch.randn(1, 8)
        assert torch.equal(dec(x, t), dec(x, t))

    def test_full_profile_contract(self):
        cfg = small_config()
        cfg.model.profile = "full"
        cfg.model.swin_embed_dim = 16
        cfg.model.swin_depths = [1, 1, 1, 1]
        cfg.model.swin_heads = [2, 2, 2, 2]
        cfg.model.swin_window = 4
        cfg.model.fpn_channels = 32
        cfg.model.fusion_width = 32
        cfg.model.decoder_dim = 32
        cfg.model.decoder_layers = 6
        cfg.model.decoder_heads = 4
        cfg.model.time_dim = 32
        torch.manual_seed(0)
        model = td.build_model(cfg)
        x = torch.randn(1, 3, 32, 32)
        conds = model.conditions("iml", x)
        out = model.denoise(
            torch.randn(1, cfg.model.embed_dim, 8, 8), conds, torch.tensor([500])
        )
        assert out.shape == (1, 2, 8, 8)
