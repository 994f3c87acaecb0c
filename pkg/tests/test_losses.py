"""Tests for the training objectives and loss assembly."""

import math

import numpy as np
import pytest

from conceptlm import autodiff as ad
from conceptlm.autodiff import DiffArray
from conceptlm.concept import Codebook
from conceptlm.config import ModelConfig
from conceptlm.losses import compute_losses, mtp_loss, ncp_loss, ntp_loss, vq_loss
from conceptlm.model import build_model

from test_concept import identity_codebook


class TestNtpLoss:
    def test_uniform_logits(self):
        logits = DiffArray(np.zeros((2, 4, 256)))
        tokens = np.random.default_rng(0).integers(0, 256, size=(2, 4))
        loss = ntp_loss(logits, tokens)
        assert abs(float(loss.values) - math.log(256)) < 1e-12

    def test_saturated_correct_logits(self):
        tokens = np.array([[3, 1, 4, 1, 5]])
        logits = np.zeros((1, 5, 8))
        for t in range(4):
            logits[0, t, tokens[0, t + 1]] = 100.0
        loss = ntp_loss(DiffArray(logits), tokens)
        assert float(loss.values) < 1e-6

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((2, 4, 8))
        tokens = rng.integers(0, 8, size=(2, 4))
        loss = float(ntp_loss(DiffArray(logits), tokens).values)
        # oracle: explicit per-position softmax and -log p
        acc = []
        for b in range(2):
            for t in range(3):
                row = logits[b, t]
                p = np.exp(row - row.max())
                p /= p.sum()
                acc.append(-math.log(p[tokens[b, t + 1]]))
        assert abs(loss - float(np.mean(acc))) < 1e-12

    def test_invalid_target(self):
        logits = DiffArray(np.zeros((1, 3, 4)))
        with pytest.raises(ValueError, match="out of range"):
            ntp_loss(logits, np.array([[0, 9, 1]]))


class TestNcpLoss:
    def test_perfect_prediction_is_zero(self):
        rng = np.random.default_rng(2)
        pooled = rng.standard_normal((2, 4, 3))
        predicted = DiffArray(pooled[:, 1:].copy())
        loss = ncp_loss(predicted, DiffArray(pooled))
        assert float(loss.values) == 0.0

    def test_single_position_squared_norm(self):
        pooled = DiffArray(np.array([[[0.0, 0.0], [3.0, 4.0]]]))
        predicted = DiffArray(np.zeros((1, 1, 2)))
        loss = ncp_loss(predicted, pooled)
        assert float(loss.values) == 25.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        pooled = rng.standard_normal((2, 3, 4))
        predicted = rng.standard_normal((2, 2, 4))
        loss = float(ncp_loss(DiffArray(predicted), DiffArray(pooled)).values)
        acc = 0.0
        for b in range(2):
            for m in range(2):
                acc += float(((predicted[b, m] - pooled[b, m + 1]) ** 2).sum())
        assert abs(loss - acc / (2 * 2)) < 1e-12

    def test_too_short(self):
        with pytest.raises(ValueError, match="too short"):
            ncp_loss(DiffArray(np.zeros((1, 0, 2))), DiffArray(np.zeros((1, 1, 2))))

    def test_stop_grad_target_blocks_target_path(self):
        rng = np.random.default_rng(4)
        pooled = DiffArray(rng.standard_normal((1, 3, 2)), requires_grad=True)
        predicted = DiffArray(rng.standard_normal((1, 2, 2)), requires_grad=True)
        ncp_loss(predicted, pooled, stop_grad_target=True).backward()
        np.testing.assert_array_equal(pooled.grad, np.zeros_like(pooled.grad))
        assert np.abs(predicted.grad).max() > 0

    def test_default_gradient_reaches_both_sides(self):
        rng = np.random.default_rng(5)
        pooled = DiffArray(rng.standard_normal((1, 3, 2)), requires_grad=True)
        predicted = DiffArray(rng.standard_normal((1, 2, 2)), requires_grad=True)
        ncp_loss(predicted, pooled).backward()
        assert np.abs(pooled.grad).max() > 0
        assert np.abs(predicted.grad).max() > 0


class TestVqLoss:
    def test_zero_when_concepts_on_entries(self):
        entries = np.array([[[0.5, -0.5], [2.0, 2.0]]])
        cb = identity_codebook(entries)
        pooled = DiffArray(np.array([[[0.5, -0.5], [2.0, 2.0]]]))
        loss = vq_loss(pooled, cb)
        assert float(loss.values) == 0.0

    def test_hand_computed_value(self):
        # one segment, entries {0, 2}, c = 0.5, beta = 0.25:
        # nearest entry is 0, loss = 0.25 + 0.25 * 0.25 = 0.3125
        cb = identity_codebook(np.array([[[0.0], [2.0]]]))
        pooled = DiffArray(np.array([[[0.5]]]))
        loss = vq_loss(pooled, cb, beta=0.25)
        assert abs(float(loss.values) - 0.3125) < 1e-12

    def test_default_detaches_concepts(self):
        rng = np.random.default_rng(6)
        cb = Codebook(rng, 1, 4, 2, "float64")
        pooled = DiffArray(rng.standard_normal((1, 3, 2)), requires_grad=True)
        vq_loss(pooled, cb).backward()
        np.testing.assert_array_equal(pooled.grad, np.zeros_like(pooled.grad))
        assert np.abs(cb.raw.grad).max() > 0

    def test_commit_flag_restores_encoder_gradient(self):
        rng = np.random.default_rng(7)
        cb = Codebook(rng, 1, 4, 2, "float64")
        pooled = DiffArray(rng.standard_normal((1, 3, 2)), requires_grad=True)
        vq_loss(pooled, cb, commit_to_encoder=True).backward()
        assert np.abs(pooled.grad).max() > 0

    def test_mean_over_concepts(self):
        cb = identity_codebook(np.array([[[0.0]]]))
        pooled = DiffArray(np.array([[[1.0], [2.0]]]))  # distances 1 and 4
        loss = vq_loss(pooled, cb, beta=0.0)
        assert abs(float(loss.values) - 2.5) < 1e-12


class TestMtpLoss:
    def test_single_head_equals_ntp(self):
        rng = np.random.default_rng(8)
        logits = rng.standard_normal((2, 5, 6))
        tokens = rng.integers(0, 6, size=(2, 5))
        a = float(mtp_loss([DiffArray(logits)], tokens).values)
        b = float(ntp_loss(DiffArray(logits), tokens).values)
        assert a == b

    def test_perfect_heads_give_zero(self):
        tokens = np.array([[0, 1, 2, 3, 4, 5]])
        heads = []
        for o in (1, 2):
            logits = np.zeros((1, 6, 8))
            for t in range(6 - o):
                logits[0, t, tokens[0, t + o]] = 200.0
            heads.append(DiffArray(logits))
        assert float(mtp_loss(heads, tokens).values) < 1e-6

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        tokens = rng.integers(0, 5, size=(1, 6))
        heads = [DiffArray(rng.standard_normal((1, 6, 5))) for _ in range(3)]
        loss = float(mtp_loss(heads, tokens).values)
        total = 0.0
        for o, head in enumerate(heads, start=1):
            acc = []
            for t in range(6 - o):
                row = head.values[0, t]
                p = np.exp(row - row.max())
                p /= p.sum()
                acc.append(-math.log(p[tokens[0, t + o]]))
            total += float(np.mean(acc))
        assert abs(loss - total) < 1e-12


class TestTotalLoss:
    def make_output(self, cfg, seed=0):
        model = build_model(cfg, seed=seed)
        tokens = np.random.default_rng(10).integers(0, cfg.vocab_size, size=(2, 8))
        return model, tokens, model.forward(tokens)

    def test_sum_of_enabled_components(self):
        cfg = ModelConfig(
            n_embd=8, n_heads=2, encoder_layers=1, decoder_layers=1,
            concept_layers=1, chunk_size=2, segments=2, codebook_entries=4,
            vocab_size=16, block_size=8,
        )
        model, tokens, out = self.make_output(cfg)
        bundle = compute_losses(cfg, out, tokens, codebook=model.concept.codebook)
        vals = bundle.component_values()
        expected = vals["l_ntp"] + vals["l_ncp"] + vals["l_vq"]
        assert vals["total"] == expected
        assert vals["l_mtp"] is None
        assert bundle.token_count == 2 * 7
        assert bundle.concept_count == 2 * 4

    def test_ablation_switch_subsets(self):
        for losses in [("ntp",), ("ntp", "vq"), ("ntp", "ncp"), ("ntp", "ncp", "vq")]:
            cfg = ModelConfig(
                n_embd=8, n_heads=2, encoder_layers=1, decoder_layers=1,
                concept_layers=1, chunk_size=2, segments=2, codebook_entries=4,
                vocab_size=16, block_size=8, losses=losses,
            )
            model, tokens, out = self.make_output(cfg)
            bundle = compute_losses(cfg, out, tokens, codebook=model.concept.codebook)
            vals = bundle.component_values()
            parts = [vals[f"l_{name}"] for name in losses]
            assert all(v is not None for v in parts)
            assert vals["total"] == sum(
                vals[f"l_{n}"] for n in ("ntp", "ncp", "vq") if f"l_{n}" in
                [f"l_{x}" for x in losses]
            )
            for name in ("ntp", "ncp", "vq"):
                if name not in losses:
                    assert vals[f"l_{name}"] is None

    def test_components_nonnegative(self):
        cfg = ModelConfig(
            n_embd=8, n_heads=2, encoder_layers=0, decoder_layers=1,
            concept_layers=1, chunk_size=2, segments=2, codebook_entries=4,
            vocab_size=16, block_size=8,
        )
        model, tokens, out = self.make_output(cfg, seed=3)
        bundle = compute_losses(cfg, out, tokens, codebook=model.concept.codebook)
        vals = bundle.component_values()
        for key in ("l_ntp", "l_ncp", "l_vq", "total"):
            assert vals[key] >= 0.0

    def test_concept_losses_require_concept_module(self):
        from conceptlm.config import ConfigError
        with pytest.raises(ConfigError, match="concept module"):
            ModelConfig(n_embd=8, n_heads=2, mode="ntp", losses=("ntp", "vq"))

    def test_mtp_mode_total(self):
        cfg = ModelConfig(
            n_embd=8, n_heads=2, encoder_layers=1, decoder_layers=1,
            vocab_size=16, block_size=8, mode="mtp", losses=("mtp",), mtp_heads=2,
        )
        model, tokens, out = self.make_output(cfg)
        bundle = compute_losses(cfg, out, tokens)
        vals = bundle.component_values()
        assert vals["total"] == vals["l_mtp"]
        assert vals["l_ntp"] is None
