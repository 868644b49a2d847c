import math

import numpy as np
import pytest

from hideforge.adapters import init_adapter_set
from hideforge.errors import ConfigurationError, ContractError
from hideforge.model import (
    ModelConfig,
    Sample,
    TrainingConfig,
    autoregressive_loss,
    build_base_model,
    build_projector,
    empty_composition,
    forward,
    train_on_task,
    training_composition,
)
from hideforge.numerics import seeded_rng

from conftest import make_sample


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(d_model=10, n_heads=4)

    def test_needs_two_blocks(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(n_blocks=1)

    def test_positive_counts(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(lora_rank=0)

    def test_meta_round_trip(self):
        cfg = ModelConfig(vocab_size=32, lora_alpha=12.5)
        assert ModelConfig.from_meta(cfg.to_meta()) == cfg


class TestForward:
    def test_logit_shape_and_determinism(self, tiny_cfg):
        base = build_base_model(tiny_cfg, 3)
        proj = build_projector(tiny_cfg, 3)
        s = make_sample(tiny_cfg, 1)
        a = forward(base, proj, empty_composition(), s)
        b = forward(base, proj, empty_composition(), s)
        want = tiny_cfg.visual_prefix_len + len(s.instruction) + len(s.answer)
        assert a.shape == (want, tiny_cfg.vocab_size)
        np.testing.assert_array_equal(a, b)

    def test_zero_init_adapters_match_base(self, tiny_cfg):
        base = build_base_model(tiny_cfg, 3)
        proj = build_projector(tiny_cfg, 3)
        s = make_sample(tiny_cfg, 2)
        aset = init_adapter_set(tiny_cfg, "t", 5)
        plain = forward(base, proj, empty_composition(), s)
        with_lora = forward(base, proj, training_composition(aset), s)
        assert np.abs(plain - with_lora).max() <= 1e-12

    def test_causality(self, tiny_cfg):
        base = build_base_model(tiny_cfg, 4)
        proj = build_projector(tiny_cfg, 4)
        s = make_sample(tiny_cfg, 3, n_ins=5, n_ans=2)
        ref = forward(base, proj, empty_composition(), s)
        tokens = list(s.instruction + s.answer)
        for j in range(len(tokens)):
            mutated = list(tokens)
            mutated[j] = (mutated[j] + 1) % tiny_cfg.vocab_size
            s2 = Sample(s.visual, tuple(mutated[:5]), tuple(mutated[5:]))
            out = forward(base, proj, empty_composition(), s2)
            pos = tiny_cfg.visual_prefix_len + j
            assert np.abs(out[:pos] - ref[:pos]).max() <= 1e-12

    def test_frozen_base_checksum_stable_across_training(self, tiny_cfg):
        base = build_base_model(tiny_cfg, 5)
        proj = build_projector(tiny_cfg, 5)
        before = base.checksum()
        samples = [make_sample(tiny_cfg, i) for i in range(12)]
        aset = init_adapter_set(tiny_cfg, "t", 6)
        train_on_task(base, proj, aset, samples,
                      TrainingConfig(epochs=1, batch_size=4), seed=7)
        assert base.checksum() == before

    def test_composition_shape_mismatch_rejected(self, tiny_cfg):
        base = build_base_model(tiny_cfg, 3)
        proj = build_projector(tiny_cfg, 3)
        other = ModelConfig(vocab_size=12, d_model=8, n_blocks=2, n_heads=2, d_ff=16,
                            max_seq_len=16, visual_dim=8, visual_prefix_len=2)
        wrong = init_adapter_set(other, "w", 1)
        with pytest.raises(ConfigurationError):
            forward(base, proj, training_composition(wrong), make_sample(tiny_cfg, 0))


class TestLoss:
    def test_uniform_logits(self):
        s = Sample(np.zeros((1, 2)), (0,), (1,))
        logits = np.zeros((3, 4))
        assert autoregressive_loss(logits, s) == pytest.approx(math.log(4), abs=1e-12)

    def test_confident_correct_answer_drives_loss_to_zero(self):
        s = Sample(np.zeros((1, 2)), (0,), (1,))
        logits = np.zeros((3, 4))
        logits[1, 1] = 60.0  # row predicting the answer token
        assert autoregressive_loss(logits, s) <= 1e-12

    def test_hand_computed_two_step(self):
        # rows [[1,0,0],[0,2,0]] for answers (0,1):
        # loss = -ln(e/(e+2)) - ln(e^2/(e^2+2))
        s = Sample(np.zeros((1, 2)), (0, 0), (0, 1))
        logits = np.zeros((5, 3))
        logits[2] = [1.0, 0.0, 0.0]
        logits[3] = [0.0, 2.0, 0.0]
        want = -math.log(math.e / (math.e + 2)) - math.log(math.e**2 / (math.e**2 + 2))
        assert autoregressive_loss(logits, s) == pytest.approx(want, abs=1e-12)
        assert want == pytest.approx(0.790990, abs=1e-6)

    def test_only_answer_span_rows_matter(self, tiny_cfg):
        base = build_base_model(tiny_cfg, 6)
        proj = build_projector(tiny_cfg, 6)
        s = make_sample(tiny_cfg, 4, n_ins=4, n_ans=2)
        logits = forward(base, proj, empty_composition(), s)
        ref = autoregressive_loss(logits, s)
        perturbed = logits.copy()
        span_lo = tiny_cfg.visual_prefix_len + len(s.instruction) - 1
        for row in range(logits.shape[0]):
            if span_lo <= row < span_lo + len(s.answer):
                continue
            perturbed[row] += 13.7
        assert autoregressive_loss(perturbed, s) == ref

    def test_missing_span_rejected(self):
        s = Sample(np.zeros((1, 2)), (0, 0, 0), (1, 1))
        with pytest.raises(ContractError):
            autoregressive_loss(np.zeros((4, 4)), s)


class TestSampleValidation:
    def test_bad_token(self, tiny_cfg):
        s = Sample(np.zeros((2, 8)), (99,), (1,))
        with pytest.raises(ContractError):
            s.validate(tiny_cfg)

    def test_empty_answer(self, tiny_cfg):
        s = Sample(np.zeros((2, 8)), (1,), ())
        with pytest.raises(ContractError):
            s.validate(tiny_cfg)

    def test_too_long(self, tiny_cfg):
        s = Sample(np.zeros((2, 8)), tuple([1] * 14), (1,))
        with pytest.raises(ContractError):
            s.validate(tiny_cfg)
