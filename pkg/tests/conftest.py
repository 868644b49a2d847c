import numpy as np
import pytest

from hideforge.model import ModelConfig, Sample
from hideforge.numerics import seeded_rng


@pytest.fixture
def tiny_cfg():
    return ModelConfig(
        vocab_size=12, d_model=16, n_blocks=2, n_heads=2, d_ff=32,
        max_seq_len=16, visual_dim=8, visual_prefix_len=2, lora_rank=2,
        lora_alpha=4.0,
    )


def make_sample(cfg: ModelConfig, seed: int = 0, n_ins: int = 4, n_ans: int = 2) -> Sample:
    rng = seeded_rng(seed, "sample")
    return Sample(
        visual=rng.normal(size=(cfg.visual_prefix_len, cfg.visual_dim)),
        instruction=tuple(int(t) for t in rng.integers(0, cfg.vocab_size, size=n_ins)),
        answer=tuple(int(t) for t in rng.integers(0, cfg.vocab_size, size=n_ans)),
        task_id=None,
        sample_id=f"s{seed}",
    )
