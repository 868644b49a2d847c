"""Frozen dual-modality features, per-task anchors, and router-free scoring.

The two encoders are fixed random projections seeded at benchmark creation:
visual vectors and instruction token embeddings are mean-pooled over
positions, then projected to the shared feature dimension. They never train,
so anchors extracted during learning and features scored at test time live
in the same space.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DegenerateInputError
from .numerics import FLOAT, cosine_similarity, seeded_rng, softmax_with_temperature

ROUTER_MODES = ("dual", "visual", "text")


@dataclass(frozen=True)
class RouterConfig:
    temperature: float = 0.1
    alpha: float = 0.5
    beta: float = 0.5
    feat_dim: int = 64

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError("router temperature must be positive")
        if self.feat_dim < 1:
            raise ConfigurationError("feat_dim must be positive")


@dataclass(frozen=True)
class FrozenEncoder:
    w_visual: np.ndarray       # (feat_dim, visual_dim)
    w_instruction: np.ndarray  # (feat_dim, d_model)
    embedding: np.ndarray      # frozen token embedding table (vocab, d_model)

    def visual_features(self, visual) -> np.ndarray:
        """Mean over prefix positions, projected. (P, Dv) -> (feat,) or batched."""
        v = np.asarray(visual, dtype=FLOAT)
        return v.mean(axis=-2) @ self.w_visual.T

    def instruction_features(self, tokens: Sequence[int]) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        return self.embedding[ids].mean(axis=-2) @ self.w_instruction.T


def build_encoder(seed: int, visual_dim: int, d_model: int, embedding: np.ndarray,
                  cfg: RouterConfig) -> FrozenEncoder:
    rng = seeded_rng(seed, "frozen-encoder")
    wv = rng.normal(0, visual_dim ** -0.5, (cfg.feat_dim, visual_dim)).astype(FLOAT)
    wi = rng.normal(0, d_model ** -0.5, (cfg.feat_dim, d_model)).astype(FLOAT)
    return FrozenEncoder(w_visual=wv, w_instruction=wi, embedding=embedding)


@dataclass
class TaskAnchor:
    task_id: str
    m_visual: np.ndarray
    m_instruction: np.ndarray
    n_seen: int = 0

    def copy(self) -> "TaskAnchor":
        return TaskAnchor(self.task_id, self.m_visual.copy(),
                          self.m_instruction.copy(), self.n_seen)


class AnchorAccumulator:
    """Single-pass running mean of both feature streams (Welford mean update)."""

    def __init__(self, task_id: str, encoder: FrozenEncoder):
        self.encoder = encoder
        self.anchor = TaskAnchor(
            task_id,
            np.zeros(encoder.w_visual.shape[0], dtype=FLOAT),
            np.zeros(encoder.w_instruction.shape[0], dtype=FLOAT),
        )

    def add(self, visual, instruction: Sequence[int]) -> None:
        a = self.anchor
        a.n_seen += 1
        fv = self.encoder.visual_features(visual)
        fi = self.encoder.instruction_features(instruction)
        a.m_visual += (fv - a.m_visual) / a.n_seen
        a.m_instruction += (fi - a.m_instruction) / a.n_seen

    def finish(self) -> TaskAnchor:
        if self.anchor.n_seen == 0:
            raise ContractError("anchor extraction over an empty stream")
        return self.anchor


def extract_anchor(encoder: FrozenEncoder, task_id: str, stream: Iterable) -> TaskAnchor:
    acc = AnchorAccumulator(task_id, encoder)
    for sample in stream:
        acc.add(sample.visual, sample.instruction)
    return acc.finish()


def _fused_scores(encoder, anchors, visual, instruction, alpha, beta):
    fv = encoder.visual_features(visual)
    fi = encoder.instruction_features(instruction)
    if np.linalg.norm(fv) == 0.0 or np.linalg.norm(fi) == 0.0:
        raise DegenerateInputError("test sample produced a zero-norm feature")
    fused = np.empty(len(anchors), dtype=FLOAT)
    for c, anchor in enumerate(anchors):
        r_v = cosine_similarity(fv, anchor.m_visual) if alpha != 0.0 else 0.0
        r_ins = cosine_similarity(fi, anchor.m_instruction) if beta != 0.0 else 0.0
        fused[c] = alpha * r_v + beta * r_ins
    return fused


def score_tasks(encoder: FrozenEncoder, anchors: Sequence[TaskAnchor],
                visual, instruction: Sequence[int], cfg: RouterConfig) -> np.ndarray:
    """Expert weights d over learned tasks for one test input (Eqs. of record:
    per-task cosine scores, alpha/beta fusion, temperature softmax)."""
    if not anchors:
        raise ContractError("no anchors to score against")
    fused = _fused_scores(encoder, anchors, visual, instruction, cfg.alpha, cfg.beta)
    return softmax_with_temperature(fused, cfg.temperature)


def ablated_score_tasks(encoder, anchors, visual, instruction, cfg: RouterConfig,
                        mode: str = "dual") -> np.ndarray:
    """dual uses cfg as-is; visual pins (alpha, beta)=(1, 0); text pins (0, 1)."""
    if mode not in ROUTER_MODES:
        raise ConfigurationError(f"unknown router mode {mode!r}")
    if mode == "visual":
        cfg = replace(cfg, alpha=1.0, beta=0.0)
    elif mode == "text":
        cfg = replace(cfg, alpha=0.0, beta=1.0)
    return score_tasks(encoder, anchors, visual, instruction, cfg)


@dataclass
class TaskRouter:
    """Bound router: anchors + encoder + config, resolving weights per sample."""

    encoder: FrozenEncoder
    anchors: list[TaskAnchor]
    cfg: RouterConfig
    mode: str = "dual"

    def weights(self, visual, instruction: Sequence[int]) -> np.ndarray:
        return ablated_score_tasks(self.encoder, self.anchors, visual, instruction,
                                   self.cfg, self.mode)

    def weights_batch(self, visual, instructions: Sequence[Sequence[int]]) -> np.ndarray:
        return np.stack([
            self.weights(visual[i], instructions[i]) for i in range(len(instructions))
        ])
