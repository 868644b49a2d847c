"""Low-rank adapter algebra.

Per-site deltas, cross-task fusion into dense per-site deltas, and the
top-block expert mixture used at inference. Adapters are immutable after
training; everything here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError
from .numerics import FLOAT, seeded_rng

SITE_NAMES = ("attn_q", "attn_k", "attn_v", "attn_o", "ff_1", "ff_2")

SiteKey = tuple[int, str]  # (block index, site name)


def site_key_str(site: SiteKey) -> str:
    return f"block{site[0]}.{site[1]}"


def site_dims(cfg, name: str) -> tuple[int, int]:
    """(d_in, d_out) of a linear site for a model config."""
    if name in ("attn_q", "attn_k", "attn_v", "attn_o"):
        return cfg.d_model, cfg.d_model
    if name == "ff_1":
        return cfg.d_model, cfg.d_ff
    if name == "ff_2":
        return cfg.d_ff, cfg.d_model
    raise ConfigurationError(f"unknown linear site {name!r}")


def all_sites(cfg) -> list[SiteKey]:
    return [(b, n) for b in range(cfg.n_blocks) for n in SITE_NAMES]


@dataclass
class LoraAdapter:
    """Trainable delta scaling * B @ A attached to one frozen linear site."""

    site: SiteKey
    a: np.ndarray  # (rank, d_in)
    b: np.ndarray  # (d_out, rank)
    scaling: float

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def dense_delta(self) -> np.ndarray:
        return self.scaling * (self.b @ self.a)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.site, self.a.copy(), self.b.copy(), self.scaling)


def init_adapter(cfg, site: SiteKey, rng: np.random.Generator) -> LoraAdapter:
    """Gaussian A (sigma 0.02), zero B: the initial delta is exactly zero."""
    d_in, d_out = site_dims(cfg, site[1])
    a = rng.normal(0.0, 0.02, size=(cfg.lora_rank, d_in)).astype(FLOAT)
    b = np.zeros((d_out, cfg.lora_rank), dtype=FLOAT)
    return LoraAdapter(site, a, b, cfg.lora_alpha / cfg.lora_rank)


@dataclass
class TaskAdapterSet:
    """One adapter per linear site of every block, for one task."""

    task_id: str
    adapters: dict[SiteKey, LoraAdapter]

    def sites(self) -> list[SiteKey]:
        return sorted(self.adapters, key=lambda s: (s[0], SITE_NAMES.index(s[1])))

    def copy(self) -> "TaskAdapterSet":
        return TaskAdapterSet(self.task_id, {s: ad.copy() for s, ad in self.adapters.items()})

    def checksum_payload(self) -> bytes:
        chunks = []
        for site in self.sites():
            ad = self.adapters[site]
            chunks.append(site_key_str(site).encode())
            chunks.append(ad.a.tobytes())
            chunks.append(ad.b.tobytes())
        return b"".join(chunks)


def init_adapter_set(cfg, task_id: str, seed: int) -> TaskAdapterSet:
    rng = seeded_rng(seed, "lora-init", task_id)
    return TaskAdapterSet(task_id, {s: init_adapter(cfg, s, rng) for s in all_sites(cfg)})


def adapter_delta(adapter: LoraAdapter, h: np.ndarray) -> np.ndarray:
    """scaling * B (A h) for a single input vector (or stacked batch)."""
    h = np.asarray(h, dtype=FLOAT)
    if h.shape[-1] != adapter.a.shape[1]:
        raise ContractError(
            f"input length {h.shape[-1]} does not match site d_in {adapter.a.shape[1]}"
        )
    return adapter.scaling * ((h @ adapter.a.T) @ adapter.b.T)


@dataclass
class MergedDelta:
    """Dense per-site realization of an epsilon-weighted adapter sum."""

    deltas: dict[SiteKey, np.ndarray]


def merge_adapters(
    sets: Sequence[TaskAdapterSet],
    epsilons: Sequence[float],
    sites: Iterable[SiteKey],
) -> MergedDelta:
    """Per site: sum_i eps_i * scaling_i * B_i A_i, materialized densely."""
    if len(sets) == 0 or len(sets) != len(epsilons):
        raise ContractError(f"|sets|={len(sets)} must equal |eps|={len(epsilons)} >= 1")
    deltas: dict[SiteKey, np.ndarray] = {}
    for site in sites:
        acc = None
        for adapter_set, eps in zip(sets, epsilons):
            if site not in adapter_set.adapters:
                raise ConfigurationError(
                    f"adapter set {adapter_set.task_id!r} does not cover {site_key_str(site)}"
                )
            term = eps * adapter_set.adapters[site].dense_delta()
            acc = term if acc is None else acc + term
        deltas[site] = acc
    return MergedDelta(deltas)


def mixture_output(
    experts: Sequence[LoraAdapter], weights: Sequence[float], h: np.ndarray
) -> np.ndarray:
    """sum_i d_i * adapter_delta(expert_i, h); d must be a distribution."""
    weights = np.asarray(weights, dtype=FLOAT).ravel()
    if len(experts) != weights.size:
        raise ContractError(f"{len(experts)} experts but {weights.size} weights")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ContractError(f"expert weights sum to {weights.sum()!r}, expected 1")
    out = None
    for d_i, expert in zip(weights, experts):
        term = d_i * adapter_delta(expert, h)
        out = term if out is None else out + term
    return out


@dataclass
class SiteMixture:
    """Expert bank at one site. weights=None defers to the composition router."""

    experts: list[LoraAdapter]
    weights: np.ndarray | None = None


@dataclass
class ComposedAdapters:
    """Inference-time adapter arrangement over all sites.

    Each site is either absent (frozen base), an expert mixture, or a dense
    delta. `router` resolves deferred mixture weights from a sample's visual
    and instruction features; harness-only strategies pin them instead.
    """

    strategy: str
    mixtures: dict[SiteKey, SiteMixture] = field(default_factory=dict)
    deltas: dict[SiteKey, np.ndarray] = field(default_factory=dict)
    router: object | None = None  # anchors.TaskRouter when weights are deferred

    def __post_init__(self):
        overlap = set(self.mixtures) & set(self.deltas)
        if overlap:
            raise ConfigurationError(f"sites with both mixture and delta: {sorted(overlap)}")
        for site, mix in self.mixtures.items():
            if mix.weights is not None:
                s = float(np.sum(mix.weights))
                if abs(s - 1.0) > 1e-9:
                    raise ContractError(
                        f"{site_key_str(site)}: fixed expert weights sum to {s}, expected 1"
                    )
            elif self.router is None:
                raise ConfigurationError(
                    f"{site_key_str(site)}: deferred weights but no router attached"
                )

    def needs_router(self) -> bool:
        return any(m.weights is None for m in self.mixtures.values())

    def parameter_counts(self, n_blocks: int) -> dict:
        """Structural loading table: per-block adapter instances & float counts.

        Dense fusion deltas are foldable into the frozen weights, so the
        task-count-dependent cost lives entirely in the factored experts.
        """
        per_block = []
        for b in range(n_blocks):
            instances = 0
            lowrank = 0
            dense = 0
            for (blk, _), mix in self.mixtures.items():
                if blk == b:
                    instances += len(mix.experts)
                    lowrank += sum(e.a.size + e.b.size for e in mix.experts)
            for (blk, _), delta in self.deltas.items():
                if blk == b:
                    dense += delta.size
            per_block.append(
                {"block": b, "adapter_instances": instances, "lowrank_floats": lowrank,
                 "dense_floats": dense}
            )
        return {
            "strategy": self.strategy,
            "per_block": per_block,
            "total_adapter_instances": sum(r["adapter_instances"] for r in per_block),
            "total_lowrank_floats": sum(r["lowrank_floats"] for r in per_block),
            "total_dense_floats": sum(r["dense_floats"] for r in per_block),
        }
