"""Frozen decoder-only transformer with a trainable visual projector.

The base weights are seeded at construction and never trained; gradients
exist only for low-rank adapter factors and the projector. Backprop is
written by hand and checked against central finite differences.

Sequence layout: `visual_prefix_len` projected visual vectors, then
instruction token embeddings, then answer token embeddings. Sinusoidal
position codes are added to every position.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .adapters import (
    SITE_NAMES,
    ComposedAdapters,
    LoraAdapter,
    SiteKey,
    SiteMixture,
    TaskAdapterSet,
    site_dims,
)
from .errors import ConfigurationError, ContractError
from .numerics import FLOAT, seeded_rng

LN_EPS = 1e-5
MASK_VALUE = -1e30
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 32
    visual_dim: int = 16
    visual_prefix_len: int = 4
    lora_rank: int = 8
    lora_alpha: float = 16.0

    def __post_init__(self):
        counts = {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_blocks": self.n_blocks, "n_heads": self.n_heads, "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len, "visual_dim": self.visual_dim,
            "visual_prefix_len": self.visual_prefix_len, "lora_rank": self.lora_rank,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ConfigurationError(f"{name} must be positive, got {value}")
        if self.n_blocks < 2:
            raise ConfigurationError("n_blocks must be >= 2 (a distinct top block)")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError("d_model must be divisible by n_heads")
        if self.lora_alpha <= 0:
            raise ConfigurationError("lora_alpha must be positive")

    def to_meta(self) -> dict[str, str]:
        return {f"cfg.{k}": str(v) for k, v in self.__dict__.items()}

    @staticmethod
    def from_meta(meta: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in ModelConfig.__dataclass_fields__.values():
            raw = meta[f"cfg.{f.name}"]
            kwargs[f.name] = float(raw) if f.name == "lora_alpha" else int(raw)
        return ModelConfig(**kwargs)


@dataclass
class Sample:
    """One (visual, instruction, answer) record.

    task_id is harness bookkeeping only; the inference path never reads it.
    """

    visual: np.ndarray               # (visual_prefix_len, visual_dim)
    instruction: tuple[int, ...]
    answer: tuple[int, ...]
    task_id: str | None = None
    sample_id: str | None = None

    def validate(self, cfg: ModelConfig) -> None:
        v = np.asarray(self.visual, dtype=FLOAT)
        if v.shape != (cfg.visual_prefix_len, cfg.visual_dim):
            raise ContractError(f"visual shape {v.shape} does not match config")
        if len(self.answer) == 0:
            raise ContractError("answer must be nonempty")
        for tok in (*self.instruction, *self.answer):
            if not (0 <= int(tok) < cfg.vocab_size):
                raise ContractError(f"token id {tok} outside vocab")
        total = cfg.visual_prefix_len + len(self.instruction) + len(self.answer)
        if total > cfg.max_seq_len:
            raise ContractError(f"sequence length {total} exceeds max_seq_len")


@dataclass
class BlockWeights:
    attn_q: np.ndarray
    attn_k: np.ndarray
    attn_v: np.ndarray
    attn_o: np.ndarray
    ff_1: np.ndarray
    ff_2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray

    def named(self, b: int) -> dict[str, np.ndarray]:
        return {f"base.block{b}.{k}": v for k, v in self.__dict__.items()}


@dataclass
class BaseModel:
    cfg: ModelConfig
    emb: np.ndarray                 # (vocab, d_model)
    head: np.ndarray                # (vocab, d_model)
    blocks: list[BlockWeights]
    pos: np.ndarray = field(repr=False, default=None)  # (max_seq_len, d_model)

    def __post_init__(self):
        if self.pos is None:
            self.pos = sinusoidal_positions(self.cfg.max_seq_len, self.cfg.d_model)

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {"base.emb": self.emb, "base.head": self.head}
        for b, blk in enumerate(self.blocks):
            out.update(blk.named(b))
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.cfg.__dict__, sort_keys=True).encode())
        for name in sorted(self.named_tensors()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.named_tensors()[name]).tobytes())
        return h.hexdigest()


@dataclass
class Projector:
    """Trainable linear map from visual feature space into the embedding stream."""

    w: np.ndarray  # (d_model, visual_dim)
    b: np.ndarray  # (d_model,)

    def copy(self) -> "Projector":
        return Projector(self.w.copy(), self.b.copy())


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=FLOAT)[:, None]
    idx = np.arange(d, dtype=FLOAT)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (idx // 2)) / d)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(FLOAT)


def build_base_model(cfg: ModelConfig, seed: int) -> BaseModel:
    """Seeded frozen base; stands in for the pre-trained backbone."""
    rng = seeded_rng(seed, "base-model")
    d, ff = cfg.d_model, cfg.d_ff
    s_attn, s_ff2 = d ** -0.5, ff ** -0.5
    blocks = []
    for _ in range(cfg.n_blocks):
        blocks.append(BlockWeights(
            attn_q=rng.normal(0, s_attn, (d, d)),
            attn_k=rng.normal(0, s_attn, (d, d)),
            attn_v=rng.normal(0, s_attn, (d, d)),
            attn_o=rng.normal(0, s_attn, (d, d)),
            ff_1=rng.normal(0, s_attn, (ff, d)),
            ff_2=rng.normal(0, s_ff2, (d, ff)),
            ln1_g=np.ones(d, dtype=FLOAT), ln1_b=np.zeros(d, dtype=FLOAT),
            ln2_g=np.ones(d, dtype=FLOAT), ln2_b=np.zeros(d, dtype=FLOAT),
        ))
    return BaseModel(
        cfg=cfg,
        emb=rng.normal(0, 0.5, (cfg.vocab_size, d)),
        head=rng.normal(0, s_attn, (cfg.vocab_size, d)),
        blocks=blocks,
    )


def build_projector(cfg: ModelConfig, seed: int) -> Projector:
    rng = seeded_rng(seed, "projector")
    w = rng.normal(0, cfg.visual_dim ** -0.5, (cfg.d_model, cfg.visual_dim))
    return Projector(w=w.astype(FLOAT), b=np.zeros(cfg.d_model, dtype=FLOAT))


def empty_composition() -> ComposedAdapters:
    return ComposedAdapters(strategy="base")


def training_composition(adapter_set: TaskAdapterSet) -> ComposedAdapters:
    """Single-task composition: one expert with weight 1 at every site."""
    ones = np.ones(1, dtype=FLOAT)
    mixtures = {s: SiteMixture([ad], ones) for s, ad in adapter_set.adapters.items()}
    return ComposedAdapters(strategy="train", mixtures=mixtures)


def validate_composition(cfg: ModelConfig, comp: ComposedAdapters) -> None:
    for site, mix in comp.mixtures.items():
        d_in, d_out = site_dims(cfg, site[1])
        for expert in mix.experts:
            if expert.a.shape[1] != d_in or expert.b.shape[0] != d_out:
                raise ConfigurationError(
                    f"adapter at block{site[0]}.{site[1]} has shape "
                    f"A{expert.a.shape} B{expert.b.shape}, site needs ({d_in}->{d_out})"
                )
    for site, delta in comp.deltas.items():
        d_in, d_out = site_dims(cfg, site[1])
        if delta.shape != (d_out, d_in):
            raise ConfigurationError(
                f"delta at block{site[0]}.{site[1]} has shape {delta.shape}, "
                f"expected {(d_out, d_in)}"
            )


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t)


def _gelu_grad(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _ln_forward(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _ln_backward(dy, cache, g):
    xhat, inv = cache
    dxhat = dy * g
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def _split_heads(x, n_heads):
    bsz, s, d = x.shape
    return x.reshape(bsz, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    bsz, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(bsz, s, h * dh)


def _site_forward(x, w, site, comp, sample_weights, cache):
    """y = x W^T plus whatever the composition attaches at this site.

    sample_weights: (batch, n_experts) router weights for deferred mixtures.
    cache, when given, records (x, u) for the single-expert training path.
    """
    y = x @ w.T
    mix = comp.mixtures.get(site)
    if mix is not None:
        for i, expert in enumerate(mix.experts):
            u = x @ expert.a.T                      # (B, S, r)
            term = expert.scaling * (u @ expert.b.T)
            if mix.weights is not None:
                y = y + mix.weights[i] * term
            else:
                y = y + sample_weights[:, i, None, None] * term
            if cache is not None:
                cache[site] = (x, u)
    delta = comp.deltas.get(site)
    if delta is not None:
        y = y + x @ delta.T
    return y


def _embed(base, proj, visual, tokens):
    cfg = base.cfg
    prefix = visual @ proj.w.T + proj.b             # (B, P, d_model)
    h0 = np.concatenate([prefix, base.emb[tokens]], axis=1)
    s = h0.shape[1]
    if s > cfg.max_seq_len:
        raise ContractError(f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
    return h0 + base.pos[:s]


def forward_batch(
    base: BaseModel,
    proj: Projector,
    comp: ComposedAdapters,
    visual: np.ndarray,              # (B, P, visual_dim)
    tokens: np.ndarray,              # (B, T) int
    sample_weights: np.ndarray | None = None,
    want_cache: bool = False,
    collect_blocks: bool = False,
):
    """Causal forward pass. Returns (logits, cache, block_outputs).

    logits: (B, S, vocab). block_outputs: per-block residual-stream output,
    only when collect_blocks. cache holds backward intermediates and is only
    valid for single-expert training compositions.
    """
    cfg = base.cfg
    validate_composition(cfg, comp)
    if comp.needs_router() and sample_weights is None:
        raise ContractError("composition defers weights to a router but none were given")

    h = _embed(base, proj, visual, tokens)
    bsz, s, d = h.shape
    mask = np.triu(np.full((s, s), MASK_VALUE, dtype=FLOAT), k=1)
    inv_sqrt = 1.0 / math.sqrt(d // cfg.n_heads)

    cache = {"h0_rows": s, "visual": visual, "blocks": []} if want_cache else None
    block_outputs = [] if collect_blocks else None

    for bidx, blk in enumerate(cfg_blocks(base)):
        bc = {"x_in": h} if want_cache else None
        site_cache = {} if want_cache else None

        n1, ln1c = _ln_forward(h, blk.ln1_g, blk.ln1_b)
        q = _site_forward(n1, blk.attn_q, (bidx, "attn_q"), comp, sample_weights, site_cache)
        k = _site_forward(n1, blk.attn_k, (bidx, "attn_k"), comp, sample_weights, site_cache)
        v = _site_forward(n1, blk.attn_v, (bidx, "attn_v"), comp, sample_weights, site_cache)
        qh, kh, vh = (_split_heads(t, cfg.n_heads) for t in (q, k, v))
        scores = qh @ kh.transpose(0, 1, 3, 2) * inv_sqrt + mask
        scores -= scores.max(-1, keepdims=True)
        e = np.exp(scores)
        attw = e / e.sum(-1, keepdims=True)
        ctx = _merge_heads(attw @ vh)
        ao = _site_forward(ctx, blk.attn_o, (bidx, "attn_o"), comp, sample_weights, site_cache)
        h_mid = h + ao

        n2, ln2c = _ln_forward(h_mid, blk.ln2_g, blk.ln2_b)
        f1 = _site_forward(n2, blk.ff_1, (bidx, "ff_1"), comp, sample_weights, site_cache)
        g = _gelu(f1)
        f2 = _site_forward(g, blk.ff_2, (bidx, "ff_2"), comp, sample_weights, site_cache)
        h = h_mid + f2

        if want_cache:
            bc.update(ln1=ln1c, n1=n1, qh=qh, kh=kh, vh=vh, attw=attw, ctx=ctx,
                      h_mid=h_mid, ln2=ln2c, n2=n2, f1=f1, g=g, sites=site_cache)
            cache["blocks"].append(bc)
        if collect_blocks:
            block_outputs.append(h)

    logits = h @ base.head.T
    return logits, cache, block_outputs


def cfg_blocks(base: BaseModel) -> list[BlockWeights]:
    return base.blocks


def forward(base: BaseModel, proj: Projector, comp: ComposedAdapters, sample: Sample):
    """Per-position logits (S, vocab) for one sample, teacher-forced answers."""
    sample.validate(base.cfg)
    visual = np.asarray(sample.visual, dtype=FLOAT)[None]
    tokens = np.asarray(sample.instruction + sample.answer, dtype=np.int64)[None]
    sw = None
    if comp.needs_router():
        sw = comp.router.weights_batch(visual, [sample.instruction])
    logits, _, _ = forward_batch(base, proj, comp, visual, tokens, sample_weights=sw)
    return logits[0]


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def autoregressive_loss(logits: np.ndarray, sample: Sample) -> float:
    """Negative log-likelihood of the answer tokens, other positions masked out."""
    logits = np.asarray(logits, dtype=FLOAT)
    n_ins, n_ans = len(sample.instruction), len(sample.answer)
    prefix = logits.shape[0] - n_ins - n_ans
    if prefix < 0:
        raise ContractError("logits do not cover the answer span")
    loss = 0.0
    for l, target in enumerate(sample.answer):
        row = logits[prefix + n_ins - 1 + l]
        z = row - row.max()
        loss += math.log(np.exp(z).sum()) - z[target]
    return float(loss)


def _loss_and_dlogits(logits, answers, ans_start):
    """Mean-over-batch of per-sample summed answer NLL, plus d loss/d logits."""
    bsz, s, vocab = logits.shape
    n_ans = answers.shape[1]
    rows = ans_start - 1 + np.arange(n_ans)
    sel = logits[:, rows, :]                         # (B, L, V)
    sel = sel - sel.max(-1, keepdims=True)
    expz = np.exp(sel)
    probs = expz / expz.sum(-1, keepdims=True)
    picked = np.take_along_axis(sel, answers[:, :, None], axis=2)[:, :, 0]
    loss = float((np.log(expz.sum(-1)) - picked).sum() / bsz)
    dsel = probs.copy()
    np.put_along_axis(dsel, answers[:, :, None],
                      np.take_along_axis(dsel, answers[:, :, None], axis=2) - 1.0, axis=2)
    dlogits = np.zeros_like(logits)
    dlogits[:, rows, :] = dsel / bsz
    return loss, dlogits


# ---------------------------------------------------------------------------
# backward (LoRA factors and projector only)
# ---------------------------------------------------------------------------

def _site_backward(dy, w, site, comp, cache, grads):
    """Returns dx; accumulates adapter-factor grads for the trained expert."""
    dx = dy @ w
    mix = comp.mixtures.get(site)
    if mix is not None:
        if len(mix.experts) != 1 or mix.weights is None or mix.weights[0] != 1.0:
            raise ContractError("backward supports single-expert training compositions only")
        expert = mix.experts[0]
        x, u = cache[site]
        du = dy @ expert.b                            # (B, S, r)
        name = f"block{site[0]}.{site[1]}"
        grads[f"{name}.B"] += expert.scaling * np.einsum("bso,bsr->or", dy, u)
        grads[f"{name}.A"] += expert.scaling * np.einsum("bsr,bsi->ri", du, x)
        dx = dx + expert.scaling * (du @ expert.a)
    delta = comp.deltas.get(site)
    if delta is not None:
        dx = dx + dy @ delta
    return dx


def _backward(base, proj, comp, cache, dlogits):
    cfg = base.cfg
    inv_sqrt = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)
    grads = {}
    for site, mix in comp.mixtures.items():
        name = f"block{site[0]}.{site[1]}"
        grads[f"{name}.A"] = np.zeros_like(mix.experts[0].a)
        grads[f"{name}.B"] = np.zeros_like(mix.experts[0].b)

    dh = dlogits @ base.head
    for bidx in range(cfg.n_blocks - 1, -1, -1):
        blk = base.blocks[bidx]
        bc = cache["blocks"][bidx]
        sc = bc["sites"]

        dg = _site_backward(dh, blk.ff_2, (bidx, "ff_2"), comp, sc, grads)
        df1 = dg * _gelu_grad(bc["f1"])
        dn2 = _site_backward(df1, blk.ff_1, (bidx, "ff_1"), comp, sc, grads)
        dh_mid = dh + _ln_backward(dn2, bc["ln2"], blk.ln2_g)

        dctx = _site_backward(dh_mid, blk.attn_o, (bidx, "attn_o"), comp, sc, grads)
        dctx_h = _split_heads(dctx, cfg.n_heads)
        attw, vh, qh, kh = bc["attw"], bc["vh"], bc["qh"], bc["kh"]
        dvh = attw.transpose(0, 1, 3, 2) @ dctx_h
        daw = dctx_h @ vh.transpose(0, 1, 3, 2)
        ds = attw * (daw - (daw * attw).sum(-1, keepdims=True))
        dqh = ds @ kh * inv_sqrt
        dkh = ds.transpose(0, 1, 3, 2) @ qh * inv_sqrt
        dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
        dn1 = _site_backward(dq, blk.attn_q, (bidx, "attn_q"), comp, sc, grads)
        dn1 += _site_backward(dk, blk.attn_k, (bidx, "attn_k"), comp, sc, grads)
        dn1 += _site_backward(dv, blk.attn_v, (bidx, "attn_v"), comp, sc, grads)
        dh = dh_mid + _ln_backward(dn1, bc["ln1"], blk.ln1_g)

    p = cfg.visual_prefix_len
    visual = cache["visual"]
    grads["proj.W"] = np.einsum("bpd,bpv->dv", dh[:, :p, :], visual)
    grads["proj.b"] = dh[:, :p, :].sum(axis=(0, 1))
    return grads


def loss_and_grads(
    base: BaseModel,
    proj: Projector,
    adapter_set: TaskAdapterSet,
    visual: np.ndarray,
    ins: np.ndarray,
    ans: np.ndarray,
):
    """Batched Eq.-style answer NLL and gradients for adapters + projector."""
    comp = training_composition(adapter_set)
    tokens = np.concatenate([ins, ans], axis=1)
    logits, cache, _ = forward_batch(base, proj, comp, visual, tokens, want_cache=True)
    ans_start = base.cfg.visual_prefix_len + ins.shape[1]
    loss, dlogits = _loss_and_dlogits(logits, ans, ans_start)
    grads = _backward(base, proj, comp, cache, dlogits)
    return loss, grads


def backward(base: BaseModel, proj: Projector, adapters: TaskAdapterSet, sample: Sample):
    """Single-sample gradient of the answer NLL w.r.t. all trainable tensors."""
    sample.validate(base.cfg)
    visual = np.asarray(sample.visual, dtype=FLOAT)[None]
    ins = np.asarray(sample.instruction, dtype=np.int64)[None]
    ans = np.asarray(sample.answer, dtype=np.int64)[None]
    _, grads = loss_and_grads(base, proj, adapters, visual, ins, ans)
    return grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainingConfig:
    epochs: int = 1
    batch_size: int = 24
    lr_lora: float = 1e-2
    lr_proj: float = 1e-3
    warmup_ratio: float = 0.03
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    projector_mode: str = "shared"      # shared | snapshot (snapshot stores per-task copies)
    track_seq_finetune: bool = True

    def __post_init__(self):
        if self.projector_mode not in ("shared", "snapshot"):
            raise ConfigurationError(f"unknown projector_mode {self.projector_mode!r}")


class Adam:
    """Adam over named tensors with warmup + cosine decay, two lr groups."""

    def __init__(self, params: dict[str, np.ndarray], tcfg: TrainingConfig, total_steps: int):
        self.params = params
        self.tcfg = tcfg
        self.total_steps = max(1, total_steps)
        self.warmup = max(1, round(tcfg.warmup_ratio * self.total_steps))
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def _lr_scale(self) -> float:
        if self.t <= self.warmup:
            return self.t / self.warmup
        span = max(1, self.total_steps - self.warmup)
        progress = min(1.0, (self.t - self.warmup) / span)
        return 0.5 * (1.0 + math.cos(math.pi * progress))

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2, eps = self.tcfg.adam_beta1, self.tcfg.adam_beta2, self.tcfg.adam_eps
        scale = self._lr_scale()
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for key, p in self.params.items():
            g = grads[key]
            lr = self.tcfg.lr_proj if key.startswith("proj.") else self.tcfg.lr_lora
            self.m[key] = b1 * self.m[key] + (1 - b1) * g
            self.v[key] = b2 * self.v[key] + (1 - b2) * g * g
            p -= lr * scale * (self.m[key] / c1) / (np.sqrt(self.v[key] / c2) + eps)


def trainable_params(adapter_set: TaskAdapterSet, proj: Projector) -> dict[str, np.ndarray]:
    params = {"proj.W": proj.w, "proj.b": proj.b}
    for site, ad in adapter_set.adapters.items():
        name = f"block{site[0]}.{site[1]}"
        params[f"{name}.A"] = ad.a
        params[f"{name}.B"] = ad.b
    return params


def batchify(samples: Sequence[Sample]):
    """Stack equally shaped samples into (visual, instruction, answer) arrays."""
    shapes = {(len(s.instruction), len(s.answer)) for s in samples}
    if len(shapes) != 1:
        raise ContractError(f"mixed instruction/answer lengths in one batch: {shapes}")
    visual = np.stack([np.asarray(s.visual, dtype=FLOAT) for s in samples])
    ins = np.asarray([s.instruction for s in samples], dtype=np.int64)
    ans = np.asarray([s.answer for s in samples], dtype=np.int64)
    return visual, ins, ans


def iter_batches(samples: Sequence[Sample], order: np.ndarray, batch_size: int):
    """Deterministic shape-bucketed batches following a shuffled order."""
    buckets: dict[tuple[int, int], list[int]] = {}
    for idx in order:
        s = samples[int(idx)]
        key = (len(s.instruction), len(s.answer))
        bucket = buckets.setdefault(key, [])
        bucket.append(int(idx))
        if len(bucket) == batch_size:
            yield [samples[i] for i in bucket]
            bucket.clear()
    for key in sorted(buckets):
        if buckets[key]:
            yield [samples[i] for i in buckets[key]]


def train_on_task(
    base: BaseModel,
    proj: Projector,
    adapter_set: TaskAdapterSet,
    samples: Sequence[Sample],
    tcfg: TrainingConfig,
    seed: int,
    batch_hook=None,
) -> list[float]:
    """One-task optimization of adapter_set + proj; returns per-step losses.

    batch_hook(samples) is called once per batch of the first epoch, in
    training order (used to fold anchor accumulation into the same pass).
    """
    if not samples:
        raise ContractError("empty training set")
    params = trainable_params(adapter_set, proj)
    steps_per_epoch = math.ceil(len(samples) / tcfg.batch_size)
    opt = Adam(params, tcfg, total_steps=steps_per_epoch * tcfg.epochs)
    rng = seeded_rng(seed, "train-order")
    losses = []
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(samples))
        for batch in iter_batches(samples, order, tcfg.batch_size):
            if epoch == 0 and batch_hook is not None:
                batch_hook(batch)
            visual, ins, ans = batchify(batch)
            loss, grads = loss_and_grads(base, proj, adapter_set, visual, ins, ans)
            opt.step(grads)
            losses.append(loss)
    return losses


# ---------------------------------------------------------------------------
# greedy decoding
# ---------------------------------------------------------------------------

def greedy_decode(
    base: BaseModel,
    proj: Projector,
    comp: ComposedAdapters,
    visual: np.ndarray,
    ins: np.ndarray,
    n_answer: int,
    sample_weights: np.ndarray | None = None,
) -> np.ndarray:
    """Argmax-decode n_answer tokens after the instruction; returns (B, n_answer)."""
    tokens = np.asarray(ins, dtype=np.int64)
    for _ in range(n_answer):
        logits, _, _ = forward_batch(base, proj, comp, visual, tokens,
                                     sample_weights=sample_weights)
        nxt = logits[:, -1, :].argmax(axis=1)
        tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
    return tokens[:, ins.shape[1]:]
