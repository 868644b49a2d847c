"""Linear centered kernel alignment between layer outputs of two models.

Pipeline per comparison: column-center the activation matrices, form linear
kernel (Gram) matrices, take the Hilbert-Schmidt independence criterion
tr(Kx Ky)/(n-1)^2, and normalize. The (n-1)^2 factor cancels in the ratio
but is kept so the HSIC step is testable on its own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import ComposedAdapters
from .errors import ContractError, DegenerateInputError
from .model import BaseModel, Projector, Sample, forward_batch
from .numerics import FLOAT, center_columns, require_finite


@dataclass
class ActivationMatrix:
    values: np.ndarray  # (n samples, p features)
    layer_index: int = -1
    model_tag: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=FLOAT)
        if self.values.ndim != 2 or self.values.shape[0] < 2:
            raise ContractError("activation matrix needs n >= 2 rows")
        require_finite(self.values, "activation matrix")

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _as_values(x) -> np.ndarray:
    return x.values if isinstance(x, ActivationMatrix) else np.asarray(x, dtype=FLOAT)


def hsic_linear(x, y) -> float:
    """tr(Kx Ky)/(n-1)^2 with column-centered linear kernels."""
    xv, yv = _as_values(x), _as_values(y)
    if xv.shape[0] != yv.shape[0]:
        raise ContractError(f"sample counts differ: {xv.shape[0]} vs {yv.shape[0]}")
    n = xv.shape[0]
    if n < 2:
        raise ContractError("HSIC needs n >= 2")
    kx = (xc := center_columns(xv)) @ xc.T
    ky = (yc := center_columns(yv)) @ yc.T
    return float(np.sum(kx * ky) / (n - 1) ** 2)


def linear_cka(x, y) -> float:
    """HSIC(Kx,Ky) / sqrt(HSIC(Kx,Kx) HSIC(Ky,Ky)); symmetric, in [0, 1]."""
    sxy = hsic_linear(x, y)
    sxx = hsic_linear(x, x)
    syy = hsic_linear(y, y)
    if sxx <= 0.0 or syy <= 0.0:
        raise DegenerateInputError("zero-variance activations: HSIC(K,K)=0")
    return sxy / np.sqrt(sxx * syy)


def collect_block_activations(
    base: BaseModel,
    proj: Projector,
    comp: ComposedAdapters,
    probe: list[Sample],
    position: str = "final",
    model_tag: str = "",
) -> list[ActivationMatrix]:
    """Per-block hidden states on visual+instruction probe inputs.

    position: "final" takes the last sequence position (where the first
    answer token is predicted); "mean" averages over all positions.
    """
    if position not in ("final", "mean"):
        raise ContractError(f"unknown probe position rule {position!r}")
    if len(probe) < 2:
        raise ContractError("probe needs at least 2 samples")
    rows_per_block: list[list[np.ndarray]] = [[] for _ in range(base.cfg.n_blocks)]
    # group by instruction length for rectangular batches, restore probe order
    order: list[int] = []
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(probe):
        by_len.setdefault(len(s.instruction), []).append(i)
    for length in sorted(by_len):
        idxs = by_len[length]
        order.extend(idxs)
        group = [probe[i] for i in idxs]
        visual = np.stack([np.asarray(s.visual, dtype=FLOAT) for s in group])
        tokens = np.asarray([s.instruction for s in group], dtype=np.int64)
        sw = None
        if comp.needs_router():
            sw = comp.router.weights_batch(visual, [s.instruction for s in group])
        _, _, blocks = forward_batch(base, proj, comp, visual, tokens,
                                     sample_weights=sw, collect_blocks=True)
        for b, h in enumerate(blocks):
            taken = h[:, -1, :] if position == "final" else h.mean(axis=1)
            rows_per_block[b].extend(taken)
    inverse = np.argsort(np.asarray(order))
    return [
        ActivationMatrix(np.stack(rows)[inverse], layer_index=b, model_tag=model_tag)
        for b, rows in enumerate(rows_per_block)
    ]


def layerwise_scan(
    base: BaseModel,
    proj_a: Projector,
    comp_a: ComposedAdapters,
    proj_b: Projector,
    comp_b: ComposedAdapters,
    probe: list[Sample],
    position: str = "final",
) -> np.ndarray:
    """Per-block CKA between two compositions over the same probe inputs."""
    acts_a = collect_block_activations(base, proj_a, comp_a, probe, position, "a")
    acts_b = collect_block_activations(base, proj_b, comp_b, probe, position, "b")
    return np.asarray([linear_cka(xa, xb) for xa, xb in zip(acts_a, acts_b)], dtype=FLOAT)


def write_cka_csv(path, rows: dict[str, np.ndarray], n_blocks: int) -> None:
    """Heatmap table: one row per pair label, one column per block, 9 decimals."""
    lines = ["pair," + ",".join(f"block{b}" for b in range(n_blocks))]
    for label, values in rows.items():
        if len(values) != n_blocks:
            raise ContractError(f"row {label!r} has {len(values)} cells, expected {n_blocks}")
        lines.append(label + "," + ",".join(f"{v:.9f}" for v in values))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
