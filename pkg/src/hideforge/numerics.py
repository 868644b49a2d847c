"""Dense float64 primitives shared by every other module.

All arrays are row-major numpy float64. Functions are pure; nothing here
mutates its inputs.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import DomainError

FLOAT = np.float64


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 2-D array, optionally checking the shape."""
    m = np.asarray(values, dtype=FLOAT)
    if m.ndim != 2:
        raise DomainError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise DomainError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise DomainError(f"expected {cols} cols, got {m.shape[1]}")
    require_finite(m, "matrix")
    return m


def require_finite(a: np.ndarray, what: str = "array") -> None:
    if not np.all(np.isfinite(a)):
        raise DomainError(f"non-finite entries in {what}")


def seeded_rng(seed: int, *names: str) -> np.random.Generator:
    """Deterministic generator for `seed`, optionally forked by purpose names.

    Identical (seed, names) always yields the identical stream; distinct
    names yield independent streams.
    """
    keys = [seed & 0xFFFFFFFFFFFFFFFF]
    keys.extend(zlib.crc32(n.encode("utf-8")) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))


def fork_seed(seed: int, *names: str) -> int:
    """Derive a child integer seed from a parent seed and purpose names."""
    h = (seed & 0xFFFFFFFFFFFFFFFF) ^ 0x9E3779B97F4A7C15
    for name in names:
        h = (h * 0x100000001B3 + zlib.crc32(name.encode("utf-8"))) & 0xFFFFFFFFFFFFFFFF
    return h


def cosine_similarity(a, b) -> float:
    """sim(a, b) = a.b / (|a| |b|), defined only for nonzero vectors."""
    a = np.asarray(a, dtype=FLOAT).ravel()
    b = np.asarray(b, dtype=FLOAT).ravel()
    if a.size == 0 or a.size != b.size:
        raise DomainError(f"vector length mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("degenerate feature vector (zero norm)")
    return float(np.dot(a, b) / (na * nb))


def softmax_with_temperature(scores, temperature: float) -> np.ndarray:
    """Max-shifted softmax of scores / temperature.

    Entries are strictly positive whenever the post-temperature score gap
    stays under ~745 (float64 exp underflow); fused cosine scores are in
    [-1, 1], far inside that range.
    """
    if temperature <= 0.0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    s = np.asarray(scores, dtype=FLOAT).ravel()
    if s.size == 0:
        raise DomainError("softmax of empty score vector")
    require_finite(s, "softmax scores")
    z = s / FLOAT(temperature)
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def center_columns(x) -> np.ndarray:
    """Subtract each column's mean; shape preserved."""
    m = np.asarray(x, dtype=FLOAT)
    if m.ndim != 2 or m.shape[0] < 1:
        raise DomainError("center_columns needs a matrix with at least one row")
    return m - m.mean(axis=0, keepdims=True)
