"""Dense float64 primitives: cosine similarities and stable reductions."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, EmptySequence, ZeroNormVector

EPS_NORM = 1e-12


def as_vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise DimensionMismatch(f"expected a non-empty 1-D vector, got shape {v.shape}")
    return v


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors.

    Raises:
        DimensionMismatch: lengths differ.
        ZeroNormVector: either vector has norm <= 1e-12.
    """
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"length {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= EPS_NORM or nb <= EPS_NORM:
        raise ZeroNormVector()
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


def row_norms(x: np.ndarray) -> np.ndarray:
    """Euclidean norm of every row; raises ZeroNormVector naming the first bad row."""
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms <= EPS_NORM)
    if bad.size:
        raise ZeroNormVector(index=int(bad[0]))
    return norms


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = row_norms(x)
    return x / norms[:, None], norms


def normalize_rows_backward(unit: np.ndarray, norms: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient on ``x / |x|`` back onto ``x``."""
    radial = np.sum(unit * d_unit, axis=1, keepdims=True)
    return (d_unit - unit * radial) / norms[:, None]


def pairwise_cosine(batch) -> np.ndarray:
    """All-pairs cosine similarity of the rows of an M x D batch."""
    x = as_matrix(batch)
    if x.shape[0] < 2:
        raise DimensionMismatch(f"need at least 2 rows, got {x.shape[0]}")
    unit, _ = normalize_rows(x)
    s = unit @ unit.T
    # exact symmetry and unit diagonal regardless of BLAS summation order
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    return np.clip(s, -1.0, 1.0)


def log_sum_exp(values) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptySequence("log_sum_exp of an empty sequence")
    m = float(np.max(v))
    return m + float(np.log(np.sum(np.exp(v - m))))


def masked_log_softmax(z: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise log-softmax restricted to ``mask`` (entries outside are -inf).

    Every row must keep at least one entry.
    """
    if mask is None:
        zm = z
    else:
        zm = np.where(mask, z, -np.inf)
    m = np.max(zm, axis=1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(zm - m), axis=1, keepdims=True))
    return zm - lse
