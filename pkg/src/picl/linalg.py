"""Dense float64 vector/matrix helpers.

Thin, shape-checked wrappers over numpy. Everything else in the package
uses these when it needs normalization or cosine similarity so that the
degenerate-input behaviour is uniform.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, ShapeError

__all__ = [
    "as_vec",
    "as_mat",
    "l2_normalize",
    "l2_normalize_rows",
    "cosine",
    "matvec",
    "matmul",
    "axpy",
    "outer",
]


def as_vec(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {a.shape}")
    return a


def as_mat(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def l2_normalize(v) -> np.ndarray:
    """Return ``v / ||v||``; raises DegenerateInputError for a zero vector."""
    a = as_vec(v)
    n = np.linalg.norm(a)
    if not np.isfinite(n) or n == 0.0:
        raise DegenerateInputError(f"cannot normalize vector with norm {n}")
    return a / n


def l2_normalize_rows(m) -> np.ndarray:
    """Row-wise :func:`l2_normalize` for a batch of vectors."""
    a = as_mat(m)
    n = np.linalg.norm(a, axis=1, keepdims=True)
    if a.shape[0] and (not np.all(np.isfinite(n)) or np.any(n == 0.0)):
        bad = int(np.flatnonzero(~np.isfinite(n[:, 0]) | (n[:, 0] == 0.0))[0])
        raise DegenerateInputError(f"row {bad} has zero or non-finite norm")
    return a / n


def cosine(a, b) -> float:
    a = as_vec(a)
    b = as_vec(b)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero vector is undefined")
    c = float(np.dot(a, b) / (na * nb))
    # rounding can push |c| a hair past 1
    return min(1.0, max(-1.0, c))


def matvec(m, v) -> np.ndarray:
    m = as_mat(m)
    v = as_vec(v)
    if m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: {m.shape} @ {v.shape}")
    return m @ v


def matmul(a, b) -> np.ndarray:
    a = as_mat(a)
    b = as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def axpy(alpha: float, x, y) -> np.ndarray:
    """``alpha * x + y`` for equally shaped arrays."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"axpy: {x.shape} vs {y.shape}")
    return alpha * x + y


def outer(a, b) -> np.ndarray:
    return np.outer(as_vec(a), as_vec(b))
