"""Small dense linear-algebra layer used by every other module.

Matrices are plain 2-D ``numpy.float64`` arrays with token vectors as rows.
The arithmetic itself is delegated to numpy; what lives here is the
operation counting, the pivoted LU inverse with an explicit singularity
test, and the right inverse for wide projection matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PIVOT_RATIO_LIMIT = 1e-12


class SingularMatrixError(ValueError):
    """Raised when LU factorisation meets a pivot too small to trust."""

    def __init__(self, message: str, pivot_ratio: float):
        super().__init__(message)
        self.pivot_ratio = pivot_ratio


@dataclass
class OpCounter:
    """Tally of two-operand multiplies and adds.

    A matmul of shapes (m, n) x (n, p) adds ``m*n*p`` muls and
    ``m*p*(n-1)`` adds, i.e. ``m*p*(2n-1)`` ops in total.
    """

    muls: int = 0
    adds: int = 0
    dots: int = 0

    @property
    def ops(self) -> int:
        return self.muls + self.adds

    def count_matmul(self, m: int, n: int, p: int) -> None:
        self.muls += m * n * p
        self.adds += m * p * (n - 1)
        self.dots += m * p

    def merge(self, other: "OpCounter") -> None:
        self.muls += other.muls
        self.adds += other.adds
        self.dots += other.dots

    def snapshot(self) -> "OpCounter":
        return OpCounter(self.muls, self.adds, self.dots)


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Matrix product ``a @ b``, optionally counted into ``counter``."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if counter is not None:
        counter.count_matmul(a.shape[0], a.shape[1], b.shape[1])
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def softmax_row(scores, scale: float = 1.0) -> np.ndarray:
    """Numerically stable softmax of ``scale * scores``.

    Entries equal to ``-inf`` (masked positions) get probability 0; at least
    one entry must be finite.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("softmax of an empty vector")
    if scale <= 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    z = s * scale
    top = np.max(z, axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise ValueError("softmax row has no finite entry")
    with np.errstate(over="ignore"):  # finite - finite can overflow to -inf; exp gives 0
        w = np.exp(z - top)
    return w / np.sum(w, axis=-1, keepdims=True)


def lu_factor(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Doolittle LU with partial pivoting.

    Returns ``(lu, perm)`` where ``lu`` packs unit-lower L below the
    diagonal and U on and above it, and ``w[perm] == L @ U``.
    """
    a = as_matrix(w).copy()
    n, m = a.shape
    if n != m:
        raise ValueError(f"LU needs a square matrix, got {a.shape}")
    perm = np.arange(n)
    pivots = np.empty(n)
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if p != k:
            a[[k, p]] = a[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        pivots[k] = a[k, k]
        if a[k, k] != 0.0:
            a[k + 1:, k] /= a[k, k]
            a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
    mags = np.abs(pivots)
    largest = mags.max() if n else 0.0
    ratio = mags.min() / largest if largest > 0 else 0.0
    if n and ratio <= PIVOT_RATIO_LIMIT:
        raise SingularMatrixError(
            f"matrix is singular or ill-conditioned: smallest/largest pivot = {ratio:.3e}",
            pivot_ratio=ratio,
        )
    return a, perm


def lu_solve(lu: np.ndarray, perm: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` for every column of ``b`` given ``lu_factor(A)``."""
    n = lu.shape[0]
    x = as_matrix(b)[perm].copy()
    for i in range(1, n):
        x[i] -= lu[i, :i] @ x[:i]
    for i in range(n - 1, -1, -1):
        x[i] -= lu[i, i + 1:] @ x[i + 1:]
        x[i] /= lu[i, i]
    return x


def invert_square(w: np.ndarray) -> np.ndarray:
    """Inverse of a square matrix via pivoted LU.

    Raises SingularMatrixError when the smallest pivot is within 1e-12 of
    the largest in magnitude.
    """
    lu, perm = lu_factor(w)
    return lu_solve(lu, perm, np.eye(lu.shape[0]))


def right_inverse(w: np.ndarray) -> np.ndarray:
    """Right inverse ``w.T @ inv(w @ w.T)`` of a wide ``d x e`` matrix (e >= d)."""
    w = as_matrix(w)
    d, e = w.shape
    if e < d:
        raise ValueError(f"right inverse needs cols >= rows, got {w.shape}")
    return w.T @ invert_square(w @ w.T)


def condition_estimate(w: np.ndarray, w_inv: np.ndarray | None = None) -> float:
    """1-norm condition number ``||w||_1 * ||w^-1||_1``."""
    w = as_matrix(w)
    if w_inv is None:
        w_inv = invert_square(w)
    return float(np.linalg.norm(w, 1) * np.linalg.norm(w_inv, 1))


def allclose(a, b, rtol: float = 1e-5, atol: float = 1e-8) -> bool:
    """True iff ``|a - b| <= atol + rtol * |b|`` everywhere."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"allclose shape mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(np.abs(a - b) <= atol + rtol * np.abs(b)))


def max_abs_diff(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def make_rng(*keys: int) -> np.random.Generator:
    """PCG64 generator keyed by a tuple of integers (seed, sub-seeds...)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))
