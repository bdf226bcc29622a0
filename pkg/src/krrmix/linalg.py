"""Dense linear-algebra kernels underlying every token mixer.

All functions take plain numpy arrays whose last two axes are the matrix
axes; any leading axes are independent batch slices. Nothing here records
gradients -- the autograd layer wraps these kernels with backward rules.

Masked score entries are handled with an additive -inf sentinel before the
softmax and come out as exact zeros, so a causally masked similarity matrix
is lower triangular by construction and can go straight into the
forward-substitution solver.
"""

from __future__ import annotations

import numpy as np

from .errors import FullyMaskedRow, ShapeMismatch, SingularDiagonal, SingularMatrix

# Numerical floors. The regularizer lambda defaults to 1e-10, so legitimate
# systems sit well above all three.
DIAG_FLOOR = 1e-12
PIVOT_FLOOR = 1e-12
NORM_FLOOR = 1e-12

# Acceptable ||A @ inv(A) - I||_max for the explicit-inverse oracle (64-bit).
INVERSE_RESIDUAL_TOL = 1e-6

_TRIL_CACHE: dict[int, np.ndarray] = {}


class CausalMask:
    """Autoregressive constraint: position i may attend to positions j <= i.

    Every row allows at least the diagonal, so a causally masked softmax can
    never produce a fully masked row.
    """

    __slots__ = ("n",)

    def __init__(self, n: int):
        if n < 1:
            raise ShapeMismatch(f"causal mask needs n >= 1, got {n}")
        self.n = int(n)

    def allowed(self) -> np.ndarray:
        """Boolean (n, n) matrix, True where attention is allowed."""
        m = _TRIL_CACHE.get(self.n)
        if m is None:
            m = np.tril(np.ones((self.n, self.n), dtype=bool))
            m.setflags(write=False)
            _TRIL_CACHE[self.n] = m
        return m

    def __repr__(self):
        return f"CausalMask(n={self.n})"


def resolve_mask(mask, n: int) -> np.ndarray | None:
    """Normalize a mask argument to a boolean allowed-matrix (or None)."""
    if mask is None:
        return None
    if isinstance(mask, CausalMask):
        if mask.n != n:
            raise ShapeMismatch(f"mask is for n={mask.n}, scores have n={n}")
        return mask.allowed()
    m = np.asarray(mask, dtype=bool)
    if m.shape[-1] != n:
        raise ShapeMismatch(f"mask last axis {m.shape[-1]} != scores axis {n}")
    return m


def masked_softmax(scores: np.ndarray, mask=None) -> np.ndarray:
    """Row-wise softmax over allowed entries; masked entries are exact 0.

    Stabilized by subtracting each row's maximum allowed score before
    exponentiation. Raises FullyMaskedRow if a row allows nothing.
    """
    scores = np.asarray(scores)
    allowed = resolve_mask(mask, scores.shape[-1])
    if allowed is None:
        x = scores
    else:
        if not np.all(np.any(allowed, axis=-1)):
            raise FullyMaskedRow("mask leaves at least one row with no allowed entry")
        x = np.where(allowed, scores, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)  # exp(-inf) == 0.0 exactly at masked entries
    return e / np.sum(e, axis=-1, keepdims=True)


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Divide each row by max(||row||_2, NORM_FLOOR); zero rows stay zero."""
    m = np.asarray(m)
    norms = np.sqrt(np.sum(m * m, axis=-1, keepdims=True))
    return m / np.maximum(norms, NORM_FLOOR)


def _check_solve_shapes(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeMismatch(f"{what}: matrix must be square, got {a.shape}")
    if b.ndim < 2 or b.shape[-2] != a.shape[-1]:
        raise ShapeMismatch(f"{what}: rhs rows {b.shape} do not match matrix {a.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"{what}: batch shapes differ, {a.shape} vs {b.shape}")


def solve_lower_triangular(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward substitution for L @ X = B, batched over leading axes.

    Strictly-upper entries of L are never read. Cost is O(n^2 d) per slice.
    """
    l = np.asarray(l)
    b = np.asarray(b)
    _check_solve_shapes(l, b, "solve_lower_triangular")
    diag = np.diagonal(l, axis1=-2, axis2=-1)
    if np.min(np.abs(diag)) < DIAG_FLOOR:
        raise SingularDiagonal(f"|diagonal| < {DIAG_FLOOR}")
    n = l.shape[-1]
    x = np.empty_like(b, dtype=np.result_type(l, b))
    x[..., 0, :] = b[..., 0, :] / diag[..., 0, None]
    for i in range(1, n):
        acc = np.matmul(l[..., i : i + 1, :i], x[..., :i, :])
        x[..., i, :] = (b[..., i, :] - acc[..., 0, :]) / diag[..., i, None]
    return x


def solve_upper_triangular(u: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Back substitution for U @ X = B (used by the solve backward rules)."""
    u = np.asarray(u)
    b = np.asarray(b)
    _check_solve_shapes(u, b, "solve_upper_triangular")
    diag = np.diagonal(u, axis1=-2, axis2=-1)
    if np.min(np.abs(diag)) < DIAG_FLOOR:
        raise SingularDiagonal(f"|diagonal| < {DIAG_FLOOR}")
    n = u.shape[-1]
    x = np.empty_like(b, dtype=np.result_type(u, b))
    x[..., n - 1, :] = b[..., n - 1, :] / diag[..., n - 1, None]
    for i in range(n - 2, -1, -1):
        acc = np.matmul(u[..., i : i + 1, i + 1 :], x[..., i + 1 :, :])
        x[..., i, :] = (b[..., i, :] - acc[..., 0, :]) / diag[..., i, None]
    return x


def solve_general(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A @ X = B by LU factorization with partial pivoting.

    Batched over leading axes; each slice picks its own pivots. Raises
    SingularMatrix when a pivot magnitude falls below PIVOT_FLOOR (lambda too
    small, or a degenerate kernel matrix).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    _check_solve_shapes(a, b, "solve_general")
    n = a.shape[-1]
    d = b.shape[-1]
    batch = a.shape[:-2]
    dtype = np.result_type(a, b)
    s = int(np.prod(batch)) if batch else 1
    af = a.reshape(s, n, n).astype(dtype, copy=True)
    xf = b.reshape(s, n, d).astype(dtype, copy=True)
    rows = np.arange(s)
    for k in range(n):
        piv = np.argmax(np.abs(af[:, k:, k]), axis=1) + k
        need = piv != k
        if np.any(need):
            tmp = af[rows, k, :].copy()
            af[rows, k, :] = af[rows, piv, :]
            af[rows, piv, :] = tmp
            tmp = xf[rows, k, :].copy()
            xf[rows, k, :] = xf[rows, piv, :]
            xf[rows, piv, :] = tmp
        pivots = af[:, k, k]
        if np.min(np.abs(pivots)) < PIVOT_FLOOR:
            raise SingularMatrix(f"pivot magnitude < {PIVOT_FLOOR} at column {k}")
        if k + 1 < n:
            f = af[:, k + 1 :, k] / pivots[:, None]
            af[:, k + 1 :, k + 1 :] -= f[:, :, None] * af[:, k, None, k + 1 :]
            xf[:, k + 1 :, :] -= f[:, :, None] * xf[:, k, None, :]
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            xf[:, i, :] -= np.matmul(af[:, i : i + 1, i + 1 :], xf[:, i + 1 :, :])[:, 0, :]
        xf[:, i, :] /= af[:, i, i, None]
    return xf.reshape(batch + (n, d))


def explicit_inverse(a: np.ndarray, tol: float = INVERSE_RESIDUAL_TOL) -> np.ndarray:
    """Literal matrix inverse, for test oracles only (LAPACK-backed).

    Kept independent of the hand-written solvers above so inverse-vs-solve
    cross-checks exercise two genuinely different code paths. Verifies
    ||A @ inv - I||_max <= tol and raises SingularMatrix otherwise.
    """
    a = np.asarray(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeMismatch(f"explicit_inverse: matrix must be square, got {a.shape}")
    try:
        inv = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(str(exc)) from exc
    eye = np.eye(a.shape[-1], dtype=a.dtype)
    resid = np.max(np.abs(np.matmul(a, inv) - eye))
    if not np.isfinite(resid) or resid > tol:
        raise SingularMatrix(f"inverse residual {resid!r} exceeds {tol}")
    return inv
