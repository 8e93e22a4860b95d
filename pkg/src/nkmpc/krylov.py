"""Matrix-free linear algebra for the Newton refinements.

The Jacobian of the residual F is never materialized: directional
derivatives are taken by a forward finite difference of F around a frozen
base point.  Linear systems are solved by full-memory GMRES with optional
left preconditioning; a dense Gaussian-elimination solve over probed
columns serves as a test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .ocp import HorizonSolution, ModelDefinition, evaluate_F

Array = np.ndarray

DENSE_DIM_LIMIT = 2000


class OperatorDivergence(RuntimeError):
    """Finite-difference directional derivative produced non-finite values."""


class SingularMatrix(RuntimeError):
    """Elimination hit a pivot too small to proceed."""

    def __init__(self, pivot: float):
        super().__init__(f"numerically singular matrix, pivot magnitude {pivot:.3e}")
        self.pivot = pivot


class FdOperator:
    """Forward-difference approximation of the Jacobian-vector product.

    apply(V) = (F(U0 + h*V) - F(U0)) / h with the base residual F(U0)
    evaluated once and cached.
    """

    def __init__(self, model: ModelDefinition, U: HorizonSolution,
                 x_t: Array, t: float, h: float = 1e-8):
        if h <= 0:
            raise ValueError("finite-difference step h must be positive")
        self.model = model
        self.base = U.copy()
        self.x_t = np.asarray(x_t, dtype=float)
        self.t = t
        self.h = h
        self.base_residual = evaluate_F(model, self.base, self.x_t, t)
        if not np.all(np.isfinite(self.base_residual)):
            raise OperatorDivergence("non-finite residual at the base point")

    @property
    def dim(self) -> int:
        return self.base.dim

    def __call__(self, V: Array) -> Array:
        shifted = self.base.updated(self.h * np.asarray(V, dtype=float))
        out = (evaluate_F(self.model, shifted, self.x_t, self.t)
               - self.base_residual) / self.h
        if not np.all(np.isfinite(out)):
            raise OperatorDivergence("non-finite directional derivative")
        return out


@dataclass
class GmresReport:
    iterations: int
    residual_norm: float
    converged: bool
    basis_size: int
    residual_norms: list = field(default_factory=list)


def gmres(op: Callable[[Array], Array], b: Array, tol: float,
          max_iter: Optional[int] = None,
          precond: Optional[Callable[[Array], Array]] = None
          ) -> tuple[Array, GmresReport]:
    """Full-memory GMRES for op(x) = b, starting from x = 0.

    With a preconditioner P, solves P op(x) = P b and measures convergence
    in the preconditioned residual norm (absolute tolerance ``tol``).
    Returns the best iterate with ``converged=False`` if ``max_iter`` is
    exhausted; an Arnoldi breakdown returns the current iterate with the
    convergence flag set by the residual test.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=float)
    m = b.shape[0]
    if max_iter is None:
        max_iter = m
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    apply_p = precond if precond is not None else (lambda v: v)

    r0 = apply_p(b)
    beta = float(np.linalg.norm(r0))
    history = [beta]
    if beta <= tol:
        return np.zeros(m), GmresReport(0, beta, True, 0, history)

    V = np.zeros((m, max_iter + 1))
    H = np.zeros((max_iter + 1, max_iter))
    cs = np.zeros(max_iter)
    sn = np.zeros(max_iter)
    g = np.zeros(max_iter + 1)
    V[:, 0] = r0 / beta
    g[0] = beta

    res = beta
    k_used = 0
    for k in range(max_iter):
        w = apply_p(op(V[:, k]))
        for i in range(k + 1):  # modified Gram-Schmidt
            H[i, k] = V[:, i] @ w
            w = w - H[i, k] * V[:, i]
        hnext = float(np.linalg.norm(w))
        H[k + 1, k] = hnext
        breakdown = hnext <= 1e-14 * beta
        if not breakdown:
            V[:, k + 1] = w / hnext
        for i in range(k):
            hi = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
            H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
            H[i, k] = hi
        denom = float(np.hypot(H[k, k], H[k + 1, k]))
        if denom == 0.0:
            cs[k], sn[k] = 1.0, 0.0
        else:
            cs[k] = H[k, k] / denom
            sn[k] = H[k + 1, k] / denom
        H[k, k] = denom
        H[k + 1, k] = 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]
        res = abs(g[k + 1])
        history.append(res)
        k_used = k + 1
        if res <= tol or breakdown:
            break

    y = np.linalg.solve(H[:k_used, :k_used], g[:k_used])
    x = V[:, :k_used] @ y
    return x, GmresReport(k_used, res, res <= tol, k_used, history)


def materialize(op: Callable[[Array], Array], dim: int) -> Array:
    """Dense matrix of the operator, one unit-vector application per column."""
    A = np.empty((dim, dim))
    e = np.zeros(dim)
    for k in range(dim):
        e[k] = 1.0
        A[:, k] = op(e)
        e[k] = 0.0
    return A


def dense_direct_solve(op: Callable[[Array], Array], b: Array) -> Array:
    """Direct-method oracle: probe all columns, Gaussian elimination.

    Uses partial pivoting; raises SingularMatrix carrying the offending
    pivot magnitude.  Guarded to dimensions <= 2000.
    """
    b = np.asarray(b, dtype=float)
    m = b.shape[0]
    if m > DENSE_DIM_LIMIT:
        raise ValueError(f"dimension {m} exceeds dense-solve guard {DENSE_DIM_LIMIT}")
    A = materialize(op, m)
    rhs = b.copy()
    thresh = m * np.finfo(float).eps * max(np.max(np.abs(A)), 1e-300)
    for col in range(m):
        piv_row = col + int(np.argmax(np.abs(A[col:, col])))
        piv = A[piv_row, col]
        if abs(piv) <= thresh:
            raise SingularMatrix(abs(piv))
        if piv_row != col:
            A[[col, piv_row]] = A[[piv_row, col]]
            rhs[[col, piv_row]] = rhs[[piv_row, col]]
        factors = A[col + 1:, col] / piv
        A[col + 1:, col + 1:] -= np.outer(factors, A[col, col + 1:])
        rhs[col + 1:] -= factors * rhs[col]
    x = np.empty(m)
    for row in range(m - 1, -1, -1):
        x[row] = (rhs[row] - A[row, row + 1:] @ x[row + 1:]) / A[row, row]
    return x
