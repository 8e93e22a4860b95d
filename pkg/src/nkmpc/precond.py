"""Sparse symmetric preconditioner with O(N) factorization.

M = [[M11, M12], [M12^T, M22]] where M11 is block diagonal with one small
symmetric block per horizon stage (built analytically from the stage rows)
and the dense border [M12; M22] has l = n_psi + 1 columns, probed with the
finite-difference operator on the trailing unit vectors.  The block LU
M = [[I, 0], [M21 M11^-1, I]] [[M11, M12], [0, S22]] with
S22 = M22 - M21 M11^-1 M12 makes setup, factorization and application all
linear in the horizon length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .krylov import FdOperator
from .ocp import HorizonSolution, ModelDefinition

Array = np.ndarray

DET_GUARD = 1e-14


class NearSingularBlock(RuntimeError):
    """A stage block's determinant fell below the assembly guard."""

    def __init__(self, stage: int, det: float):
        super().__init__(f"near-singular stage block {stage}, |det| = {abs(det):.3e}")
        self.stage = stage
        self.det = det


class SingularSchur(RuntimeError):
    """Degenerate Schur complement (degenerate horizon solution)."""


@dataclass
class SparsePreconditioner:
    """Block-diagonal stage blocks plus an l-column dense border."""

    N: int
    blocks: Array        # (N, s, s), symmetric
    border: Array        # (N*s, l) = M12
    corner: Array        # (l, l) = M22, symmetrized

    @property
    def stride(self) -> int:
        return self.blocks.shape[1]

    @property
    def width(self) -> int:
        return self.corner.shape[0]

    @property
    def dim(self) -> int:
        return self.N * self.stride + self.width

    def to_dense(self) -> Array:
        """Dense matrix, for small-N test oracles only."""
        n = self.dim
        s = self.stride
        M = np.zeros((n, n))
        for i in range(self.N):
            M[i * s:(i + 1) * s, i * s:(i + 1) * s] = self.blocks[i]
        M[: self.N * s, self.N * s:] = self.border
        M[self.N * s:, : self.N * s] = self.border.T
        M[self.N * s:, self.N * s:] = self.corner
        return M


@dataclass
class PreconditionerFactors:
    """Block LU factors: per-block inverses, the strip M11^-1 M12, Schur LU."""

    N: int
    block_inv: Array     # (N, s, s)
    strip: Array         # (N, s, l) = M11^-1 M12, blockwise
    schur: Array         # (l, l)
    schur_inv: Array     # (l, l)

    @property
    def stride(self) -> int:
        return self.block_inv.shape[1]

    @property
    def width(self) -> int:
        return self.schur.shape[0]

    def float_count(self) -> int:
        """Stored floats; linear in N by construction."""
        return int(self.block_inv.size + self.strip.size
                   + self.schur.size + self.schur_inv.size)


def _invert_blocks_3x3(B: Array) -> tuple[Array, Array]:
    """Vectorized cofactor inversion of a stack of 3x3 blocks."""
    a, b, c = B[:, 0, 0], B[:, 0, 1], B[:, 0, 2]
    d, e, f = B[:, 1, 0], B[:, 1, 1], B[:, 1, 2]
    g, h, i = B[:, 2, 0], B[:, 2, 1], B[:, 2, 2]
    A00 = e * i - f * h
    A01 = c * h - b * i
    A02 = b * f - c * e
    A10 = f * g - d * i
    A11 = a * i - c * g
    A12 = c * d - a * f
    A20 = d * h - e * g
    A21 = b * g - a * h
    A22 = a * e - b * d
    det = a * A00 + b * A10 + c * A20
    inv = np.empty_like(B)
    inv[:, 0, 0], inv[:, 0, 1], inv[:, 0, 2] = A00, A01, A02
    inv[:, 1, 0], inv[:, 1, 1], inv[:, 1, 2] = A10, A11, A12
    inv[:, 2, 0], inv[:, 2, 1], inv[:, 2, 2] = A20, A21, A22
    inv /= det[:, None, None]
    return inv, det


def block_determinants(M: SparsePreconditioner) -> Array:
    return np.linalg.det(M.blocks)


def assemble(model: ModelDefinition, U: HorizonSolution, x_t: Array,
             t: float, op: FdOperator) -> SparsePreconditioner:
    """Analytic stage blocks plus FD-probed border columns.

    The border's first N*s rows give M12; the trailing l rows give M22,
    symmetrized by averaging.  Blocks with |det| below the guard raise
    NearSingularBlock.
    """
    N = U.N
    dtau = 1.0 / N
    blocks = np.asarray(model.stage_blocks(U.u, U.ud, U.mu, U.p, dtau))
    dets = np.linalg.det(blocks)
    bad = np.flatnonzero(np.abs(dets) < DET_GUARD)
    if bad.size:
        raise NearSingularBlock(int(bad[0]), float(dets[bad[0]]))

    m = op.dim
    s = model.stage_stride
    l = model.border_width
    ns = N * s
    cols = np.empty((m, l))
    e = np.zeros(m)
    for j in range(l):
        e[ns + j] = 1.0
        cols[:, j] = op(e)
        e[ns + j] = 0.0
    corner = cols[ns:, :]
    return SparsePreconditioner(N=N, blocks=blocks, border=cols[:ns, :],
                                corner=0.5 * (corner + corner.T))


def factorize(M: SparsePreconditioner) -> PreconditionerFactors:
    """O(N) block LU: invert each stage block, form the strip and Schur LU."""
    s = M.stride
    if s == 3:
        block_inv, dets = _invert_blocks_3x3(M.blocks)
    else:
        dets = np.linalg.det(M.blocks)
        block_inv = np.linalg.inv(M.blocks)
    bad = np.flatnonzero(np.abs(dets) < DET_GUARD)
    if bad.size:
        raise NearSingularBlock(int(bad[0]), float(dets[bad[0]]))

    l = M.width
    border_blocks = M.border.reshape(M.N, s, l)
    strip = np.einsum("nij,njl->nil", block_inv, border_blocks)
    schur = M.corner - np.einsum("nsl,nsk->lk", border_blocks, strip)
    det_s = np.linalg.det(schur)
    if not np.isfinite(det_s) or abs(det_s) < DET_GUARD:
        raise SingularSchur(f"Schur complement determinant {det_s:.3e}")
    return PreconditionerFactors(N=M.N, block_inv=block_inv, strip=strip,
                                 schur=schur, schur_inv=np.linalg.inv(schur))


def apply_inverse(factors: PreconditionerFactors, r: Array) -> Array:
    """M^-1 r via forward/back substitution through the block LU; O(N)."""
    N, s, l = factors.N, factors.stride, factors.width
    r = np.asarray(r, dtype=float)
    if r.shape != (N * s + l,):
        raise ValueError(f"vector length {r.shape} does not match {(N * s + l,)}")
    r1 = r[: N * s].reshape(N, s)
    r2 = r[N * s:]
    y1 = np.einsum("nij,nj->ni", factors.block_inv, r1)       # M11^-1 r1
    z2 = r2 - np.einsum("nsl,ns->l", factors.strip, r1)        # r2 - M21 M11^-1 r1
    x2 = factors.schur_inv @ z2
    x1 = y1 - factors.strip @ x2
    return np.concatenate([x1.ravel(), x2])
