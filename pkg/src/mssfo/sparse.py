"""Sparse linear algebra used by the decoder: CSR matrices, LSMR and
Golub-Kahan singular value estimation.

The CSR container keeps its own arrays (offsets, indices, values); products
are delegated to :mod:`scipy.sparse`, everything iterative is implemented
here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import InvalidArgument


class SparseMatrix:
    """Immutable CSR matrix of shape ``(rows, cols)``."""

    def __init__(self, offsets, indices, values, shape):
        offsets = np.ascontiguousarray(offsets, dtype=np.int64)
        indices = np.ascontiguousarray(indices, dtype=np.int64)
        values = np.ascontiguousarray(values, dtype=np.float64)
        rows, cols = (int(s) for s in shape)
        if offsets.shape != (rows + 1,) or offsets[0] != 0 or offsets[-1] != indices.size:
            raise InvalidArgument("row offsets do not match the index array")
        if np.any(np.diff(offsets) < 0):
            raise InvalidArgument("row offsets must be monotone")
        if indices.size and (indices.min() < 0 or indices.max() >= cols):
            raise InvalidArgument("column index out of range")
        if values.shape != indices.shape or not np.all(np.isfinite(values)):
            raise InvalidArgument("values must be finite and aligned with indices")
        for arr in (offsets, indices, values):
            arr.setflags(write=False)
        self.offsets = offsets
        self.indices = indices
        self.values = values
        self.shape = (rows, cols)
        self._csr = sp.csr_array((values, indices, offsets), shape=self.shape)
        self._csc = None

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        csr = sp.csr_array(np.asarray(dense, dtype=np.float64))
        csr.sort_indices()
        return cls(csr.indptr, csr.indices, csr.data, csr.shape)

    @classmethod
    def from_scipy(cls, mat) -> "SparseMatrix":
        csr = sp.csr_array(mat)
        csr.sort_indices()
        return cls(csr.indptr, csr.indices, csr.data, csr.shape)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def scale_rows(self, factors) -> "SparseMatrix":
        factors = np.asarray(factors, dtype=np.float64)
        if factors.shape != (self.shape[0],):
            raise InvalidArgument("one scale factor per row is required")
        counts = np.diff(self.offsets)
        return SparseMatrix(self.offsets, self.indices, self.values * np.repeat(factors, counts), self.shape)

    def drop_rows(self, keep) -> "SparseMatrix":
        """Zero out every row where ``keep`` is false (shape is preserved)."""
        keep = np.asarray(keep, dtype=bool)
        return self.scale_rows(keep.astype(np.float64))

    def __matmul__(self, x):
        return matvec(self, x)

    @property
    def T(self):
        return _Adjoint(self)

    def _transpose_csr(self):
        if self._csc is None:
            self._csc = self._csr.T.tocsr()
        return self._csc


class _Adjoint:
    def __init__(self, mat: SparseMatrix):
        self.mat = mat
        self.shape = mat.shape[::-1]

    def __matmul__(self, y):
        return rmatvec(self.mat, y)


def matvec(A: SparseMatrix, x) -> np.ndarray:
    """``A @ x`` for a vector or a column-stacked block of vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != A.shape[1]:
        raise InvalidArgument(f"dimension mismatch: {A.shape} @ {x.shape}")
    return A._csr @ x


def rmatvec(A: SparseMatrix, y) -> np.ndarray:
    """``A.T @ y`` for a vector or a column-stacked block of vectors."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != A.shape[0]:
        raise InvalidArgument(f"dimension mismatch: {A.shape}^T @ {y.shape}")
    return A._transpose_csr() @ y


@dataclass
class SolverReport:
    x: np.ndarray
    iterations: int
    residual_norm: float
    normal_residual_norm: float
    stop_reason: str
    istop: int
    cond_estimate: float
    normal_residual_history: list[float] = field(default_factory=list, repr=False)

    @property
    def converged(self) -> bool:
        return self.stop_reason == "atol/btol"


_STOP_REASONS = {
    0: "atol/btol",  # b = 0 or A^T b = 0: x = 0 is exact
    1: "atol/btol",
    2: "atol/btol",
    3: "condition-limit",
    4: "atol/btol",
    5: "atol/btol",
    6: "condition-limit",
    7: "maxiter",
}


def _sym_ortho(a: float, b: float) -> tuple[float, float, float]:
    """Stable Givens rotation: returns (c, s, r) with [c s; -s c] [a; b] = [r; 0]."""
    if b == 0.0:
        return math.copysign(1.0, a) if a != 0 else 1.0, 0.0, abs(a)
    if a == 0.0:
        return 0.0, math.copysign(1.0, b), abs(b)
    if abs(b) > abs(a):
        tau = a / b
        s = math.copysign(1.0, b) / math.sqrt(1.0 + tau * tau)
        c = s * tau
        r = b / s
    else:
        tau = b / a
        c = math.copysign(1.0, a) / math.sqrt(1.0 + tau * tau)
        s = c * tau
        r = a / c
    return c, s, r


def lsmr(A: SparseMatrix, b, lam: float = 0.0, atol: float = 1e-10, btol: float = 1e-10,
         maxiter: int | None = None, conlim: float = 1e8) -> SolverReport:
    """Solve ``min ||A x - b||^2 + lam ||x||^2`` with LSMR (Fong & Saunders, 2011).

    The ridge term enters as the damping parameter ``sqrt(lam)``; the matrix is
    never augmented. ``maxiter`` defaults to ``4 * cols``. Hitting the
    iteration limit is reported through ``stop_reason`` rather than raised.
    """
    b = np.asarray(b, dtype=np.float64)
    rows, cols = A.shape
    if b.shape != (rows,):
        raise InvalidArgument(f"b has shape {b.shape}, expected ({rows},)")
    if lam < 0:
        raise InvalidArgument("ridge parameter must be non-negative")
    if maxiter is None:
        maxiter = 4 * cols
    damp = math.sqrt(lam)
    ctol = 1.0 / conlim if conlim > 0 else 0.0

    x = np.zeros(cols)
    u = b.copy()
    normb = float(np.linalg.norm(b))
    beta = normb
    if beta > 0:
        u /= beta
        v = rmatvec(A, u)
        alpha = float(np.linalg.norm(v))
    else:
        v = np.zeros(cols)
        alpha = 0.0
    if alpha > 0:
        v /= alpha

    zetabar = alpha * beta
    alphabar = alpha
    rho = rhobar = cbar = 1.0
    sbar = 0.0
    h = v.copy()
    hbar = np.zeros(cols)

    # ||r|| estimation state
    betadd = beta
    betad = 0.0
    rhodold = 1.0
    tautildeold = 0.0
    thetatilde = 0.0
    zeta = 0.0
    d = 0.0

    normA2 = alpha * alpha
    maxrbar = 0.0
    minrbar = 1e100
    normA = math.sqrt(normA2)
    condA = 1.0
    normr = beta
    normar = alpha * beta
    history = [normar]
    if normar == 0:
        return SolverReport(x, 0, normr, normar, _STOP_REASONS[0], 0, condA, history)

    itn = 0
    istop = 0
    while itn < maxiter:
        itn += 1
        u = matvec(A, v) - alpha * u
        beta = float(np.linalg.norm(u))
        if beta > 0:
            u /= beta
            v = rmatvec(A, u) - beta * v
            alpha = float(np.linalg.norm(v))
            if alpha > 0:
                v /= alpha

        chat, shat, alphahat = _sym_ortho(alphabar, damp)

        rhoold = rho
        c, s, rho = _sym_ortho(alphahat, beta)
        thetanew = s * alpha
        alphabar = c * alpha

        rhobarold = rhobar
        zetaold = zeta
        thetabar = sbar * rho
        rhotemp = cbar * rho
        cbar, sbar, rhobar = _sym_ortho(cbar * rho, thetanew)
        zeta = cbar * zetabar
        zetabar = -sbar * zetabar

        hbar = h - (thetabar * rho / (rhoold * rhobarold)) * hbar
        x = x + (zeta / (rho * rhobar)) * hbar
        h = v - (thetanew / rho) * h

        betaacute = chat * betadd
        betacheck = -shat * betadd
        betahat = c * betaacute
        betadd = -s * betaacute

        thetatildeold = thetatilde
        ctildeold, stildeold, rhotildeold = _sym_ortho(rhodold, thetabar)
        thetatilde = stildeold * rhobar
        rhodold = ctildeold * rhobar
        betad = -stildeold * betad + ctildeold * betahat

        tautildeold = (zetaold - thetatildeold * tautildeold) / rhotildeold
        taud = (zeta - thetatilde * tautildeold) / rhodold
        d += betacheck * betacheck
        normr = math.sqrt(d + (betad - taud) ** 2 + betadd * betadd)

        normA2 += beta * beta
        normA = math.sqrt(normA2)
        normA2 += alpha * alpha

        maxrbar = max(maxrbar, rhobarold)
        if itn > 1:
            minrbar = min(minrbar, rhobarold)
        condA = max(maxrbar, rhotemp) / min(minrbar, rhotemp)

        normar = abs(zetabar)
        history.append(normar)
        normx = float(np.linalg.norm(x))

        test1 = normr / normb
        test2 = normar / (normA * normr) if normA * normr != 0 else math.inf
        test3 = 1.0 / condA
        t1 = test1 / (1.0 + normA * normx / normb)
        rtol = btol + atol * normA * normx / normb

        if itn >= maxiter:
            istop = 7
        if 1.0 + test3 <= 1.0:
            istop = 6
        if 1.0 + test2 <= 1.0:
            istop = 5
        if 1.0 + t1 <= 1.0:
            istop = 4
        if test3 <= ctol:
            istop = 3
        if test2 <= atol:
            istop = 2
        if test1 <= rtol:
            istop = 1
        if istop:
            break

    return SolverReport(x, itn, normr, normar, _STOP_REASONS[istop], istop, condA, history)


def cg_normal(A: SparseMatrix, rhs, lam: float = 0.0, tol: float = 1e-10,
              maxiter: int | None = None) -> np.ndarray:
    """Solve ``(A^T A + lam I) Y = rhs`` for a block of right-hand sides.

    Conjugate gradients run column-wise in lockstep so that each iteration
    costs one sparse-times-dense product with ``A`` and one with ``A^T``.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    squeeze = rhs.ndim == 1
    if squeeze:
        rhs = rhs[:, None]
    cols = A.shape[1]
    if rhs.shape[0] != cols:
        raise InvalidArgument("right-hand side must have one row per column of A")
    if maxiter is None:
        maxiter = 4 * cols

    def normal(Y):
        return rmatvec(A, matvec(A, Y)) + lam * Y

    Y = np.zeros_like(rhs)
    R = rhs.copy()
    P = R.copy()
    rr = np.einsum("ij,ij->j", R, R)
    stop = (tol * np.linalg.norm(rhs, axis=0)) ** 2
    for _ in range(maxiter):
        active = rr > stop
        if not active.any():
            break
        Q = normal(P)
        pq = np.einsum("ij,ij->j", P, Q)
        a = np.where(active, rr / np.where(pq > 0, pq, 1.0), 0.0)
        Y += P * a
        R -= Q * a
        rr_new = np.einsum("ij,ij->j", R, R)
        P = R + P * np.where(active, rr_new / np.where(rr > 0, rr, 1.0), 0.0)
        rr = rr_new
    return Y[:, 0] if squeeze else Y


@dataclass(frozen=True)
class SingularValueEstimate:
    sigma_max: float
    sigma_min: float
    iterations: int
    converged: bool
    rank_deficient: bool

    @property
    def kappa(self) -> float:
        if self.rank_deficient or self.sigma_min <= 0:
            return math.inf
        return self.sigma_max / self.sigma_min


def extreme_singular_values(A: SparseMatrix, budget: int | None = None, tol: float = 1e-4,
                            seed: int = 0, reorth: bool | None = None,
                            stop_above: float | None = None) -> SingularValueEstimate:
    """Estimate the largest and smallest singular values of a tall matrix.

    Runs Golub-Kahan bidiagonalization from a seeded random start. The
    singular values of the bidiagonal ``B_s`` interlace those of ``A``, so
    ``cond(B_s)`` never exceeds ``cond(A)``; when ``stop_above`` is given the
    run ends as soon as ``cond(B_s)`` passes it. Otherwise it stops when both
    extreme Ritz triplets have relative residual below ``tol`` or the budget
    (``min(2 * cols, 500)`` by default) is spent.
    """
    rows, cols = A.shape
    if budget is None:
        budget = min(2 * cols, 500)
    budget = max(1, min(budget, cols))
    if reorth is None:
        reorth = cols <= 2000
    rng = np.random.default_rng(seed)

    V = np.zeros((budget + 1, cols))
    U = np.zeros((budget, rows))
    alphas = np.zeros(budget)
    betas = np.zeros(budget)

    v = rng.standard_normal(cols)
    v /= np.linalg.norm(v)
    V[0] = v
    u = matvec(A, v)
    s = 0
    sig_max = sig_min = 0.0
    converged = False
    check_every = 1 if budget <= 50 else 5
    while s < budget:
        if s > 0:
            u = matvec(A, V[s]) - betas[s - 1] * U[s - 1]
            if reorth:
                u -= U[:s].T @ (U[:s] @ u)
        a = float(np.linalg.norm(u))
        if a <= 1e-14 * max(sig_max, 1e-300) and s > 0:
            # Krylov space is exhausted: remaining directions are in the null space
            alphas[s] = 0.0
            s += 1
            sig_min = 0.0
            break
        U[s] = u / a
        alphas[s] = a
        w = rmatvec(A, U[s]) - a * V[s]
        if reorth:
            w -= V[: s + 1].T @ (V[: s + 1] @ w)
        b = float(np.linalg.norm(w))
        betas[s] = b
        s += 1
        exhausted = b <= 1e-12 * a or s == cols
        if exhausted or s % check_every == 0 or s == budget:
            B = np.diag(alphas[:s]) + np.diag(betas[: s - 1], 1)
            Y, sv, _ = np.linalg.svd(B)
            sig_max, sig_min = float(sv[0]), float(sv[-1])
            if stop_above is not None and sig_min > 0 and sig_max / sig_min > stop_above:
                break
            if sig_min <= 0:
                break
            res_max = b * abs(Y[-1, 0])
            res_min = b * abs(Y[-1, -1])
            if exhausted or (res_max <= tol * sig_max and res_min <= tol * sig_min):
                converged = True
                break
        if b == 0:
            break
        V[s] = w / b

    rank_deficient = sig_min <= 1e-12 * sig_max
    return SingularValueEstimate(sig_max, sig_min, s, converged, rank_deficient)


def cond(A: SparseMatrix, budget: int | None = None, **kwargs) -> float:
    """Spectral condition number ``sigma_max / sigma_min`` (``inf`` when rank deficient)."""
    return extreme_singular_values(A, budget=budget, **kwargs).kappa
