"""Server-side decoding for ModularSubsetSelection.

Reports are aggregated into per-block residue counts, debiased block by
block, and combined through a variance-weighted least-squares solve over the
stacked residue design. The analytic error model lives here as well.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import InvalidArgument, ModuliSet, MssReport, RankDeficient, SSBlockParams, check_histogram, ss_params
from .sparse import SolverReport, SparseMatrix, cg_normal, lsmr, matvec, rmatvec


@dataclass(frozen=True)
class WeightedDesign:
    """Stacked residue-indicator design, optionally row-scaled.

    ``row_starts[j]`` is the first row of block ``j``; ``sqrt_w[j]`` the
    scale applied to every row of that block (1 for the unweighted design).
    """

    A: SparseMatrix
    moduli: ModuliSet
    row_starts: tuple[int, ...]
    sqrt_w: np.ndarray

    @property
    def row_weights(self) -> np.ndarray:
        return np.repeat(self.sqrt_w, self.moduli.moduli)

    def block_rows(self, j: int) -> slice:
        return slice(self.row_starts[j], self.row_starts[j] + self.moduli.moduli[j])


def build_design(moduli: ModuliSet) -> WeightedDesign:
    """Unweighted design ``A[(j, r), x] = 1{x mod m_j = r}``.

    Rows are ordered block by block, residues ascending within a block;
    within a row the column indices are ascending.
    """
    k = moduli.k
    xs = np.arange(k, dtype=np.int64)
    row_starts = np.concatenate([[0], np.cumsum(moduli.moduli)[:-1]]).astype(np.int64)
    # one nonzero per (block, column): sort by global row, stable on x
    rows = np.concatenate([start + xs % m for start, m in zip(row_starts, moduli.moduli)])
    cols = np.tile(xs, moduli.ell)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    offsets = np.zeros(moduli.total_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=moduli.total_rows), out=offsets[1:])
    A = SparseMatrix(offsets, cols, np.ones(cols.size), (moduli.total_rows, k))
    return WeightedDesign(A, moduli, tuple(int(s) for s in row_starts), np.ones(moduli.ell))


def variance_weights(moduli: ModuliSet, block_counts) -> np.ndarray:
    """Per-block ``sqrt(w_j) = (p_j - q_j) / sqrt(pi_j (1 - pi_j) / n_j)``.

    Uses the prior-free marginal ``pi_j = q_j + (p_j - q_j) / m_j``. Blocks
    with no reports get weight 0.
    """
    n = np.asarray(block_counts, dtype=np.float64)
    if n.shape != (moduli.ell,):
        raise InvalidArgument("one report count per block is required")
    if np.any(n < 0):
        raise InvalidArgument("block counts must be non-negative")
    if not np.any(n > 0):
        raise InvalidArgument("no reports in any block")
    out = np.zeros(moduli.ell)
    for j, blk in enumerate(moduli.blocks):
        if n[j] > 0:
            out[j] = (blk.p - blk.q) / math.sqrt(blk.pi * (1.0 - blk.pi) / n[j])
    return out


def apply_weights(design: WeightedDesign, block_counts) -> WeightedDesign:
    """Scale the rows of each block by its variance-optimal weight."""
    sqrt_w = variance_weights(design.moduli, block_counts)
    scale = sqrt_w / np.where(design.sqrt_w > 0, design.sqrt_w, 1.0)
    A = design.A.scale_rows(np.repeat(scale, design.moduli.moduli))
    return WeightedDesign(A, design.moduli, design.row_starts, sqrt_w)


def planning_design(moduli: ModuliSet) -> WeightedDesign:
    """Weighted design with ``n_j = 1`` in every block (data-independent)."""
    return apply_weights(build_design(moduli), np.ones(moduli.ell))


@dataclass
class BlockCounts:
    """Residue membership counts per block and reports per block."""

    counts: list[np.ndarray]
    reports: np.ndarray

    @classmethod
    def zeros(cls, moduli: ModuliSet) -> "BlockCounts":
        return cls([np.zeros(m, dtype=np.int64) for m in moduli.moduli], np.zeros(moduli.ell, dtype=np.int64))

    @property
    def n(self) -> int:
        return int(self.reports.sum())

    def __add__(self, other: "BlockCounts") -> "BlockCounts":
        return BlockCounts([a + b for a, b in zip(self.counts, other.counts)], self.reports + other.reports)


def aggregate(reports: Iterable[MssReport], moduli: ModuliSet) -> BlockCounts:
    """Single pass over report objects."""
    out = BlockCounts.zeros(moduli)
    for rep in reports:
        if not 0 <= rep.j < moduli.ell:
            raise InvalidArgument(f"malformed report: block {rep.j}")
        blk = moduli.blocks[rep.j]
        if len(rep.z) != blk.omega or len(set(rep.z)) != blk.omega:
            raise InvalidArgument(f"malformed report: subset {rep.z} must hold {blk.omega} distinct residues")
        c = out.counts[rep.j]
        for a in rep.z:
            if not 0 <= a < blk.m:
                raise InvalidArgument(f"malformed report: residue {a} outside [0, {blk.m})")
            c[a] += 1
        out.reports[rep.j] += 1
    return out


def aggregate_batch(blocks: np.ndarray, subsets: Sequence[np.ndarray], moduli: ModuliSet) -> BlockCounts:
    """Vectorized aggregation of a batch produced by ``mss_perturb_batch``.

    ``subsets[j]`` is an ``(n_j, omega_j)`` array holding the subsets of the
    users whose block index is ``j``.
    """
    reports = np.bincount(blocks, minlength=moduli.ell).astype(np.int64)
    counts = []
    for j, m in enumerate(moduli.moduli):
        z = subsets[j]
        if z.shape[0] != reports[j] or (z.size and z.shape[1] != moduli.blocks[j].omega):
            raise InvalidArgument(f"malformed batch for block {j}")
        counts.append(np.bincount(z.ravel(), minlength=m).astype(np.int64))
    return BlockCounts(counts, reports)


def debias(counts: BlockCounts, moduli: ModuliSet) -> np.ndarray:
    """Stacked observation vector ``s_j = (c_j / n_j - q_j) / (p_j - q_j)``.

    Blocks without reports contribute zeros (their rows carry weight 0).
    """
    parts = []
    for j, blk in enumerate(moduli.blocks):
        nj = counts.reports[j]
        if nj > 0:
            parts.append((counts.counts[j] / nj - blk.q) / (blk.p - blk.q))
        else:
            parts.append(np.zeros(blk.m))
    if counts.n == 0:
        raise InvalidArgument("no reports to debias")
    return np.concatenate(parts)


def default_lambda(eps: float) -> float:
    return 1.0 / eps**2


def estimate(design: WeightedDesign, s, lam: float = 0.0, atol: float = 1e-10, btol: float = 1e-10,
             maxiter: int | None = None) -> tuple[np.ndarray, SolverReport]:
    """Weighted ridge least squares ``argmin ||A_w z - w^(1/2) s||^2 + lam ||z||^2``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (design.A.shape[0],):
        raise InvalidArgument("observation vector must have one entry per design row")
    report = lsmr(design.A, design.row_weights * s, lam=lam, atol=atol, btol=btol, maxiter=maxiter)
    return report.x, report


@dataclass
class DecodeResult:
    f_hat: np.ndarray
    solver: SolverReport
    design: WeightedDesign
    counts: BlockCounts
    decode_ms: float


def decode(counts: BlockCounts, moduli: ModuliSet, lam: float = 0.0,
           design: WeightedDesign | None = None) -> DecodeResult:
    """Debias, weight and solve; ``design`` may be a cached unweighted design."""
    t0 = time.perf_counter()
    base = build_design(moduli) if design is None else design
    weighted = apply_weights(base, counts.reports)
    s = debias(counts, moduli)
    f_hat, rep = estimate(weighted, s, lam=lam)
    ms = (time.perf_counter() - t0) * 1e3
    return DecodeResult(f_hat, rep, weighted, counts, ms)


def project_simplex(f_hat) -> np.ndarray:
    """Clamp negatives to zero and renormalize (optional post-processing)."""
    f = np.clip(np.asarray(f_hat, dtype=np.float64), 0.0, None)
    total = f.sum()
    return f / total if total > 0 else np.full_like(f, 1.0 / f.size)


# ---------------------------------------------------------------------------
# analytic error model


def residue_marginals(f, moduli: ModuliSet) -> list[np.ndarray]:
    """``g_{j,a} = sum_{x = a mod m_j} f_x`` for every block."""
    f = np.asarray(f, dtype=np.float64)
    xs = np.arange(f.size)
    return [np.bincount(xs % m, weights=f, minlength=m) for m in moduli.moduli]


def _pair_inclusion(blk: SSBlockParams) -> tuple[float, float]:
    """P[a, b both in Z] for distinct a, b: (neither is the truth, one is)."""
    m, w, p = blk.m, blk.omega, blk.p
    if m < 3:
        neither = 0.0
    else:
        neither = (p * (w - 1) * (w - 2) + (1 - p) * w * (w - 1)) / ((m - 1) * (m - 2))
    one = p * (w - 1) / (m - 1)
    return neither, one


def report_covariance(blk: SSBlockParams, g) -> np.ndarray:
    """Covariance of one SS membership vector when the input residue ~ ``g``."""
    g = np.asarray(g, dtype=np.float64)
    pi = blk.q + (blk.p - blk.q) * g
    neither, one = _pair_inclusion(blk)
    joint = neither * (1.0 - g[:, None] - g[None, :]) + one * (g[:, None] + g[None, :])
    cov = joint - np.outer(pi, pi)
    np.fill_diagonal(cov, pi * (1.0 - pi))
    return cov


@dataclass(frozen=True)
class _BlockCovariance:
    """``scale * (diag(d) + sum_r c_r a_r b_r^T)`` kept in factored form."""

    scale: float
    diag: np.ndarray
    lowrank: tuple[tuple[float, np.ndarray, np.ndarray], ...]

    def dense(self) -> np.ndarray:
        out = np.diag(self.diag)
        for c, a, b in self.lowrank:
            out = out + c * np.outer(a, b)
        return self.scale * out

    def quad(self, Y: np.ndarray) -> np.ndarray:
        """Column-wise ``y^T Sigma y`` for ``Y`` of shape (m, probes)."""
        out = np.einsum("i,ij,ij->j", self.diag, Y, Y)
        for c, a, b in self.lowrank:
            out = out + c * (a @ Y) * (b @ Y)
        return self.scale * out


def _block_covariances(f, moduli: ModuliSet, n: float) -> list[_BlockCovariance]:
    out = []
    ell = moduli.ell
    nj = n / ell
    for blk, g in zip(moduli.blocks, residue_marginals(f, moduli)):
        pi = blk.q + (blk.p - blk.q) * g
        neither, one = _pair_inclusion(blk)
        ones = np.ones(blk.m)
        # off-diagonal: neither*(1 - g_a - g_b) + one*(g_a + g_b) - pi_a pi_b
        diag = pi * (1.0 - pi) - (neither * (1.0 - 2 * g) + 2 * one * g - pi * pi)
        lowrank = (
            (neither, ones, ones),
            (one - neither, g, ones),
            (one - neither, ones, g),
            (-1.0, pi, pi),
        )
        out.append(_BlockCovariance(1.0 / (nj * (blk.p - blk.q) ** 2), diag, lowrank))
    return out


def analytic_covariance(f, moduli: ModuliSet, n: float, reference: str = "population") -> np.ndarray:
    """Covariance of the stacked debiased observation vector.

    Blocks are independent given the block counts, which are plugged in as
    ``n_j = n / l``. Each diagonal block is the exact covariance of the mean
    of ``n_j`` SubsetSelection membership vectors whose inputs are drawn from
    ``f``; its diagonal is ``pi_{j,a}(1 - pi_{j,a}) / (n_j (p_j - q_j)^2)``.

    With ``reference="empirical"`` the covariance is taken around the
    residue marginals of the realized dataset instead of ``f``, which removes
    the multinomial sampling term ``A (diag f - f f^T) A^T / n``.
    """
    f = check_histogram(f, moduli.k)
    blocks = _block_covariances(f, moduli, n)
    T = moduli.total_rows
    sigma = np.zeros((T, T))
    start = 0
    for blk in blocks:
        m = blk.diag.size
        sigma[start:start + m, start:start + m] = blk.dense()
        start += m
    if reference == "empirical":
        A = build_design(moduli).A.to_dense()
        sigma -= (A * f) @ A.T / n - np.outer(A @ f, A @ f) / n
    elif reference != "population":
        raise InvalidArgument(f"unknown reference {reference!r}")
    return sigma


def _gain_adjoint(design: WeightedDesign, Z: np.ndarray, lam: float) -> np.ndarray:
    """``G^T Z`` with ``G = (A_w^T A_w + lam I)^-1 A_w^T W^(1/2)``."""
    Y = cg_normal(design.A, Z, lam=lam, tol=1e-10)
    return design.row_weights[:, None] * matvec(design.A, Y)


def analytic_mse(f, moduli: ModuliSet, n: float, lam: float = 0.0, method: str = "auto",
                 probes: int = 256, seed: int = 0, reference: str = "population",
                 rel_se: float = 0.02, max_probes: int = 8192) -> float:
    """Predicted ``(1/k) E||f_hat - f||^2`` for the MSS decoder.

    The variance part is ``(1/k) Tr(G Sigma G^T)`` with the gain ``G``
    mapping debiased observations to the estimate. Planning weights use
    ``n_j = n / l``. For ``lam > 0`` the squared ridge bias
    ``(1/k)||(G A - I) f||^2`` is added.

    ``method="exact"`` factors the ``k x k`` normal matrix; ``"hutchinson"``
    uses Rademacher probes with a batched CG solve, starting with ``probes``
    and doubling until the standard error of the trace falls below
    ``rel_se`` of the estimate (at most ``max_probes``); ``"auto"`` switches
    to probing when the design has more than 2000 rows.
    """
    f = check_histogram(f, moduli.k)
    k = moduli.k
    design = apply_weights(build_design(moduli), np.full(moduli.ell, n / moduli.ell))
    if method == "auto":
        method = "exact" if moduli.total_rows <= 2000 else "hutchinson"
    blocks = _block_covariances(f, moduli, n)
    if reference == "empirical":
        raise InvalidArgument("analytic_mse supports the population reference only")

    if method == "exact":
        Aw = design.A.to_dense()
        N = Aw.T @ Aw + lam * np.eye(k)
        try:
            L = np.linalg.cholesky(N)
        except np.linalg.LinAlgError as exc:
            raise RankDeficient("weighted design is rank deficient; use lam > 0") from exc
        # G^T = W^(1/2) A_w N^-1  (T x k)
        Ninv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(k)))
        Gt = design.row_weights[:, None] * (Aw @ Ninv)
        trace = 0.0
        start = 0
        for blk in blocks:
            m = blk.diag.size
            trace += float(blk.quad(Gt[start:start + m]).sum())
            start += m
        variance = trace / k
        bias_vec = Ninv @ (Aw.T @ (Aw @ f)) - f
    elif method == "hutchinson":
        if lam == 0:
            _check_full_rank(design)
        rng = np.random.default_rng(seed)
        samples: list[np.ndarray] = []
        batch = probes
        # add probe batches until the trace estimate has <= rel_se standard error
        while True:
            Z = rng.choice(np.array([-1.0, 1.0]), size=(k, batch))
            Gt_Z = _gain_adjoint(design, Z, lam)
            total = np.zeros(batch)
            start = 0
            for blk in blocks:
                m = blk.diag.size
                total += blk.quad(Gt_Z[start:start + m])
                start += m
            samples.append(total)
            vals = np.concatenate(samples)
            se = vals.std(ddof=1) / math.sqrt(vals.size) if vals.size > 1 else math.inf
            if se <= rel_se * abs(vals.mean()) or vals.size >= max_probes:
                break
            batch = min(vals.size, max_probes - vals.size)
        variance = float(vals.mean()) / k
        rhs = rmatvec(design.A, matvec(design.A, f))
        bias_vec = cg_normal(design.A, rhs, lam=lam, tol=1e-12) - f
    else:
        raise InvalidArgument(f"unknown method {method!r}")
    bias2 = float(bias_vec @ bias_vec) / k if lam > 0 else 0.0
    return variance + bias2


def _check_full_rank(design: WeightedDesign) -> None:
    from .sparse import extreme_singular_values

    if extreme_singular_values(design.A, budget=200).rank_deficient:
        raise RankDeficient("weighted design is rank deficient; use lam > 0")


def worst_case_mse_bound(kappa: float, eps: float, n: float) -> float:
    """``4 kappa e^eps / (n (e^eps - 1)^2)``."""
    if kappa < 1:
        raise InvalidArgument("condition number must be >= 1")
    e = math.exp(eps)
    return 4.0 * kappa * e / (n * (e - 1.0) ** 2)


def log2_ceil(x: int) -> int:
    """Exact ``ceil(log2(x))`` for a positive integer."""
    if x < 1:
        raise InvalidArgument("log2 of a non-positive integer")
    return (x - 1).bit_length()


def comm_cost_bits(moduli: ModuliSet) -> float:
    """Average message length: block index plus enumerative subset code."""
    ell = moduli.ell
    subset_bits = sum(log2_ceil(math.comb(b.m, b.omega)) for b in moduli.blocks)
    return log2_ceil(ell) + subset_bits / ell


def baseline_bits(kind: str, k: int, eps: float) -> float:
    kind = kind.lower()
    if kind == "grr":
        return float(log2_ceil(k))
    if kind == "ss":
        return float(log2_ceil(math.comb(k, ss_params(k, eps).omega)))
    if kind in ("oue", "rappor"):
        return float(k)
    raise InvalidArgument(f"unknown mechanism {kind!r}")


def baseline_mse(kind: str, f, eps: float, n: float) -> float:
    """Exact ``(1/k) E||f_hat - f||^2`` for the GRR, SS and OUE estimators.

    Each coordinate's count is Binomial(n, pi_x) with
    ``pi_x = q + (p - q) f_x``, and the debiased estimate is unbiased.
    """
    f = check_histogram(f)
    k = f.size
    kind = kind.lower()
    e = math.exp(eps)
    if kind == "grr":
        p, q = e / (e + k - 1), 1.0 / (e + k - 1)
    elif kind == "ss":
        blk = ss_params(k, eps)
        p, q = blk.p, blk.q
    elif kind == "oue":
        p, q = 0.5, 1.0 / (e + 1.0)
    else:
        raise InvalidArgument(f"unknown mechanism {kind!r}")
    pi = q + (p - q) * f
    return float(np.mean(pi * (1.0 - pi))) / (n * (p - q) ** 2)
