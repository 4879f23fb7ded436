"""User-side randomizers (GRR, SS, OUE, MSS) and the single-mechanism estimators.

Each mechanism has a per-user kernel (``*_perturb``) and a vectorized batch
kernel (``*_perturb_batch``) used by the benchmark. Both draw from the same
output distribution; they do not consume randomness identically.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import CapacityError, InvalidArgument, ModuliSet, MssReport, SSBlockParams, ss_params

KINDS = ("grr", "ss", "oue", "mss")

# cap on keys materialized at once by the batch subset sampler
_MAX_BATCH_CELLS = 1 << 22


@dataclass(frozen=True)
class MechanismKind:
    tag: str
    k: int
    eps: float
    moduli: ModuliSet | None = None

    def __post_init__(self):
        tag = self.tag.lower()
        object.__setattr__(self, "tag", tag)
        if tag not in KINDS:
            raise InvalidArgument(f"unknown mechanism {self.tag!r}")
        if self.k < 2:
            raise InvalidArgument("k must be >= 2")
        if not self.eps > 0:
            raise InvalidArgument("eps must be positive")
        if tag == "mss" and self.moduli is None:
            raise InvalidArgument("MSS needs a moduli set")


def _check_value(x: int, k: int) -> None:
    if not 0 <= x < k:
        raise InvalidArgument(f"input {x} outside [0, {k})")


def grr_probs(k: int, eps: float) -> tuple[float, float]:
    e = math.exp(eps)
    return e / (e + k - 1), 1.0 / (e + k - 1)


def oue_probs(eps: float) -> tuple[float, float]:
    return 0.5, 1.0 / (math.exp(eps) + 1.0)


# ---------------------------------------------------------------------------
# per-user kernels


def grr_perturb(x: int, k: int, eps: float, rng: np.random.Generator) -> int:
    _check_value(x, k)
    p, _ = grr_probs(k, eps)
    if rng.random() < p:
        return x
    y = int(rng.integers(k - 1))
    return y + (y >= x)


def _sample_excluding(rng: np.random.Generator, m: int, r: int, size: int) -> list[int]:
    """``size`` distinct values from ``[m] \\ {r}`` by partial Fisher-Yates."""
    pool = m - 1
    moved: dict[int, int] = {}
    out = []
    for i in range(size):
        j = int(rng.integers(i, pool))
        vi, vj = moved.get(i, i), moved.get(j, j)
        moved[j] = vi
        out.append(vj + (vj >= r))
    return out


def ss_subset(r: int, blk: SSBlockParams, rng: np.random.Generator) -> tuple[int, ...]:
    """SubsetSelection kernel over ``[blk.m]`` for true value ``r``."""
    if rng.random() < blk.p:
        z = [r] + _sample_excluding(rng, blk.m, r, blk.omega - 1)
    else:
        z = _sample_excluding(rng, blk.m, r, blk.omega)
    return tuple(sorted(z))


def ss_perturb(x: int, k: int, eps: float, rng: np.random.Generator) -> tuple[int, ...]:
    _check_value(x, k)
    return ss_subset(x, ss_params(k, eps), rng)


def mss_perturb(x: int, moduli: ModuliSet, eps: float | None, rng: np.random.Generator) -> MssReport:
    """Pick a block uniformly, then run SubsetSelection on ``x mod m_J``."""
    _check_value(x, moduli.k)
    if eps is not None and not math.isclose(eps, moduli.eps):
        moduli = moduli.with_eps(eps)
    j = int(rng.integers(moduli.ell))
    blk = moduli.blocks[j]
    return MssReport(j, ss_subset(x % blk.m, blk, rng))


def oue_perturb(x: int, k: int, eps: float, rng: np.random.Generator) -> np.ndarray:
    _check_value(x, k)
    p, q = oue_probs(eps)
    bits = rng.random(k) < q
    bits[x] = rng.random() < p
    return bits


# ---------------------------------------------------------------------------
# batch kernels


def grr_perturb_batch(values: np.ndarray, k: int, eps: float, rng: np.random.Generator) -> np.ndarray:
    p, _ = grr_probs(k, eps)
    keep = rng.random(values.size) < p
    other = rng.integers(k - 1, size=values.size)
    other += other >= values
    return np.where(keep, values, other)


def subset_batch(truth: np.ndarray, blk: SSBlockParams, rng: np.random.Generator) -> np.ndarray:
    """SubsetSelection for many users at once; returns an ``(n, omega)`` array.

    Each user gets i.i.d. uniform keys over ``[m]``; the true value's key is
    forced below (included) or above (excluded) all others, and the
    ``omega`` smallest keys form the subset. The non-forced members are
    therefore a uniform sample without replacement from ``[m] \\ {r}``.
    """
    n = truth.size
    m, omega = blk.m, blk.omega
    include = rng.random(n) < blk.p
    out = np.empty((n, omega), dtype=np.int64)
    step = max(1, _MAX_BATCH_CELLS // m)
    for s in range(0, n, step):
        e = min(n, s + step)
        keys = rng.random((e - s, m))
        keys[np.arange(e - s), truth[s:e]] = np.where(include[s:e], -1.0, 2.0)
        if omega < m:
            out[s:e] = np.argpartition(keys, omega - 1, axis=1)[:, :omega]
        else:
            out[s:e] = np.argsort(keys, axis=1)
    return out


def ss_perturb_batch(values: np.ndarray, k: int, eps: float, rng: np.random.Generator) -> np.ndarray:
    return subset_batch(values, ss_params(k, eps), rng)


@dataclass
class MssBatch:
    """Reports of a user batch: block per user, and per-block user ids and subsets."""

    blocks: np.ndarray
    users: list[np.ndarray]
    subsets: list[np.ndarray]

    def reports(self) -> list[MssReport]:
        out: list[MssReport | None] = [None] * self.blocks.size
        for j, (ids, z) in enumerate(zip(self.users, self.subsets)):
            for i, row in zip(ids, z):
                out[int(i)] = MssReport(j, tuple(sorted(int(a) for a in row)))
        return out  # type: ignore[return-value]


def mss_perturb_batch(values: np.ndarray, moduli: ModuliSet, rng: np.random.Generator) -> MssBatch:
    blocks = rng.integers(moduli.ell, size=values.size)
    users, subsets = [], []
    for j, blk in enumerate(moduli.blocks):
        ids = np.flatnonzero(blocks == j)
        users.append(ids)
        subsets.append(subset_batch(values[ids] % blk.m, blk, rng))
    return MssBatch(blocks, users, subsets)


def oue_perturb_batch(values: np.ndarray, k: int, eps: float, rng: np.random.Generator) -> np.ndarray:
    p, q = oue_probs(eps)
    bits = rng.random((values.size, k)) < q
    bits[np.arange(values.size), values] = rng.random(values.size) < p
    return bits


# ---------------------------------------------------------------------------
# exact output distributions


def _ss_pmf(r: int, blk: SSBlockParams) -> dict[tuple[int, ...], float]:
    with_r = blk.p / math.comb(blk.m - 1, blk.omega - 1)
    without_r = (1.0 - blk.p) / math.comb(blk.m - 1, blk.omega)
    return {z: (with_r if r in z else without_r) for z in itertools.combinations(range(blk.m), blk.omega)}


def report_pmf(kind: MechanismKind, x: int) -> dict:
    """Exact distribution of one report for input ``x`` (small domains only)."""
    k, eps = kind.k, kind.eps
    _check_value(x, k)
    if kind.tag == "grr":
        p, q = grr_probs(k, eps)
        return {y: (p if y == x else q) for y in range(k)}
    if kind.tag == "ss":
        if k > 12:
            raise CapacityError("SS pmf enumeration is limited to k <= 12")
        return _ss_pmf(x, ss_params(k, eps))
    if kind.tag == "oue":
        if k > 12:
            raise CapacityError("OUE pmf enumeration is limited to k <= 12")
        p, q = oue_probs(eps)
        out = {}
        for bits in itertools.product((0, 1), repeat=k):
            prob = 1.0
            for a, b in enumerate(bits):
                on = p if a == x else q
                prob *= on if b else 1.0 - on
            out[bits] = prob
        return out
    moduli = kind.moduli if math.isclose(kind.moduli.eps, eps) else kind.moduli.with_eps(eps)
    if sum(math.comb(b.m, b.omega) for b in moduli.blocks) > 10**6:
        raise CapacityError("MSS report space exceeds 1e6 subsets")
    out = {}
    for j, blk in enumerate(moduli.blocks):
        for z, prob in _ss_pmf(x % blk.m, blk).items():
            out[(j, z)] = prob / moduli.ell
    return out


def max_privacy_ratio(kind: MechanismKind) -> float:
    """Largest ``P[M(x) = y] / P[M(x') = y]`` over all inputs and reports."""
    pmfs = [report_pmf(kind, x) for x in range(kind.k)]
    keys = list(pmfs[0])
    table = np.array([[pmf[y] for y in keys] for pmf in pmfs])
    return float(np.max(table.max(axis=0) / table.min(axis=0)))


# ---------------------------------------------------------------------------
# estimators


def _debias(counts, n: int, p: float, q: float) -> np.ndarray:
    if n <= 0:
        raise InvalidArgument("estimator needs at least one report")
    return (np.asarray(counts, dtype=np.float64) / n - q) / (p - q)


def grr_estimate(counts, k: int, eps: float, n: int) -> np.ndarray:
    """Unbiased frequencies from GRR symbol counts."""
    p, q = grr_probs(k, eps)
    return _debias(counts, n, p, q)


def ss_estimate(counts, k: int, eps: float, n: int) -> np.ndarray:
    """Unbiased frequencies from SS membership counts."""
    blk = ss_params(k, eps)
    return _debias(counts, n, blk.p, blk.q)


def oue_estimate(counts, k: int, eps: float, n: int) -> np.ndarray:
    """Unbiased frequencies from OUE bit sums."""
    p, q = oue_probs(eps)
    return _debias(counts, n, p, q)


def tally(kind: str, reports, k: int) -> np.ndarray:
    """Sufficient statistic for the baseline estimators."""
    if kind == "grr":
        return np.bincount(np.asarray(reports), minlength=k)
    if kind == "ss":
        return np.bincount(np.asarray(reports).ravel(), minlength=k)
    if kind == "oue":
        return np.asarray(reports).sum(axis=0)
    raise InvalidArgument(f"no tally for {kind!r}")


def perturb_batch(kind: MechanismKind, values: np.ndarray, rng: np.random.Generator):
    if kind.tag == "grr":
        return grr_perturb_batch(values, kind.k, kind.eps, rng)
    if kind.tag == "ss":
        return ss_perturb_batch(values, kind.k, kind.eps, rng)
    if kind.tag == "oue":
        return oue_perturb_batch(values, kind.k, kind.eps, rng)
    return mss_perturb_batch(values, kind.moduli, rng)


def estimate_baseline(kind: str, counts, k: int, eps: float, n: int) -> np.ndarray:
    fn = {"grr": grr_estimate, "ss": ss_estimate, "oue": oue_estimate}[kind]
    return fn(counts, k, eps, n)


def random_subset_sizes(moduli: ModuliSet) -> Sequence[int]:
    return [b.omega for b in moduli.blocks]
