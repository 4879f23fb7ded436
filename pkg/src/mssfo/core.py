"""Domain types and validation shared by the mechanisms, decoder and attacks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence

import numpy as np


class InvalidArgument(ValueError):
    """Raised when an argument violates a documented precondition."""


class CapacityError(RuntimeError):
    """Raised when an exact enumeration would exceed its size budget."""


class SearchExhausted(RuntimeError):
    """Raised when the moduli search finds no admissible tuple."""


class RankDeficient(np.linalg.LinAlgError):
    """Raised when an unregularized solve meets a rank-deficient design."""


def round_half_away(x: float) -> int:
    """Round to nearest integer, ties away from zero."""
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass(frozen=True)
class SSBlockParams:
    """SubsetSelection parameters for a domain of size ``m``.

    ``p`` is the probability that the true value is in the reported subset,
    ``q`` the probability that a fixed other value is, and ``pi`` the
    inclusion probability of a residue under a uniform input.
    """

    m: int
    omega: int
    eps: float
    exp_eps: float
    p: float
    q: float
    pi: float


def ss_params(m: int, eps: float) -> SSBlockParams:
    """SubsetSelection parameters for domain size ``m`` at privacy level ``eps``.

    The subset size ``omega = round(m / (e^eps + 1))`` is clamped to
    ``[1, m - 1]`` so that ``0 < q < p < 1`` at any finite ``eps``.
    """
    if m < 2:
        raise InvalidArgument(f"domain size must be >= 2, got {m}")
    if not eps > 0:
        raise InvalidArgument(f"eps must be positive, got {eps}")
    e = math.exp(eps)
    omega = min(max(round_half_away(m / (e + 1.0)), 1), m - 1)
    denom = omega * e + m - omega
    p = omega * e / denom
    q = (omega * e * (omega - 1) + (m - omega) * omega) / ((m - 1) * denom)
    pi = q + (p - q) / m
    return SSBlockParams(m=m, omega=omega, eps=eps, exp_eps=e, p=p, q=q, pi=pi)


@dataclass(frozen=True)
class ModuliValidation:
    coprime: bool
    coverage: bool
    rank: bool

    @property
    def ok(self) -> bool:
        return self.coprime and self.coverage and self.rank

    @property
    def failures(self) -> list[str]:
        names = ("coprime", "coverage", "rank")
        return [name for name in names if not getattr(self, name)]

    def __bool__(self) -> bool:
        return self.ok


def validate_moduli(moduli: Sequence[int], k: int) -> ModuliValidation:
    """Check pairwise coprimality, CRT coverage and the rank condition.

    Coverage is ``prod(m) >= k``; the rank condition is
    ``sum(m - 1) >= k``, which is necessary for the stacked residue design
    to have full column rank.
    """
    moduli = [int(m) for m in moduli]
    if not moduli:
        raise InvalidArgument("moduli list is empty")
    if any(m < 2 for m in moduli):
        raise InvalidArgument(f"every modulus must be >= 2, got {moduli}")
    coprime = all(
        math.gcd(a, b) == 1
        for i, a in enumerate(moduli)
        for b in moduli[i + 1:]
    )
    coverage = reduce(lambda acc, m: acc * m, moduli, 1) >= k
    rank = sum(m - 1 for m in moduli) >= k
    return ModuliValidation(coprime=coprime, coverage=coverage, rank=rank)


@dataclass(frozen=True)
class ModuliSet:
    """A validated tuple of moduli together with per-block SS parameters."""

    moduli: tuple[int, ...]
    k: int
    eps: float
    blocks: tuple[SSBlockParams, ...] = field(repr=False)

    @classmethod
    def build(cls, moduli: Sequence[int], k: int, eps: float, check: bool = True) -> "ModuliSet":
        moduli = tuple(int(m) for m in moduli)
        if k < 1:
            raise InvalidArgument(f"k must be >= 1, got {k}")
        if check:
            result = validate_moduli(moduli, k)
            if not result:
                raise InvalidArgument(f"moduli {moduli} invalid for k={k}: {', '.join(result.failures)} failed")
        blocks = tuple(ss_params(m, eps) for m in moduli)
        return cls(moduli=moduli, k=k, eps=float(eps), blocks=blocks)

    @property
    def ell(self) -> int:
        return len(self.moduli)

    @property
    def total_rows(self) -> int:
        return sum(self.moduli)

    def with_eps(self, eps: float) -> "ModuliSet":
        return ModuliSet.build(self.moduli, self.k, eps, check=False)


@dataclass(frozen=True)
class MssReport:
    """One user's message: block index ``j`` and a sorted residue subset ``z``."""

    j: int
    z: tuple[int, ...]

    def check(self, moduli: ModuliSet) -> None:
        if not 0 <= self.j < moduli.ell:
            raise InvalidArgument(f"block index {self.j} out of range")
        block = moduli.blocks[self.j]
        if len(self.z) != block.omega or len(set(self.z)) != len(self.z):
            raise InvalidArgument(f"report subset {self.z} must hold {block.omega} distinct residues")
        if any(not 0 <= a < block.m for a in self.z):
            raise InvalidArgument(f"report subset {self.z} has residues outside [0, {block.m})")


def rns_encode(x: int, moduli: ModuliSet | Sequence[int], k: int | None = None) -> tuple[int, ...]:
    """Residue vector ``(x mod m_0, ..., x mod m_{l-1})``."""
    if isinstance(moduli, ModuliSet):
        k = moduli.k if k is None else k
        moduli = moduli.moduli
    if k is not None and not 0 <= x < k:
        raise InvalidArgument(f"x={x} outside [0, {k})")
    if x < 0:
        raise InvalidArgument(f"x={x} must be non-negative")
    return tuple(x % m for m in moduli)


def check_histogram(f, k: int | None = None, normalized: bool = True) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1 or (k is not None and f.shape[0] != k):
        raise InvalidArgument(f"histogram must be a length-{k} vector")
    if normalized:
        if np.any(f < 0):
            raise InvalidArgument("histogram has negative entries")
        if abs(f.sum() - 1.0) > 1e-12 * max(1, f.shape[0]):
            raise InvalidArgument(f"histogram sums to {f.sum()}, expected 1")
    return f


def check_dataset(values, k: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64)
    if values.ndim != 1:
        raise InvalidArgument("dataset must be one-dimensional")
    if values.size and (values.min() < 0 or values.max() >= k):
        raise InvalidArgument(f"dataset values must lie in [0, {k})")
    return values


def empirical_histogram(values, k: int) -> np.ndarray:
    values = check_dataset(values, k)
    if values.size == 0:
        raise InvalidArgument("empty dataset")
    return np.bincount(values, minlength=k) / values.size
