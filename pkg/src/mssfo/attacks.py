"""Single-report Bayesian reconstruction attack (DRA) rates.

The attacker assumes a uniform prior, sees one report and guesses uniformly
over the inputs consistent with it. Analytic rates are closed forms;
empirical rates come from simulating the attacker on perturbed reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import hypergeom

from .core import InvalidArgument, ModuliSet, check_dataset, check_histogram, ss_params, validate_moduli
from .mechanisms import MechanismKind, MssBatch, perturb_batch
from .moduli import is_prime


@dataclass(frozen=True)
class DraEstimate:
    analytic: float | None
    empirical: float
    trials: int
    stderr: float

    def within(self, target: float, sigmas: float = 3.0) -> bool:
        return abs(self.empirical - target) <= sigmas * self.stderr


def residue_multiplicity(k: int, m: int) -> np.ndarray:
    """Number of values in ``[0, k)`` congruent to each residue mod ``m``."""
    if m < 1:
        raise InvalidArgument("m must be >= 1")
    e, r = divmod(k, m)
    out = np.full(m, e, dtype=np.int64)
    out[:r] += 1
    return out


# ---------------------------------------------------------------------------
# closed forms


def dra_grr(k: int, eps: float) -> float:
    e = math.exp(eps)
    return e / (e + k - 1)


def dra_ss(k: int, eps: float) -> float:
    blk = ss_params(k, eps)
    return blk.exp_eps / (blk.omega * blk.exp_eps + k - blk.omega)


def dra_rappor_symmetric(k: int, eps: float) -> float:
    """Symmetric RAPPOR rate, with the large power kept in log space."""
    h = eps / 2.0
    if h == 0:
        return 1.0 / k
    log_tail = (k - 1) * h + math.log(math.expm1(h)) - (k - 1) * math.log1p(math.exp(h))
    return (math.exp(h) - math.exp(log_tail)) / k


def _as_moduli(moduli, k: int, eps: float) -> ModuliSet:
    if isinstance(moduli, ModuliSet):
        return moduli if math.isclose(moduli.eps, eps) else moduli.with_eps(eps)
    # attack rates need an injective encoding but not a decodable design
    result = validate_moduli(moduli, k)
    if not (result.coprime and result.coverage):
        raise InvalidArgument(f"moduli {tuple(moduli)} invalid for k={k}: {', '.join(result.failures)} failed")
    return ModuliSet.build(moduli, k, eps, check=False)


def dra_mss_upper(moduli, eps: float, k: int) -> float:
    """``(1/l) sum_j p_j / (omega_j ceil(k / m_j))``.

    This is the closed form usually quoted as an upper bound. It is exact
    when every modulus divides ``k``; otherwise it sits *below*
    :func:`dra_mss_exact`, because every posterior support is at most
    ``omega_j ceil(k / m_j)`` large.
    """
    ms = _as_moduli(moduli, k, eps)
    return sum(b.p / (b.omega * math.ceil(k / b.m)) for b in ms.blocks) / ms.ell


def _block_success(m: int, omega: int, p: float, k: int, g: np.ndarray) -> float:
    """Success rate of one block given residue masses ``g``."""
    e, r = divmod(k, m)
    total = 0.0
    draws = omega - 1
    # residues z < r hold e+1 values, the rest e; the filler set is a uniform
    # (omega-1)-subset of the other residues, so the number of large residues
    # in it is hypergeometric
    for n_z, mass, big_others in ((e + 1, g[:r].sum(), r - 1), (e, g[r:].sum(), r)):
        if n_z == 0 or mass == 0:
            continue
        h = np.arange(draws + 1)
        pmf = hypergeom.pmf(h, m - 1, big_others, draws) if draws else np.ones(1)
        total += mass * float(np.sum(pmf / (n_z + draws * e + h)))
    total *= p
    if m > k:
        # excluded true residue and a filler drawn entirely from empty residues
        empty = m - k
        if empty >= omega:
            total += (1.0 - p) * math.comb(empty, omega) / math.comb(m - 1, omega) / k
    return total


def dra_mss_exact(moduli, eps: float, k: int, f=None) -> float:
    """Exact expected rate of the uniform-support attacker against MSS.

    ``f`` is the distribution of the attacked inputs (uniform by default);
    the attacker itself still assumes a uniform prior. The expectation over
    the filler set is summed exactly through the hypergeometric law of the
    number of large residues it contains.
    """
    ms = _as_moduli(moduli, k, eps)
    f = np.full(k, 1.0 / k) if f is None else check_histogram(f, k)
    xs = np.arange(k)
    rate = 0.0
    for b in ms.blocks:
        g = np.bincount(xs % b.m, weights=f, minlength=b.m)
        rate += _block_success(b.m, b.omega, b.p, k, g)
    return float(rate / ms.ell)


def _is_prime_power(q: int) -> bool:
    if q < 2:
        return False
    for p in range(2, math.isqrt(q) + 1):
        if q % p == 0:
            while q % p == 0:
                q //= p
            return q == 1
    return is_prime(q)


def dra_pgr_full(q: int, t: int, eps: float) -> float:
    """Projective-geometry response rate on its natural domain size."""
    if not _is_prime_power(q):
        raise InvalidArgument(f"q={q} is not a prime power")
    if t < 2:
        raise InvalidArgument("t must be >= 2")
    K = (q**t - 1) // (q - 1)
    c_set = (q ** (t - 1) - 1) // (q - 1)
    e = math.exp(eps)
    return e / (K + (e - 1) * c_set)


def dra_analytic(kind: MechanismKind, f=None) -> float | None:
    if kind.tag == "grr":
        return dra_grr(kind.k, kind.eps)
    if kind.tag == "ss":
        return dra_ss(kind.k, kind.eps)
    if kind.tag == "mss":
        return dra_mss_exact(kind.moduli, kind.eps, kind.k, f)
    return None


# ---------------------------------------------------------------------------
# simulated attacker


def _guess_in_rows(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform pick among set entries per row; rows with none pick any column."""
    n, k = mask.shape
    count = mask.sum(axis=1)
    empty = count == 0
    pick = np.floor(rng.random(n) * np.where(empty, k, count)).astype(np.int64)
    cum = np.cumsum(mask, axis=1)
    out = np.argmax(cum > pick[:, None], axis=1)
    out[empty] = pick[empty]
    return out


def _guess_mss(batch: MssBatch, moduli: ModuliSet, rng: np.random.Generator) -> np.ndarray:
    k = moduli.k
    out = np.empty(batch.blocks.size, dtype=np.int64)
    for j, blk in enumerate(moduli.blocks):
        ids, z = batch.users[j], batch.subsets[j]
        if ids.size == 0:
            continue
        mult = residue_multiplicity(k, blk.m)
        w = mult[z]
        support = w.sum(axis=1)
        empty = support == 0
        t = np.floor(rng.random(ids.size) * np.where(empty, k, support)).astype(np.int64)
        cum = np.cumsum(w, axis=1)
        col = np.argmax(cum > t[:, None], axis=1)
        rows = np.arange(ids.size)
        before = cum[rows, col] - w[rows, col]
        guess = z[rows, col] + blk.m * (t - before)
        out[ids] = np.where(empty, t, guess)
    return out


def attack_guesses(kind: MechanismKind, reports, rng: np.random.Generator) -> np.ndarray:
    """Attacker guesses for a batch of reports produced by ``perturb_batch``."""
    if kind.tag == "grr":
        return np.asarray(reports)
    if kind.tag == "ss":
        z = np.asarray(reports)
        return z[np.arange(z.shape[0]), rng.integers(z.shape[1], size=z.shape[0])]
    if kind.tag == "oue":
        out = np.empty(reports.shape[0], dtype=np.int64)
        step = max(1, (1 << 22) // kind.k)
        for s in range(0, reports.shape[0], step):
            out[s:s + step] = _guess_in_rows(reports[s:s + step], rng)
        return out
    return _guess_mss(reports, kind.moduli, rng)


def empirical_dra(kind: MechanismKind, data, eps: float | None, trials: int,
                  rng: np.random.Generator) -> DraEstimate:
    """Simulate the attacker on ``trials`` fresh perturbations of ``data``.

    ``trials`` in the result counts individual attacked reports.
    """
    if trials < 1:
        raise InvalidArgument("trials must be >= 1")
    if eps is not None and not math.isclose(eps, kind.eps):
        ms = kind.moduli.with_eps(eps) if kind.moduli is not None else None
        kind = MechanismKind(kind.tag, kind.k, eps, ms)
    data = check_dataset(data, kind.k)
    if data.size == 0:
        raise InvalidArgument("empty dataset")
    hits = 0
    for _ in range(trials):
        reports = perturb_batch(kind, data, rng)
        hits += int(np.count_nonzero(attack_guesses(kind, reports, rng) == data))
    total = trials * data.size
    rate = hits / total
    f = np.bincount(data, minlength=kind.k) / data.size
    return DraEstimate(dra_analytic(kind, f), rate, total, math.sqrt(rate * (1 - rate) / total))
