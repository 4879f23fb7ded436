"""Search for well-conditioned prime moduli.

For each block count ``l`` the sampler draws distinct primes from a band
around ``k / l``, repairs coverage and rank by bumping moduli to the next
prime, and accepts the first tuple whose weighted design has condition
number at most ``kappa_max``. Accepted tuples are ranked by analytic MSE.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import InvalidArgument, ModuliSet, SearchExhausted, validate_moduli
from .decoder import analytic_mse, planning_design
from .sparse import extreme_singular_values

log = logging.getLogger(__name__)

REFERENCE_N = 10_000
_SIEVE_LIMIT = 10**8
_SEGMENT = 1 << 18


@dataclass(frozen=True)
class ModuliSearchConfig:
    kappa_max: float = 10.0
    ell_max: int = 20
    beta: float = 20.0
    trials: int = 1000
    seed: int = 0
    probes: int = 32  # Hutchinson probes when ranking large designs

    def __post_init__(self):
        if not self.kappa_max > 1:
            raise InvalidArgument("kappa_max must exceed 1")
        if self.ell_max < 2:
            raise InvalidArgument("ell_max must be >= 2")
        if not self.beta > 1:
            raise InvalidArgument("beta must exceed 1")
        if self.trials < 1:
            raise InvalidArgument("trials must be >= 1")
        if self.probes < 1:
            raise InvalidArgument("probes must be >= 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# primes


def _small_primes(limit: int) -> np.ndarray:
    sieve = np.ones(limit + 1, dtype=bool)
    sieve[:2] = False
    for p in range(2, math.isqrt(limit) + 1):
        if sieve[p]:
            sieve[p * p::p] = False
    return np.flatnonzero(sieve)


def _segmented_sieve(lo: int, hi: int) -> list[int]:
    """Primes in ``[lo, hi]`` via a segmented sieve of Eratosthenes."""
    if hi < 2:
        return []
    lo = max(lo, 2)
    base = _small_primes(math.isqrt(hi))
    out: list[int] = []
    for start in range(lo, hi + 1, _SEGMENT):
        stop = min(start + _SEGMENT, hi + 1)
        seg = np.ones(stop - start, dtype=bool)
        for p in base:
            p = int(p)
            if p * p >= stop:
                break
            first = max(p * p, ((start + p - 1) // p) * p)
            seg[first - start::p] = False
        out.extend(int(v) for v in np.flatnonzero(seg) + start)
    return out


_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, exact for ``n < 3.3e24``."""
    if n < 2:
        return False
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def next_prime(n: int) -> int:
    """Smallest prime strictly greater than ``n``."""
    c = max(n + 1, 2)
    if c > 2 and c % 2 == 0:
        c += 1
    while not is_prime(c):
        c += 1 if c == 2 else 2
    return c


def primes_in_band(lo: float, hi: float) -> list[int]:
    """All primes ``p`` with ``max(2, ceil(lo)) <= p <= floor(hi)``, ascending."""
    if hi < 2:
        raise InvalidArgument("upper band limit must be >= 2")
    a = max(2, math.ceil(lo))
    b = math.floor(hi)
    if a > b:
        return []
    if b <= _SIEVE_LIMIT:
        return _segmented_sieve(a, b)
    return [c for c in range(a, b + 1) if is_prime(c)]


# ---------------------------------------------------------------------------
# analytic bounds


def t_star(k: int, beta: float, ell: int) -> int:
    """Maximum number of moduli on which two domain values can collide."""
    low = k / (beta * ell)
    if low <= 1:
        raise InvalidArgument(f"bound undefined: k/(beta*ell) = {low} <= 1")
    return math.ceil(math.log(k) / math.log(low))


def alpha_bound(beta: float, eps: float) -> float:
    """Upper bound ``(beta + e^eps) / (1/beta + e^eps)`` on the weight ratio."""
    if not beta > 1:
        raise InvalidArgument("beta must exceed 1")
    e = math.exp(eps)
    return (beta + e) / (1.0 / beta + e)


def kappa_bound(ell: int, t_star_value: int, alpha: float) -> float:
    """``alpha (l + T*) / (l - T*)``; infinite when ``l <= T*``."""
    if ell <= t_star_value:
        return math.inf
    return alpha * (ell + t_star_value) / (ell - t_star_value)


def design_kappa(moduli: ModuliSet, stop_above: float | None = None, seed: int = 0) -> float:
    """Condition number of the weighted design with ``n_j = 1`` planning counts."""
    est = extreme_singular_values(planning_design(moduli).A, stop_above=stop_above, seed=seed)
    return est.kappa


# ---------------------------------------------------------------------------
# search


def _admissible(moduli: list[int], k: int) -> bool:
    return math.prod(moduli) >= k and sum(m - 1 for m in moduli) >= k


def _bump(moduli: list[int], i: int) -> None:
    """Advance ``moduli[i]`` to the next prime not already in use."""
    c = next_prime(moduli[i])
    while c in moduli:
        c = next_prime(c)
    moduli[i] = c


def deterministic_fallback(k: int, ell: int) -> list[int]:
    """First ``l`` primes ``>= ceil(k^(1/l))``, bumped round-robin until admissible."""
    root = math.ceil(k ** (1.0 / ell) - 1e-12)
    while root ** ell < k:
        root += 1
    moduli = []
    c = root - 1
    for _ in range(ell):
        c = next_prime(c)
        moduli.append(c)
    i = 0
    while not _admissible(moduli, k):
        _bump(moduli, i)
        i = (i + 1) % ell
    return moduli


@dataclass(frozen=True)
class Candidate:
    moduli: tuple[int, ...]
    kappa: float
    trial: int  # -1 for the deterministic fallback


def find_valid_moduli(k: int, ell: int, cfg: ModuliSearchConfig, eps: float) -> Candidate | None:
    """Sample prime tuples for a fixed block count; ``None`` when nothing qualifies."""
    if ell < 2:
        raise InvalidArgument("ell must be >= 2")
    lo = k / (cfg.beta * ell)
    hi = min(cfg.beta * k / ell, 0.95 * k)
    band = primes_in_band(lo, hi) if hi >= 2 else []
    if len(band) < ell:
        return None
    rng = np.random.default_rng([cfg.seed, k, ell])
    kappa_seed = cfg.seed

    def accept(moduli: list[int]) -> float:
        ms = ModuliSet.build(sorted(moduli), k, eps, check=False)
        return design_kappa(ms, stop_above=cfg.kappa_max, seed=kappa_seed)

    for t in range(cfg.trials):
        moduli = [int(v) for v in rng.choice(band, size=ell, replace=False)]
        while not _admissible(moduli, k):
            _bump(moduli, int(rng.integers(ell)))
        kappa = accept(moduli)
        if kappa <= cfg.kappa_max:
            return Candidate(tuple(sorted(moduli)), kappa, t)

    moduli = deterministic_fallback(k, ell)
    kappa = accept(moduli)
    if kappa <= cfg.kappa_max:
        return Candidate(tuple(sorted(moduli)), kappa, -1)
    return None


@dataclass(frozen=True)
class ModuliChoice:
    moduli: ModuliSet
    kappa: float
    analytic_mse: float
    candidates: tuple[tuple[tuple[int, ...], float, float], ...]  # (moduli, kappa, mse)


def choose_moduli(k: int, eps: float, cfg: ModuliSearchConfig | None = None,
                  n: int = REFERENCE_N) -> ModuliChoice:
    """Pick the admissible tuple with the smallest analytic MSE at uniform ``f``.

    Raises :class:`SearchExhausted` when no block count yields a candidate.
    """
    cfg = cfg or ModuliSearchConfig()
    if k < 2:
        raise InvalidArgument("k must be >= 2")
    if k <= 3:
        # a single modulus m >= k gives an identity-like design of full rank,
        # although it misses the sum(m - 1) >= k test by one
        m = next_prime(k - 1)
        ms = ModuliSet.build([m], k, eps, check=False)
        mse = analytic_mse(np.full(k, 1.0 / k), ms, n)
        kappa = design_kappa(ms)
        return ModuliChoice(ms, kappa, mse, (((m,), kappa, mse),))

    uniform = np.full(k, 1.0 / k)
    best = None
    seen = []
    for ell in range(2, cfg.ell_max + 1):
        cand = find_valid_moduli(k, ell, cfg, eps)
        if cand is None:
            continue
        ms = ModuliSet.build(cand.moduli, k, eps)
        mse = analytic_mse(uniform, ms, n, probes=cfg.probes, seed=cfg.seed)
        seen.append((cand.moduli, cand.kappa, mse))
        log.info("l=%d moduli=%s kappa=%.3f mse=%.4g", ell, cand.moduli, cand.kappa, mse)
        if best is None or mse < best[2]:
            best = (ms, cand.kappa, mse)
    if best is None:
        raise SearchExhausted(f"no admissible moduli for k={k}, eps={eps}")
    return ModuliChoice(best[0], best[1], best[2], tuple(seen))


def _cache_key(k: int, eps: float, cfg: ModuliSearchConfig) -> str:
    return f"k={k}|eps={eps!r}|cfg={cfg.digest()}"


def cached_choose_moduli(k: int, eps: float, cfg: ModuliSearchConfig | None = None,
                         cache: str | Path | None = None) -> ModuliChoice:
    """``choose_moduli`` backed by a JSON file keyed by ``(k, eps, cfg)``."""
    cfg = cfg or ModuliSearchConfig()
    if cache is None:
        return choose_moduli(k, eps, cfg)
    path = Path(cache)
    table = json.loads(path.read_text()) if path.exists() else {}
    key = _cache_key(k, eps, cfg)
    if key in table:
        entry = table[key]
        ms = ModuliSet.build(entry["moduli"], k, eps)
        return ModuliChoice(ms, entry["kappa"], entry["analytic_mse"], ())
    choice = choose_moduli(k, eps, cfg)
    table[key] = {"moduli": list(choice.moduli.moduli), "kappa": choice.kappa, "analytic_mse": choice.analytic_mse}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(table, indent=1, sort_keys=True))
    return choice


def check_moduli(moduli, k: int) -> None:
    result = validate_moduli(moduli, k)
    if not result:
        raise InvalidArgument(f"moduli {tuple(moduli)} invalid for k={k}: {', '.join(result.failures)} failed")
