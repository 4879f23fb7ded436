import math

import numpy as np
import pytest

from mssfo.core import CapacityError, InvalidArgument, ModuliSet, ss_params
from mssfo.mechanisms import (MechanismKind, grr_estimate, grr_perturb, grr_perturb_batch, max_privacy_ratio,
                              mss_perturb, mss_perturb_batch, oue_estimate, oue_perturb, oue_perturb_batch,
                              report_pmf, ss_estimate, ss_perturb, ss_perturb_batch, subset_batch, tally)

from conftest import within_sigmas

LN4 = math.log(4)


def binom_sd(p, n):
    return math.sqrt(p * (1 - p) / n)


def test_grr_keeps_value_with_p(rng):
    n = 200_000
    hits = sum(grr_perturb(2, 4, math.log(3), rng) == 2 for _ in range(n))
    assert within_sigmas(hits / n, 0.5, binom_sd(0.5, n))


def test_grr_batch_matches_pmf(rng):
    out = grr_perturb_batch(np.full(10**6, 1), 3, math.log(2), rng)
    freq = np.bincount(out, minlength=3) / out.size
    for a, p in enumerate((0.25, 0.5, 0.25)):
        assert within_sigmas(freq[a], p, binom_sd(p, out.size))


def test_grr_huge_eps_is_identity(rng):
    assert all(grr_perturb(x, 7, 60.0, rng) == x for x in range(7))


def test_ss_subset_size_and_inclusion(rng):
    n = 100_000
    hit = 0
    for _ in range(n):
        z = ss_perturb(3, 5, LN4, rng)
        assert len(z) == 1
        hit += 3 in z
    assert within_sigmas(hit / n, 0.5, binom_sd(0.5, n))


def test_ss_size_k_minus_one(rng):
    blk = ss_params(4, 0.01)
    assert blk.omega == 2
    z = ss_perturb(0, 3, 0.001, rng)
    assert len(z) == 1 and len(set(z)) == 1


def test_ss_other_marginal_is_pi_minus(rng):
    # point mass input: P[a in Z] = q for a != x
    k, eps, n = 12, 1.0, 100_000
    blk = ss_params(k, eps)
    z = ss_perturb_batch(np.zeros(n, dtype=np.int64), k, eps, rng)
    counts = np.bincount(z.ravel(), minlength=k) / n
    assert within_sigmas(counts[0], blk.p, binom_sd(blk.p, n))
    for a in range(1, k):
        assert within_sigmas(counts[a], blk.q, binom_sd(blk.q, n), 4.0)


def test_subset_batch_rows_distinct(rng):
    blk = ss_params(50, 0.5)
    z = subset_batch(rng.integers(50, size=2000), blk, rng)
    assert z.shape == (2000, blk.omega)
    assert all(len(set(row)) == blk.omega for row in z)


def test_single_and_batch_ss_agree_in_distribution(rng):
    # pair inclusion frequencies from both kernels
    k, eps, n = 6, 0.7, 60_000
    blk = ss_params(k, eps)
    single = np.zeros((k, k))
    for _ in range(n):
        z = ss_perturb(1, k, eps, rng)
        single[np.ix_(z, z)] += 1
    batch = np.zeros((k, k))
    for row in ss_perturb_batch(np.ones(n, dtype=np.int64), k, eps, rng):
        batch[np.ix_(row, row)] += 1
    sd = np.sqrt(0.25 / n)
    assert np.all(np.abs(single / n - batch / n) <= 4 * np.sqrt(2) * sd)
    assert blk.omega == 2


def test_mss_block_choice_and_residues(rng):
    ms = ModuliSet.build((3, 5), 15, LN4, check=False)
    n = 60_000
    blocks = np.zeros(2)
    inc = np.zeros(2)
    for _ in range(n):
        r = mss_perturb(7, ms, None, rng)
        blocks[r.j] += 1
        inc[r.j] += (7 % ms.moduli[r.j]) in r.z
        r.check(ms)
    assert within_sigmas(blocks[0] / n, 0.5, binom_sd(0.5, n))
    for j, p in enumerate((2 / 3, 0.5)):
        assert within_sigmas(inc[j] / blocks[j], p, binom_sd(p, blocks[j]))


def test_mss_single_block_equals_ss_pmf():
    ms = ModuliSet.build((7,), 7, 1.0, check=False)
    mss = report_pmf(MechanismKind("mss", 7, 1.0, ms), 3)
    ss = report_pmf(MechanismKind("ss", 7, 1.0), 3)
    tv = 0.5 * sum(abs(mss[(0, z)] - p) for z, p in ss.items())
    assert tv < 1e-15


def test_mss_batch_shapes(rng):
    ms = ModuliSet.build((29, 37, 41), 100, 1.0)
    batch = mss_perturb_batch(rng.integers(100, size=5000), ms, rng)
    assert sum(u.size for u in batch.users) == 5000
    for j, z in enumerate(batch.subsets):
        assert z.shape[1] == ms.blocks[j].omega
    reports = batch.reports()
    for r in reports[:50]:
        r.check(ms)


def test_oue_bit_rates(rng):
    n = 200_000
    bits = oue_perturb_batch(np.zeros(n, dtype=np.int64), 2, math.log(3), rng)
    assert within_sigmas(bits[:, 1].mean(), 0.25, binom_sd(0.25, n))
    assert within_sigmas(bits[:, 0].mean(), 0.5, binom_sd(0.5, n))
    assert oue_perturb(1, 4, 1.0, rng).shape == (4,)


def test_report_pmf_grr():
    pmf = report_pmf(MechanismKind("grr", 3, math.log(2)), 0)
    assert pmf == pytest.approx({0: 0.5, 1: 0.25, 2: 0.25})


@pytest.mark.parametrize("kind", [
    MechanismKind("ss", 8, 1.0),
    MechanismKind("oue", 6, 2.0),
    MechanismKind("mss", 15, LN4, ModuliSet.build((3, 5), 15, LN4, check=False)),
    MechanismKind("mss", 105, 1.0, ModuliSet.build((3, 5, 7), 105, 1.0, check=False)),
])
def test_report_pmf_normalized(kind):
    for x in range(kind.k):
        assert sum(report_pmf(kind, x).values()) == pytest.approx(1.0, abs=1e-10)


def test_report_pmf_capacity():
    with pytest.raises(CapacityError):
        report_pmf(MechanismKind("ss", 13, 1.0), 0)
    with pytest.raises(CapacityError):
        report_pmf(MechanismKind("oue", 20, 1.0), 0)


def test_privacy_ratio_small():
    assert max_privacy_ratio(MechanismKind("grr", 5, 1.0)) == pytest.approx(math.e)
    assert max_privacy_ratio(MechanismKind("ss", 6, 1.0)) <= math.e * (1 + 1e-9)


def test_mechanism_kind_validation():
    with pytest.raises(InvalidArgument):
        MechanismKind("rappor", 4, 1.0)
    with pytest.raises(InvalidArgument):
        MechanismKind("grr", 1, 1.0)
    with pytest.raises(InvalidArgument):
        MechanismKind("grr", 4, 0.0)
    with pytest.raises(InvalidArgument):
        MechanismKind("mss", 4, 1.0)
    assert MechanismKind("GRR", 4, 1.0).tag == "grr"


def test_perturb_rejects_out_of_range(rng):
    for fn in (grr_perturb, ss_perturb, oue_perturb):
        with pytest.raises(InvalidArgument):
            fn(5, 5, 1.0, rng)


def test_estimators_noiseless_limit(rng):
    values = rng.integers(10, size=500)
    emp = np.bincount(values, minlength=10) / values.size
    eps = 60.0
    np.testing.assert_allclose(
        grr_estimate(tally("grr", grr_perturb_batch(values, 10, eps, rng), 10), 10, eps, 500), emp, atol=1e-9)
    np.testing.assert_allclose(
        ss_estimate(tally("ss", ss_perturb_batch(values, 10, eps, rng), 10), 10, eps, 500), emp, atol=1e-9)
    oue = oue_estimate(tally("oue", oue_perturb_batch(values, 10, eps, rng), 10), 10, eps, 500)
    # OUE keeps the true bit only half the time, so it is noisy even at huge eps
    assert oue.sum() == pytest.approx(1.0, abs=0.2)


def test_estimator_debias_zero_point():
    blk = ss_params(10, 1.0)
    np.testing.assert_allclose(ss_estimate(np.full(10, blk.q * 100), 10, 1.0, 100), 0.0, atol=1e-12)


def test_estimators_reject_no_reports():
    for fn in (grr_estimate, ss_estimate, oue_estimate):
        with pytest.raises(InvalidArgument):
            fn(np.zeros(4), 4, 1.0, 0)


def test_grr_estimate_sums_to_one(rng):
    values = rng.integers(20, size=1000)
    est = grr_estimate(tally("grr", grr_perturb_batch(values, 20, 0.5, rng), 20), 20, 0.5, 1000)
    assert est.sum() == pytest.approx(1.0, abs=1e-12)


def test_baseline_estimators_unbiased(rng):
    k, n, trials, eps = 100, 10_000, 200, LN4
    f = np.arange(1, k + 1, dtype=float) ** -3.0
    f /= f.sum()
    cdf = np.cumsum(f)
    est = np.zeros((trials, k))
    for t in range(trials):
        values = np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), k - 1)
        est[t] = ss_estimate(tally("ss", ss_perturb_batch(values, k, eps, rng), k), k, eps, n)
    mean = est.mean(axis=0)
    se = est.std(axis=0, ddof=1) / math.sqrt(trials)
    frac = np.mean(np.abs(mean - f) <= 3 * se)
    assert frac >= 0.97
    # every SS report has exactly omega members, so the sum is 1 per trial
    np.testing.assert_allclose(est.sum(axis=1), 1.0, atol=1e-9)
