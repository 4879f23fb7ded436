import math

import numpy as np
import pytest

from mssfo.core import InvalidArgument, ModuliSet, MssReport, RankDeficient, ss_params
from mssfo.decoder import (BlockCounts, aggregate, aggregate_batch, analytic_covariance, analytic_mse,
                           apply_weights, baseline_bits, baseline_mse, build_design, comm_cost_bits, debias,
                           decode, estimate, log2_ceil, planning_design, project_simplex, residue_marginals,
                           variance_weights, worst_case_mse_bound)
from mssfo.mechanisms import mss_perturb_batch, ss_estimate
from mssfo.moduli import design_kappa

LN4 = math.log(4)


def zipf(k, s=3.0):
    f = np.arange(1, k + 1, dtype=float) ** -s
    return f / f.sum()


def test_design_example():
    A = build_design(ModuliSet.build((2, 3), 4, 1.0, check=False)).A.to_dense()
    np.testing.assert_array_equal(A, [[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 0, 1], [0, 1, 0, 0], [0, 0, 1, 0]])


@pytest.mark.parametrize("moduli,k", [((29, 37, 41), 100), ((7, 11, 13), 28), ((101, 103, 107, 109), 400)])
def test_design_structure(moduli, k, rng):
    ms = ModuliSet.build(moduli, k, 1.0)
    A = build_design(ms).A
    np.testing.assert_array_equal(A.T @ np.ones(A.shape[0]), ms.ell)
    rows = A @ np.ones(k)
    for j, m in enumerate(moduli):
        block = rows[sum(moduli[:j]):sum(moduli[:j]) + m]
        assert set(block.astype(int)) <= {k // m, -(-k // m)}
    f = rng.dirichlet(np.ones(k))
    np.testing.assert_allclose(A @ f, np.concatenate(residue_marginals(f, ms)), atol=1e-15)
    brute = [np.array([sum(f[x] for x in range(k) if x % m == a) for a in range(m)]) for m in moduli]
    np.testing.assert_allclose(np.concatenate(residue_marginals(f, ms)), np.concatenate(brute), atol=1e-14)


def test_weights_direct_formula():
    ms = ModuliSet.build((3, 5), 15, LN4, check=False)
    w = variance_weights(ms, [100, 100])
    for j, (m, p, q) in enumerate([(3, 2 / 3, 1 / 6), (5, 0.5, 0.125)]):
        pi = q + (p - q) / m
        assert w[j] == pytest.approx((p - q) / math.sqrt(pi * (1 - pi) / 100), rel=1e-12)
        assert ms.blocks[j].q == pytest.approx(q)


def test_equal_blocks_equal_weights():
    ms = ModuliSet.build((101, 103), 150, 1.0)
    w = variance_weights(ModuliSet.build((101, 101), 150, 1.0, check=False), [50, 50])
    assert w[0] == w[1]
    assert variance_weights(ms, [50, 50])[0] != variance_weights(ms, [50, 50])[1]


def test_zero_block_weight_and_no_data():
    ms = ModuliSet.build((29, 37, 41), 100, 1.0)
    w = variance_weights(ms, [10, 0, 5])
    assert w[1] == 0 and w[0] > 0
    with pytest.raises(InvalidArgument):
        variance_weights(ms, [0, 0, 0])


def test_doubling_counts_scales_weights_keeps_estimate(rng):
    ms = ModuliSet.build((29, 37, 41), 100, 1.0)
    batch = mss_perturb_batch(rng.choice(100, size=5000, p=zipf(100)), ms, rng)
    counts = aggregate_batch(batch.blocks, batch.subsets, ms)
    doubled = counts + counts
    d1 = apply_weights(build_design(ms), counts.reports)
    d2 = apply_weights(build_design(ms), doubled.reports)
    np.testing.assert_allclose(d2.sqrt_w, math.sqrt(2) * d1.sqrt_w, rtol=1e-15)
    np.testing.assert_array_equal(debias(doubled, ms), debias(counts, ms))
    x1 = decode(counts, ms).f_hat
    x2 = decode(doubled, ms).f_hat
    # equal up to the solver tolerance
    np.testing.assert_allclose(x2, x1, rtol=1e-8, atol=1e-12)


def test_aggregate_examples():
    ms = ModuliSet.build((5, 7), 20, 0.1, check=False)
    empty = aggregate([], ms)
    assert empty.n == 0 and all(c.sum() == 0 for c in empty.counts)
    one = aggregate([MssReport(0, (1, 2))], ms)
    assert one.counts[0][1] == one.counts[0][2] == 1 and one.reports[0] == 1
    with pytest.raises(InvalidArgument):
        aggregate([MssReport(0, (1,))], ms)
    with pytest.raises(InvalidArgument):
        aggregate([MssReport(3, (1, 2))], ms)


def test_aggregate_batch_matches_single_pass(rng):
    ms = ModuliSet.build((29, 37, 41), 100, 0.5)
    batch = mss_perturb_batch(rng.integers(100, size=10_000), ms, rng)
    a = aggregate(batch.reports(), ms)
    b = aggregate_batch(batch.blocks, batch.subsets, ms)
    assert a.n == b.n == 10_000
    np.testing.assert_array_equal(a.reports, b.reports)
    for ca, cb, blk in zip(a.counts, b.counts, ms.blocks):
        np.testing.assert_array_equal(ca, cb)
    for c, r, blk in zip(b.counts, b.reports, ms.blocks):
        assert c.sum() == r * blk.omega


def test_debias_zero_point_and_noiseless():
    ms = ModuliSet.build((29, 37, 41), 100, 1.0)
    counts = BlockCounts([np.full(b.m, b.q * 10) for b in ms.blocks], np.full(3, 10))
    np.testing.assert_allclose(debias(counts, ms), 0.0, atol=1e-12)
    big = ModuliSet.build((29, 37, 41), 100, 60.0)
    ybar = [np.eye(b.m)[0] for b in big.blocks]
    counts = BlockCounts([y * 4 for y in ybar], np.full(3, 4))
    np.testing.assert_allclose(debias(counts, big), np.concatenate(ybar), atol=1e-12)


def test_debias_unbiased(rng):
    ms = ModuliSet.build((7, 11, 13), 28, 1.0)
    f = zipf(28, 1.0)
    target = np.concatenate(residue_marginals(f, ms))
    trials = 500
    S = np.empty((trials, ms.total_rows))
    for t in range(trials):
        batch = mss_perturb_batch(rng.choice(28, size=2000, p=f), ms, rng)
        S[t] = debias(aggregate_batch(batch.blocks, batch.subsets, ms), ms)
    se = S.std(axis=0, ddof=1) / math.sqrt(trials)
    assert np.mean(np.abs(S.mean(axis=0) - target) <= 3 * se) >= 0.95


def test_estimate_noiseless_recovers_f(rng):
    ms = ModuliSet.build((29, 37, 41), 100, 1.0)
    f = rng.dirichlet(np.ones(100))
    design = apply_weights(build_design(ms), [1000, 1000, 1000])
    x, rep = estimate(design, build_design(ms).A @ f)
    assert rep.converged
    np.testing.assert_allclose(x, f, atol=1e-8)


def test_single_modulus_equals_ss(rng):
    k, eps = 30, 1.0
    ms = ModuliSet.build((k,), k, eps, check=False)
    batch = mss_perturb_batch(rng.integers(k, size=4000), ms, rng)
    counts = aggregate_batch(batch.blocks, batch.subsets, ms)
    np.testing.assert_allclose(decode(counts, ms).f_hat, ss_estimate(counts.counts[0], k, eps, 4000),
                               rtol=0, atol=1e-12)


def test_decode_with_empty_block_needs_ridge():
    ms = ModuliSet.build((29, 37, 41), 100, 1.0)
    counts = BlockCounts.zeros(ms)
    counts.counts[0][:] = 3
    counts.reports[0] = 10
    res = decode(counts, ms, lam=0.5)
    assert np.all(np.isfinite(res.f_hat))
    with pytest.raises(InvalidArgument):
        decode(BlockCounts.zeros(ms), ms)


def test_project_simplex():
    np.testing.assert_allclose(project_simplex([0.5, -0.2, 1.5]), [0.25, 0.0, 0.75])


# analytic model -----------------------------------------------------------


def small_setting():
    return ModuliSet.build((5, 7), 10, 1.0), zipf(10, 1.0)


def test_covariance_scaling_and_psd():
    ms, f = small_setting()
    s1 = analytic_covariance(f, ms, 1000)
    s2 = analytic_covariance(f, ms, 2000)
    np.testing.assert_allclose(s2, s1 / 2, rtol=1e-12, atol=1e-18)
    assert np.allclose(s1, s1.T)
    assert np.linalg.eigvalsh(s1).min() > -1e-15
    emp = analytic_covariance(f, ms, 1000, reference="empirical")
    assert np.linalg.eigvalsh(emp).min() > -1e-12


def test_covariance_diagonal_formula():
    ms, f = small_setting()
    n = 800
    sigma = analytic_covariance(f, ms, n)
    diag = []
    for blk, g in zip(ms.blocks, residue_marginals(f, ms)):
        pi = blk.q + (blk.p - blk.q) * g
        diag.append(pi * (1 - pi) / ((n / ms.ell) * (blk.p - blk.q) ** 2))
    np.testing.assert_allclose(np.diag(sigma), np.concatenate(diag), rtol=1e-12)


def test_covariance_monte_carlo(rng):
    ms, f = small_setting()
    n, trials = 400, 20_000
    values = rng.choice(10, size=(trials, n), p=f)
    S = np.empty((trials, ms.total_rows))
    for t in range(trials):
        batch = mss_perturb_batch(values[t], ms, rng)
        S[t] = debias(aggregate_batch(batch.blocks, batch.subsets, ms), ms)
    emp = np.cov(S, rowvar=False)
    sigma = analytic_covariance(f, ms, n)
    d = np.diag(emp)
    noise = np.sqrt((np.outer(d, d) + emp**2) / trials)
    assert np.all(np.abs(emp - sigma) <= 5 * noise)


def test_analytic_mse_single_modulus_matches_ss_closed_form():
    n = 1e4
    for k in (256, 1024):
        for eps in (0.5, 1.0, 2.0):
            ms = ModuliSet.build((k,), k, eps, check=False)
            e = math.exp(eps)
            assert analytic_mse(np.full(k, 1 / k), ms, n) == pytest.approx(4 * e / (n * (e - 1) ** 2), rel=0.01)
            assert analytic_mse(np.full(k, 1 / k), ms, n) == pytest.approx(
                baseline_mse("ss", np.full(k, 1 / k), eps, n), rel=1e-12)


def test_analytic_mse_scales_as_one_over_n():
    ms = ModuliSet.build((29, 37, 41), 100, 1.0)
    f = zipf(100)
    vals = [analytic_mse(f, ms, n) * n for n in (1e3, 1e4, 1e5)]
    assert max(vals) / min(vals) - 1 < 1e-9


def test_hutchinson_agrees_with_exact():
    ms = ModuliSet.build((29, 37, 41), 100, 1.0)
    f = zipf(100)
    exact = analytic_mse(f, ms, 1e4, method="exact")
    probe = analytic_mse(f, ms, 1e4, method="hutchinson", seed=3)
    assert probe == pytest.approx(exact, rel=0.06)
    ridge_exact = analytic_mse(f, ms, 1e4, lam=1.0, method="exact")
    ridge_probe = analytic_mse(f, ms, 1e4, lam=1.0, method="hutchinson", seed=3)
    assert ridge_probe == pytest.approx(ridge_exact, rel=0.06)


def test_analytic_mse_rank_deficient():
    ms = ModuliSet.build((3, 5, 7), 50, 1.0, check=False)
    with pytest.raises(RankDeficient):
        analytic_mse(np.full(50, 0.02), ms, 1e4)
    assert analytic_mse(np.full(50, 0.02), ms, 1e4, lam=1.0) > 0


def test_worst_case_bound_examples():
    assert worst_case_mse_bound(2, LN4, 1e4) == pytest.approx(32 / (1e4 * 9))
    assert worst_case_mse_bound(1, 1.0, 1e4) == pytest.approx(4 * math.e / (1e4 * (math.e - 1) ** 2))
    with pytest.raises(InvalidArgument):
        worst_case_mse_bound(0.5, 1.0, 1e4)


@pytest.mark.parametrize("eps", [0.5, 1.0, 2.0])
def test_analytic_mse_below_worst_case_bound(rng, eps):
    ms = ModuliSet.build((29, 37, 41), 100, eps)
    bound = worst_case_mse_bound(design_kappa(ms), eps, 1e4)
    for f in [rng.dirichlet(np.ones(100) * a) for a in (0.01, 1.0, 100.0)] + [np.eye(100)[0]]:
        assert analytic_mse(f, ms, 1e4) <= bound


def test_bits():
    ms = ModuliSet.build((3, 5), 15, LN4, check=False)
    assert comm_cost_bits(ms) == 3.5
    assert baseline_bits("grr", 1024, 1.0) == 10
    assert baseline_bits("oue", 1024, 1.0) == 1024
    assert ss_params(1024, LN4).omega == 205
    ss = baseline_bits("ss", 1024, LN4)
    approx = (math.lgamma(1025) - math.lgamma(206) - math.lgamma(820)) / math.log(2)
    assert abs(ss - approx) <= 1
    assert ss == log2_ceil(math.comb(1024, 205))


def test_log2_ceil_exact_at_powers_of_two():
    for e in (1, 53, 54, 200):
        assert log2_ceil(2**e) == e
        assert log2_ceil(2**e + 1) == e + 1
    assert log2_ceil(1) == 0
