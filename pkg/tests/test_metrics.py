"""Disentanglement and generative metrics vs brute-force oracles."""

import itertools

import numpy as np
import pytest

from scmvae.metrics import (
    chamfer,
    emd,
    knn_predict,
    one_nna,
    one_sample_ttest,
    pbc,
    pcc,
    recon_error,
    sap,
)

RNG = np.random.default_rng(2024)


# ---------------------------------------------------------------------------
# Correlations


def test_pcc_matches_direct_formula():
    for _ in range(20):
        x = RNG.standard_normal(30)
        y = RNG.standard_normal(30)
        num = ((x - x.mean()) * (y - y.mean())).sum()
        den = np.sqrt(((x - x.mean()) ** 2).sum() * ((y - y.mean()) ** 2).sum())
        assert pcc(x, y) == pytest.approx(num / den, abs=1e-12)


def test_pcc_perfect_and_inverse():
    x = np.arange(10.0)
    assert pcc(x, 3 * x + 1) == pytest.approx(1.0, abs=1e-12)
    assert pcc(x, -x) == pytest.approx(-1.0, abs=1e-12)


def test_pcc_errors():
    with pytest.raises(ValueError):
        pcc([1.0, 2.0], [1.0, 2.0])  # too short
    with pytest.raises(ValueError):
        pcc(np.ones(5), np.arange(5.0))  # zero variance


def test_pbc_matches_direct_formula():
    for _ in range(20):
        b = RNG.integers(0, 2, 40)
        if len(set(b)) < 2:
            continue
        x = RNG.standard_normal(40)
        n1, n0 = (b == 1).sum(), (b == 0).sum()
        expect = ((x[b == 1].mean() - x[b == 0].mean()) / x.std(ddof=1)
                  * np.sqrt(n1 * n0 / (40 * 39)))
        assert pbc(b, x) == pytest.approx(expect, abs=1e-12)


def test_pbc_equals_pcc_on_binary():
    # the point-biserial coefficient is the Pearson coefficient applied to a
    # 0/1 variable; use that identity as an independent oracle
    b = np.array([0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 1])
    x = RNG.standard_normal(12)
    assert pbc(b, x) == pytest.approx(pcc(b.astype(float), x), abs=1e-12)


def test_pbc_requires_both_classes():
    with pytest.raises(ValueError):
        pbc(np.ones(5, dtype=int), RNG.standard_normal(5))


# ---------------------------------------------------------------------------
# SAP


def test_sap_ideal_disentanglement():
    # factor 0 fully determined by latent 0, factor 1 by latent 1, other
    # latents pure noise: SAP should be close to 1 for both factors
    n = 500
    f = RNG.standard_normal((n, 2))
    latents = np.column_stack([f[:, 0], f[:, 1], RNG.standard_normal(n)])
    matrix, per_factor, mean = sap(latents, f)
    assert per_factor[0] > 0.95 and per_factor[1] > 0.95
    assert mean == pytest.approx(per_factor.mean())
    assert matrix.scores.shape == (3, 2)


def test_sap_entangled_is_low():
    # both factors read the same latent: top-two scores tie, gap ~ 0
    n = 500
    u = RNG.standard_normal(n)
    latents = np.column_stack([u, u + 1e-9 * RNG.standard_normal(n),
                               RNG.standard_normal(n)])
    _, per_factor, _ = sap(latents, u)
    assert per_factor[0] < 0.05


def test_sap_scores_match_r2_oracle():
    n = 100
    latents = RNG.standard_normal((n, 4))
    f = RNG.standard_normal(n)
    matrix, _, _ = sap(latents, f)
    for i in range(4):
        r2 = pcc(latents[:, i], f) ** 2  # single-regressor R^2 = corr^2
        assert matrix.scores[i, 0] == pytest.approx(r2, abs=1e-12)


def test_sap_needs_enough_samples():
    with pytest.raises(ValueError):
        sap(np.zeros((5, 3)), np.zeros(5))


# ---------------------------------------------------------------------------
# KNN readout


def test_knn_classify_perfectly_separated():
    train = np.r_[np.zeros(20), np.ones(20) * 10.0]
    labels = np.r_[np.zeros(20, dtype=int), np.ones(20, dtype=int)]
    test = np.array([0.1, 9.9, -0.2, 10.3])
    acc = knn_predict(train, labels, test, np.array([0, 1, 0, 1]), k=5)
    assert acc == 100.0


def test_knn_classify_matches_manual_vote():
    train = np.array([0.0, 0.1, 0.2, 1.0, 1.1])
    labels = np.array([0, 0, 1, 1, 1])
    # neighbors of 0.05 by distance: 0.0(0), 0.1(0), 0.2(1), 1.0(1), 1.1(1)
    # k=3 vote -> class 0 (two of three)
    acc = knn_predict(train, labels, np.array([0.05]), np.array([0]), k=3)
    assert acc == 100.0
    acc = knn_predict(train, labels, np.array([0.05]), np.array([1]), k=3)
    assert acc == 0.0


def test_knn_regress_matches_mean_of_neighbors():
    train = np.array([0.0, 1.0, 2.0, 10.0])
    y = np.array([0.0, 1.0, 2.0, 10.0])
    # for query 0.4 with k=3 the neighbors are 0, 1, 2 -> prediction 1.0
    mse = knn_predict(train, y, np.array([0.4]), np.array([1.0]), k=3,
                      mode="regress")
    assert mse == pytest.approx(0.0, abs=1e-12)


def test_knn_deterministic_under_distance_ties():
    train = np.array([-1.0, 1.0, -1.0, 1.0])
    labels = np.array([0, 1, 1, 0])
    # query 0 is equidistant from everything; stable argsort picks index
    # order (labels 0, 1, 1) for k=3 -> majority 1
    a = knn_predict(train, labels, np.zeros(1), np.array([1]), k=3)
    b = knn_predict(train, labels, np.zeros(1), np.array([1]), k=3)
    assert a == b == 100.0


# ---------------------------------------------------------------------------
# Reconstruction / point-set distances


def test_recon_error_matches_oracle():
    x = RNG.standard_normal((4, 6, 3))
    x_hat = RNG.standard_normal((4, 6, 3))
    expect = np.mean([np.mean(np.sum((x[i] - x_hat[i]) ** 2, axis=1))
                      for i in range(4)])
    assert recon_error(x, x_hat) == pytest.approx(expect, abs=1e-12)
    assert recon_error(x, x) == 0.0


def test_chamfer_identity_and_symmetry():
    x = RNG.standard_normal((50, 3))
    y = RNG.standard_normal((60, 3))
    assert chamfer(x, x) == 0.0
    assert chamfer(x, y) == pytest.approx(chamfer(y, x), abs=1e-12)


def test_chamfer_matches_brute_force_large_sets():
    # exercise the tree-based path and compare against the direct formula
    x = RNG.standard_normal((300, 3))
    y = RNG.standard_normal((400, 3))
    d = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    expect = d.min(axis=1).mean() + d.min(axis=0).mean()
    assert chamfer(x, y) == pytest.approx(expect, abs=1e-12)


def test_chamfer_known_value():
    x = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    y = np.array([[0.0, 0, 0], [3.0, 0, 0]])
    # x->y: 0 and min(1, 4) = 1 -> mean 0.5 ; y->x: 0 and 4 -> mean 2.0
    assert chamfer(x, y) == pytest.approx(2.5, abs=1e-14)


def test_emd_matches_full_enumeration():
    # oracle: minimum over all 8! assignments
    for trial in range(3):
        x = RNG.standard_normal((8, 3))
        y = RNG.standard_normal((8, 3))
        d = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
        best = min(sum(d[i, p[i]] for i in range(8)) / 8.0
                   for p in itertools.permutations(range(8)))
        assert emd(x, y) == pytest.approx(best, abs=1e-12)


def test_emd_identity_and_size_check():
    x = RNG.standard_normal((10, 3))
    assert emd(x, x) == 0.0
    assert emd(x, np.flipud(x)) == 0.0  # permutation invariant
    with pytest.raises(ValueError):
        emd(x, RNG.standard_normal((9, 3)))


# ---------------------------------------------------------------------------
# 1-NNA


def clouds_from(rng, n, center):
    return [center + 0.1 * rng.standard_normal((30, 3)) for _ in range(n)]


def test_one_nna_separated_distributions():
    rng = np.random.default_rng(3)
    gen = clouds_from(rng, 10, np.zeros(3))
    ref = clouds_from(rng, 10, np.array([10.0, 0, 0]))
    assert one_nna(gen, ref, distance="cd") == 100.0
    assert one_nna(gen, ref, distance="emd") == 100.0


def test_one_nna_same_distribution_near_chance():
    rng = np.random.default_rng(4)
    accs = []
    for trial in range(20):
        pool = clouds_from(rng, 20, np.zeros(3))
        perm = rng.permutation(20)
        gen = [pool[i] for i in perm[:10]]
        ref = [pool[i] for i in perm[10:]]
        accs.append(one_nna(gen, ref, distance="cd"))
    assert 40.0 <= np.mean(accs) <= 60.0


def test_one_nna_matches_manual_loo():
    rng = np.random.default_rng(5)
    gen = clouds_from(rng, 4, np.zeros(3))
    ref = clouds_from(rng, 4, np.array([0.2, 0, 0]))
    clouds = gen + ref
    labels = np.array([0] * 4 + [1] * 4)
    correct = 0
    for i in range(8):
        best, best_d = None, np.inf
        for j in range(8):
            if j == i:
                continue
            dij = chamfer(clouds[i], clouds[j])
            if dij < best_d:
                best, best_d = j, dij
        correct += labels[best] == labels[i]
    assert one_nna(gen, ref, distance="cd") == pytest.approx(100.0 * correct / 8)


def test_one_nna_validation():
    rng = np.random.default_rng(6)
    gen = clouds_from(rng, 3, np.zeros(3))
    with pytest.raises(ValueError):
        one_nna(gen, gen[:2])
    with pytest.raises(ValueError):
        one_nna(gen, gen, distance="hausdorff")


# ---------------------------------------------------------------------------
# t-test


def test_ttest_matches_scipy_reference():
    from scipy import stats
    d = RNG.standard_normal(15) + 0.4
    t, p = one_sample_ttest(d)
    ref = stats.ttest_1samp(d, 0.0)
    assert t == pytest.approx(ref.statistic, abs=1e-12)
    assert p == pytest.approx(ref.pvalue, abs=1e-12)


def test_ttest_manual_formula():
    d = np.array([1.0, 2.0, 3.0, 4.0])
    t, p = one_sample_ttest(d, hypothesized_mean=2.0)
    expect_t = (d.mean() - 2.0) / (d.std(ddof=1) / 2.0)
    assert t == pytest.approx(expect_t, abs=1e-12)
    assert 0.0 < p < 1.0


def test_ttest_validation():
    with pytest.raises(ValueError):
        one_sample_ttest([1.0])
    with pytest.raises(ValueError):
        one_sample_ttest([2.0, 2.0, 2.0])
