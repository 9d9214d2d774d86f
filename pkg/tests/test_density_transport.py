import itertools

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from pfo_fdir.density_transport import (GMMConfig, ParticleEnsemble, fit_gmm, gaussian_w2, matched_gmm_pair,
                                        mixture_from_responsibilities, mmd2, pushforward, wasserstein2)
from pfo_fdir.errors import ArgumentError, NumericError

TOL = 1e-12


def brute_force_w2(a, b):
    n = len(a)
    perms = np.array(list(itertools.permutations(range(n))))
    cost = cdist(a, b, "sqeuclidean")[np.arange(n), perms].sum(axis=1)
    return np.sqrt(cost.min() / n)


def test_exact_w2_matches_permutation_search():
    rng = np.random.default_rng(0)
    sizes = []
    for trial in range(200):
        n = rng.integers(1, 8)
        sizes.append(n)
        a, b = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
        w2 = wasserstein2(ParticleEnsemble(a), ParticleEnsemble(b))[0]
        ref = brute_force_w2(a, b)
        assert abs(w2 - ref) < TOL, f"trial {trial}: W2 {w2} vs brute force {ref}"
    assert max(sizes) == 7


def test_w2_is_a_metric():
    rng = np.random.default_rng(7)

    def ensemble():
        return ParticleEnsemble(rng.standard_normal((rng.integers(3, 9), 2)) + rng.uniform(-2, 2, size=2))

    for trial in range(100):
        a, b, c = ensemble(), ensemble(), ensemble()
        ab, ba = wasserstein2(a, b)[0], wasserstein2(b, a)[0]
        assert abs(ab - ba) < 1e-10, f"trial {trial}: W2(a, b) = {ab}, W2(b, a) = {ba}"
        assert wasserstein2(a, a)[0] < 1e-10
        bc, ac = wasserstein2(b, c)[0], wasserstein2(a, c)[0]
        assert ac <= ab + bc + 1e-8, f"trial {trial}: triangle inequality fails, {ac} > {ab} + {bc}"


def test_w2_between_diracs_is_point_distance():
    x, y = np.array([1.0, 2.0]), np.array([-1.0, 0.5])
    w2 = wasserstein2(ParticleEnsemble.dirac(x), ParticleEnsemble.dirac(y))[0]
    assert abs(w2 - np.linalg.norm(x - y)) < TOL


def test_weighted_w2_uses_network_simplex():
    a = ParticleEnsemble(np.array([[0.0], [1.0]]), np.array([0.25, 0.75]))
    b = ParticleEnsemble(np.array([[0.0], [1.0], [2.0]]))
    w2, plan = wasserstein2(a, b)
    assert plan.method == "exact"
    assert np.allclose(plan.coupling.sum(1), a.weights) and np.allclose(plan.coupling.sum(0), b.weights)
    assert w2 > 0


def test_one_dimensional_gaussian_samples():
    rng = np.random.default_rng(1)
    a = ParticleEnsemble(rng.normal(0.0, 1.0, size=(1000, 1)))
    b = ParticleEnsemble(rng.normal(1.0, 1.0, size=(1000, 1)))
    w2 = wasserstein2(a, b)[0]
    assert abs(w2 - 1.0) <= 0.1, f"W2 {w2:.3f} between unit Gaussians one apart"


def test_entropic_plan_is_feasible_and_bounds_exact():
    rng = np.random.default_rng(2)
    a, b = ParticleEnsemble(rng.standard_normal((30, 2))), ParticleEnsemble(rng.standard_normal((30, 2)) + 0.5)
    exact = wasserstein2(a, b, "exact")[0]
    entropic, plan = wasserstein2(a, b, "entropic", reg_scale=0.05)
    assert np.allclose(plan.coupling.sum(1), a.weights, atol=1e-12)
    assert np.allclose(plan.coupling.sum(0), b.weights, atol=1e-12)
    assert entropic >= exact - 1e-9, f"entropic {entropic} below exact {exact}"


def test_gaussian_w2_closed_form():
    w2 = gaussian_w2([0.0], [[4.0]], [3.0], [[1.0]])
    # 1D: sqrt(dm^2 + (s1 - s2)^2)
    assert abs(w2 - np.sqrt(9.0 + 1.0)) < TOL
    w2 = gaussian_w2(np.zeros(2), np.eye(2), np.zeros(2), 4.0 * np.eye(2))
    assert abs(w2 - np.sqrt(2.0)) < TOL, f"W2(N(0, I), N(0, 4I)) = {w2}, expected sqrt(2)"
    # sqrt amplifies rounding in the trace near zero
    assert gaussian_w2([1.0, -1.0], [[2.0, 0.3], [0.3, 1.0]], [1.0, -1.0], [[2.0, 0.3], [0.3, 1.0]]) < 1e-6
    with pytest.raises(ArgumentError):
        gaussian_w2([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0], np.eye(2))


def test_mmd2_properties():
    rng = np.random.default_rng(3)
    a = ParticleEnsemble(rng.standard_normal((50, 2)))
    assert abs(mmd2(a, a, unbiased=False)) < TOL
    far = ParticleEnsemble(rng.standard_normal((50, 2)) + 5.0)
    assert mmd2(a, far) > mmd2(a, ParticleEnsemble(rng.standard_normal((50, 2))))
    b = ParticleEnsemble(rng.standard_normal((40, 2)) + 0.5, rng.dirichlet(np.ones(40)))
    for unbiased in (True, False):
        ab, ba = mmd2(a, b, unbiased=unbiased), mmd2(b, a, unbiased=unbiased)
        assert abs(ab - ba) < TOL, f"mmd2(a, b) = {ab}, mmd2(b, a) = {ba}"
    with pytest.raises(ArgumentError):
        mmd2(ParticleEnsemble.dirac(np.zeros(2)), a)


def test_dirac_pushforward_is_exact():
    points = np.random.default_rng(4).standard_normal((5, 3))

    def point_map(x):
        return np.sin(x) + x ** 2

    for x in points:
        out = pushforward(ParticleEnsemble.dirac(x), point_map)
        assert np.array_equal(out.points[0], point_map(x[None])[0])
        assert np.array_equal(out.weights, np.ones(1))


def test_pushforward_rejects_nonfinite_image():
    with pytest.raises(NumericError):
        pushforward(ParticleEnsemble(np.ones((3, 1))), lambda x: np.full_like(x, np.nan))


def test_ensemble_validation_and_resampling():
    with pytest.raises(NumericError):
        ParticleEnsemble(np.array([[0.0], [np.nan]]))
    ens = ParticleEnsemble(np.arange(6.0)[:, None], np.array([0.0, 0.0, 0.0, 0.0, 0.5, 0.5]))
    out = ens.resample(np.random.default_rng(0))
    assert out.size == 6 and out.is_uniform
    assert set(out.points[:, 0]) <= {4.0, 5.0}, f"resampled zero-weight particles: {out.points[:, 0]}"


def test_em_is_monotone():
    rng = np.random.default_rng(5)
    for trial in range(10):
        centers = rng.uniform(-5, 5, size=(3, 2))
        X = np.concatenate([c + 0.5 * rng.standard_normal((60, 2)) for c in centers])
        mix = fit_gmm(ParticleEnsemble(X), 3, GMMConfig(seed=trial))
        steps = np.diff(mix.log_likelihood)
        assert np.all(steps >= -1e-9 * max(1.0, abs(mix.log_likelihood[0]))), f"trial {trial}: {steps.min()}"
        assert abs(mix.weights.sum() - 1.0) < 1e-10


def test_two_diracs_two_components():
    X = np.array([[0.0, 0.0]] * 5 + [[10.0, 10.0]] * 5)
    mix = fit_gmm(ParticleEnsemble(X), 2)
    order = np.argsort(mix.means[:, 0])
    assert np.allclose(mix.means[order], [[0.0, 0.0], [10.0, 10.0]], atol=1e-8)
    assert np.allclose(mix.weights, 0.5)


def test_matched_pair_shares_weights_and_responsibilities():
    rng = np.random.default_rng(6)
    X = np.concatenate([rng.standard_normal((40, 2)), rng.standard_normal((40, 2)) + 6.0])
    shift = np.array([1.0, -2.0])
    fmix, nmix = matched_gmm_pair(ParticleEnsemble(X), ParticleEnsemble(X + shift), 2)
    assert np.array_equal(fmix.weights, nmix.weights)
    assert fmix.assignment is nmix.assignment and fmix.assignment.shape == (80, 2)
    assert np.allclose(nmix.means, fmix.means + shift, atol=1e-10)
    assert np.allclose(nmix.covs, fmix.covs, atol=1e-10)
    with pytest.raises(ArgumentError):
        matched_gmm_pair(ParticleEnsemble(X), ParticleEnsemble(X[:10]), 2)


def test_mixture_from_hard_responsibilities():
    X = np.array([[0.0], [2.0], [10.0], [14.0]])
    resp = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=float)
    mix = mixture_from_responsibilities(X, np.full(4, 0.25), resp, 0.0)
    assert np.allclose(mix.means[:, 0], [1.0, 12.0])
    assert np.allclose(mix.covs[:, 0, 0], [1.0, 4.0])


def test_component_counts_come_from_final_responsibilities():
    rng = np.random.default_rng(8)
    X = np.concatenate([rng.normal(0.0, 0.5, size=(20, 1)), rng.normal(10.0, 0.5, size=(20, 1))])
    mix = fit_gmm(ParticleEnsemble(X), 2)
    assert np.allclose(np.sort(mix.component_counts), [20.0, 20.0], atol=1e-6)
    assert not mix.degenerate

    lonely = fit_gmm(ParticleEnsemble(np.concatenate([X, [[100.0]]])), 3)
    counts = lonely.component_counts
    assert abs(counts.sum() - 41.0) < 1e-9 and counts.min() <= 1.0 + 1e-6, f"counts {counts}"
    assert lonely.degenerate, "a component holding a single particle must be flagged"
