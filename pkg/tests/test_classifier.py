"""Compositional classifier: spatial fit, class scores, occlusion, argmax."""

import math

import numpy as np
import pytest

import ugt
from ugt.classifier import (
    OcclusionModel,
    assign_mixtures,
    class_log_likelihood,
    classify,
    fit_background_model,
    fit_spatial_coefficients,
    occluded_log_likelihood,
)
from ugt.errors import DegenerateClusterError, ValidationError
from ugt.synth import brute_force_class_likelihood, sample_feature_map
from tests.conftest import unit_rows


def _random_model(rng, c=3, m=2, h=2, w=2, k=3, d=5, sigma=4.0, occlusion=False):
    kernels = unit_rows(rng, k, d)
    alpha = rng.dirichlet(np.ones(k), size=(c, m, h, w))
    spatial = ugt.SpatialCoefficients(classes=tuple(range(c)), alpha=alpha)
    model = ugt.GenerativeModel(ugt.VmfDictionary(kernels, sigma, np.full(k, 1 / k)), spatial)
    if occlusion:
        q = ugt.VmfDictionary(unit_rows(rng, 2, d), sigma, np.array([0.5, 0.5]))
        model = model.with_occlusion(OcclusionModel(q, tau=0.55))
    return model


class TestAssignMixtures:
    def test_single_mixture(self):
        rng = np.random.default_rng(0)
        maps = [ugt.LikelihoodMap(rng.random((2, 2, 3)) + 0.1) for _ in range(5)]
        assert np.all(assign_mixtures(maps, 1, seed=0) == 0)

    def test_two_planted_viewpoints(self):
        rng = np.random.default_rng(1)
        k, h, w = 6, 3, 3
        kernels = unit_rows(rng, k, 8)
        d = ugt.VmfDictionary(kernels, 30.0, np.full(k, 1 / k))
        templates = rng.dirichlet(np.full(k, 0.3), size=(2, h, w))
        spatial = ugt.SpatialCoefficients(classes=(0,), alpha=templates[None, :, :, :, :])
        model = ugt.GenerativeModel(d, spatial)
        maps, true_m = [], []
        for i in range(40):
            m = i % 2
            fm, _ = sample_feature_map(model, 0, m, rng)
            maps.append(ugt.likelihood_map(fm, d))
            true_m.append(m)
        assign = assign_mixtures(maps, 2, seed=3)
        agreement = max(
            np.mean(assign == np.array(true_m)), np.mean(assign == 1 - np.array(true_m))
        )
        assert agreement >= 0.95

    def test_identical_maps_degenerate(self):
        values = np.full((2, 2, 3), 0.5)
        maps = [ugt.LikelihoodMap(values) for _ in range(6)]
        with pytest.raises(DegenerateClusterError):
            assign_mixtures(maps, 2, seed=0)

    def test_too_few_maps(self):
        maps = [ugt.LikelihoodMap(np.full((2, 2, 3), 0.5))]
        with pytest.raises(ValidationError):
            assign_mixtures(maps, 2, seed=0)


class TestFitSpatialCoefficients:
    def test_trivial_single_everything(self):
        v = np.zeros(4)
        v[0] = 1.0
        d = ugt.VmfDictionary(v[None, :], 30.0, np.array([1.0]))
        fm = ugt.FeatureMap(np.tile(v, (2, 2, 1)))
        spatial = fit_spatial_coefficients([fm], ["car"], d, m=1, seed=0)
        np.testing.assert_allclose(spatial.alpha, 1.0)

    def test_near_one_hot_posterior(self):
        rng = np.random.default_rng(2)
        kernels = unit_rows(rng, 5, 8)
        while np.abs(kernels @ kernels.T - np.eye(5)).max() > 0.5:
            kernels = unit_rows(rng, 5, 8)
        d = ugt.VmfDictionary(kernels, 30.0, np.full(5, 0.2))
        vectors = np.tile(kernels[3], (3, 3, 1))
        maps = [ugt.FeatureMap(vectors) for _ in range(3)]
        spatial = fit_spatial_coefficients(maps, [0, 0, 0], d, m=1, seed=0)
        assert np.all(spatial.alpha[0, 0, :, :, 3] >= 0.99)

    def test_planted_alpha_recovery_tv_distance(self):
        spec = ugt.DomainPairSpec(
            n_classes=3, k=24, dim=16, height=7, width=7, mixtures=2,
            maps_per_class_source=400, maps_per_class_target=1, seed=12,
        )
        source, _, truth = ugt.make_domain_pair(spec)
        d = truth.source_model.dictionary
        spatial = fit_spatial_coefficients(list(source.maps), list(source.labels), d, m=2, seed=0)
        planted = truth.source_model.spatial
        worst_tv = 0.0
        for ci, y in enumerate(spatial.classes):
            fit_a = spatial.for_class(y).reshape(2, -1, 24)
            true_a = planted.for_class(y).reshape(2, -1, 24)
            best = None
            for perm in ((0, 1), (1, 0)):
                tv = 0.5 * np.abs(fit_a[list(perm)] - true_a).sum(axis=2).mean()
                best = tv if best is None else min(best, tv)
            worst_tv = max(worst_tv, best)
        assert worst_tv <= 0.1

    def test_class_with_too_few_maps(self):
        rng = np.random.default_rng(3)
        d = ugt.VmfDictionary(unit_rows(rng, 3, 5), 30.0, np.full(3, 1 / 3))
        fm = ugt.FeatureMap(unit_rows(rng, 4, 5).reshape(2, 2, 5))
        with pytest.raises(ValidationError):
            fit_spatial_coefficients([fm], [0], d, m=2, seed=0)


class TestClassLogLikelihood:
    def test_single_kernel_unit_map(self):
        v = np.zeros(4)
        v[0] = 1.0
        d = ugt.VmfDictionary(v[None, :], 30.0, np.array([1.0]))
        spatial = ugt.SpatialCoefficients(classes=(7,), alpha=np.ones((1, 1, 1, 1, 1)))
        model = ugt.GenerativeModel(d, spatial)
        fm = ugt.FeatureMap(v.reshape(1, 1, 4))
        assert class_log_likelihood(fm, model, 7) == pytest.approx(30.0)

    def test_duplicate_mixture_identity(self):
        rng = np.random.default_rng(4)
        kernels = unit_rows(rng, 3, 5)
        alpha1 = rng.dirichlet(np.ones(3), size=(1, 1, 2, 2))
        alpha2 = np.concatenate([alpha1, alpha1], axis=1)
        d = ugt.VmfDictionary(kernels, 5.0, np.full(3, 1 / 3))
        m1 = ugt.GenerativeModel(d, ugt.SpatialCoefficients(classes=(0,), alpha=alpha1))
        m2 = ugt.GenerativeModel(d, ugt.SpatialCoefficients(classes=(0,), alpha=alpha2))
        fm = ugt.FeatureMap(unit_rows(rng, 4, 5).reshape(2, 2, 5))
        assert class_log_likelihood(fm, m1, 0) == pytest.approx(class_log_likelihood(fm, m2, 0))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            model = _random_model(rng)
            fm = ugt.FeatureMap(unit_rows(rng, 4, 5).reshape(2, 2, 5))
            for y in model.classes:
                assert class_log_likelihood(fm, model, y) == pytest.approx(
                    brute_force_class_likelihood(fm, model, y), abs=1e-9
                )

    def test_unknown_class(self):
        model = _random_model(np.random.default_rng(7))
        fm = ugt.FeatureMap(unit_rows(np.random.default_rng(8), 4, 5).reshape(2, 2, 5))
        with pytest.raises(ValidationError):
            class_log_likelihood(fm, model, "no-such-class")

    def test_alpha_mass_monotonicity(self):
        # moving template mass onto each position's best kernel never hurts
        rng = np.random.default_rng(9)
        model = _random_model(rng, c=1, m=1)
        fm = ugt.FeatureMap(unit_rows(rng, 4, 5).reshape(2, 2, 5))
        base = class_log_likelihood(fm, model, 0)
        scores = fm.flat @ model.dictionary.kernels.T
        best = np.argmax(scores, axis=1)
        alpha = model.spatial.alpha.copy()
        flat = alpha[0, 0].reshape(4, 3)
        for a in range(4):
            flat[a, best[a]] += 0.5
            flat[a] /= flat[a].sum()
        better = ugt.GenerativeModel(
            model.dictionary, ugt.SpatialCoefficients(classes=(0,), alpha=alpha)
        )
        assert class_log_likelihood(fm, better, 0) >= base - 1e-12


class TestOccludedLogLikelihood:
    def test_tau_to_zero_recovers_plain(self):
        rng = np.random.default_rng(10)
        model = _random_model(rng)
        q = ugt.VmfDictionary(unit_rows(rng, 2, 5), 4.0, np.array([0.5, 0.5]))
        occluded = model.with_occlusion(OcclusionModel(q, tau=1e-12))
        fm = ugt.FeatureMap(unit_rows(rng, 4, 5).reshape(2, 2, 5))
        for y in model.classes:
            value, mask = occluded_log_likelihood(fm, occluded, y)
            assert value == pytest.approx(class_log_likelihood(fm, model, y), abs=1e-6)
            assert not mask.values.any()

    def test_background_features_fully_masked(self):
        # features orthogonal to all class kernels, aligned with Q
        d, k = 8, 3
        kernels = np.zeros((k, d))
        kernels[np.arange(k), np.arange(k)] = 1.0
        q_dir = np.zeros(d)
        q_dir[d - 1] = 1.0
        q = ugt.VmfDictionary(q_dir[None, :], 30.0, np.array([1.0]))
        alpha = np.full((2, 1, 2, 2, k), 1.0 / k)
        rng = np.random.default_rng(11)
        alpha[0] = rng.dirichlet(np.ones(k), size=(1, 2, 2))
        alpha[1] = rng.dirichlet(np.ones(k), size=(1, 2, 2))
        model = ugt.GenerativeModel(
            ugt.VmfDictionary(kernels, 30.0, np.full(k, 1 / k)),
            ugt.SpatialCoefficients(classes=(0, 1), alpha=alpha),
            OcclusionModel(q, tau=0.55),
        )
        fm = ugt.FeatureMap(np.tile(q_dir, (2, 2, 1)))
        values = []
        for y in (0, 1):
            value, mask = occluded_log_likelihood(fm, model, y)
            assert mask.values.mean() >= 0.9
            values.append(value)
        assert abs(values[0] - values[1]) <= 1e-6

    def test_matches_brute_force_over_all_masks(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            model = _random_model(rng, occlusion=True)
            fm = ugt.FeatureMap(unit_rows(rng, 4, 5).reshape(2, 2, 5))
            for y in model.classes:
                value, _ = occluded_log_likelihood(fm, model, y)
                assert value == pytest.approx(
                    brute_force_class_likelihood(fm, model, y), abs=1e-9
                )

    def test_bounds_against_forced_masks(self):
        rng = np.random.default_rng(13)
        model = _random_model(rng, occlusion=True)
        occ = model.occlusion
        fm = ugt.FeatureMap(unit_rows(rng, 4, 5).reshape(2, 2, 5))
        logq = occ.log_background(fm).sum()
        for y in model.classes:
            value, _ = occluded_log_likelihood(fm, model, y)
            all_occluded = 4 * math.log(occ.tau) + logq
            all_clear = 4 * math.log1p(-occ.tau) + class_log_likelihood(fm, model, y)
            # the max-over-masks beats forcing either extreme everywhere
            assert value >= all_occluded - 1e-9
            assert value >= all_clear - 1e-9

    def test_requires_occlusion_model(self):
        model = _random_model(np.random.default_rng(14))
        fm = ugt.FeatureMap(unit_rows(np.random.default_rng(15), 4, 5).reshape(2, 2, 5))
        with pytest.raises(ValidationError):
            occluded_log_likelihood(fm, model, 0)

    def test_sum_over_z_at_least_max(self):
        rng = np.random.default_rng(16)
        model = _random_model(rng, occlusion=True)
        fm = ugt.FeatureMap(unit_rows(rng, 4, 5).reshape(2, 2, 5))
        vmax, _ = occluded_log_likelihood(fm, model, 0)
        vsum, _ = occluded_log_likelihood(fm, model, 0, sum_over_z=True)
        assert vsum >= vmax - 1e-12


class TestClassify:
    def test_planted_model_high_accuracy(self):
        rng = np.random.default_rng(17)
        spec = ugt.DomainPairSpec(
            n_classes=3, k=12, dim=12, height=5, width=5, mixtures=2,
            maps_per_class_source=1, maps_per_class_target=1, seed=21,
        )
        _, _, truth = ugt.make_domain_pair(spec)
        model = truth.source_model
        hits = 0
        for i in range(200):
            y = i % 3
            fm, _ = sample_feature_map(model, y, int(rng.integers(2)), rng)
            label, _ = classify(fm, model)
            hits += label == y
        assert hits / 200 >= 0.95

    def test_single_class(self):
        model = _random_model(np.random.default_rng(18), c=1)
        fm = ugt.FeatureMap(unit_rows(np.random.default_rng(19), 4, 5).reshape(2, 2, 5))
        label, scores = classify(fm, model)
        assert label == 0
        assert set(scores) == {0}

    def test_tie_breaks_to_lowest_class_id(self):
        rng = np.random.default_rng(20)
        kernels = unit_rows(rng, 3, 5)
        alpha_one = rng.dirichlet(np.ones(3), size=(1, 2, 2))
        alpha = np.stack([alpha_one, alpha_one, alpha_one])
        model = ugt.GenerativeModel(
            ugt.VmfDictionary(kernels, 5.0, np.full(3, 1 / 3)),
            ugt.SpatialCoefficients(classes=(2, 5, 9), alpha=alpha),
        )
        fm = ugt.FeatureMap(unit_rows(rng, 4, 5).reshape(2, 2, 5))
        label, scores = classify(fm, model)
        assert label == 2
        assert scores[2] == scores[5] == scores[9]

    def test_score_shift_invariance(self):
        # adding any constant normalizer offset to all log scores keeps the argmax
        rng = np.random.default_rng(21)
        model = _random_model(rng)
        for _ in range(10):
            fm = ugt.FeatureMap(unit_rows(rng, 4, 5).reshape(2, 2, 5))
            label, scores = classify(fm, model)
            shifted = {y: s - 123.456 for y, s in scores.items()}
            assert max(sorted(shifted), key=lambda y: shifted[y]) == label


class TestFitBackgroundModel:
    def test_uniform_sphere_mean_logq(self):
        rng = np.random.default_rng(22)
        d = 16
        train = unit_rows(rng, 2000, d)
        q = fit_background_model(train, 1, 30.0, ugt.EmConfig(seed=0))
        fresh = unit_rows(rng, 10000, d)
        occ = OcclusionModel(q, tau=0.5)
        fm_scores = 30.0 * (fresh @ q.kernels.T)
        mean_logq = float(np.mean(fm_scores))
        assert abs(mean_logq) <= 30.0 * 3 / math.sqrt(d)

    def test_point_mass_background(self):
        v = np.zeros(6)
        v[1] = 1.0
        q = fit_background_model(np.tile(v, (50, 1)), 1, 30.0, ugt.EmConfig(seed=0))
        np.testing.assert_allclose(q.kernels[0], v, atol=1e-9)

    def test_planted_background_recovery(self):
        from tests.conftest import hungarian_min_cosine

        rng = np.random.default_rng(23)
        mus = unit_rows(rng, 5, 10)
        while np.abs(mus @ mus.T - np.eye(5)).max() > 0.4:
            mus = unit_rows(rng, 5, 10)
        feats = np.concatenate([ugt.sample_vmf(mus[i], 30.0, rng, 1000) for i in range(5)])
        q = fit_background_model(feats, 5, 30.0, ugt.EmConfig(seed=1))
        min_cos, _ = hungarian_min_cosine(q.kernels, mus)
        assert min_cos >= 0.99


class TestMixturePermutation:
    def test_uniform_prior_mixture_permutation(self):
        rng = np.random.default_rng(24)
        model = _random_model(rng, c=2, m=3)
        perm = np.array([2, 0, 1])
        permuted = ugt.GenerativeModel(
            model.dictionary,
            ugt.SpatialCoefficients(classes=model.classes, alpha=model.spatial.alpha[:, perm]),
        )
        fm = ugt.FeatureMap(unit_rows(rng, 4, 5).reshape(2, 2, 5))
        for y in model.classes:
            assert class_log_likelihood(fm, model, y) == pytest.approx(
                class_log_likelihood(fm, permuted, y), abs=1e-12
            )
