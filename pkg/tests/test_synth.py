"""Ground-truth generator: geometry, sampling statistics, occlusion injection."""

import math

import numpy as np
import pytest

import ugt
from ugt.errors import ValidationError
from ugt.synth import (
    OCCLUSION_LEVELS,
    brute_force_class_likelihood,
    inject_occlusion,
    make_background_model,
    make_domain_pair,
    sample_feature_map,
    sample_vmf,
)
from tests.conftest import unit_rows


class TestMakeDomainPair:
    def test_zero_shift_identical_models(self):
        spec = ugt.DomainPairSpec(
            n_classes=2, k=6, dim=8, height=3, width=3, mixtures=2,
            maps_per_class_source=4, maps_per_class_target=4, seed=1, shift_angle=0.0,
        )
        _, _, truth = make_domain_pair(spec)
        np.testing.assert_array_equal(
            truth.source_model.dictionary.kernels, truth.target_model.dictionary.kernels
        )

    def test_fully_shared_all_cosines_one(self):
        spec = ugt.DomainPairSpec(
            n_classes=2, k=6, dim=8, height=3, width=3, mixtures=2,
            maps_per_class_source=4, maps_per_class_target=4, seed=2, shared_kernel_fraction=1.0,
        )
        _, _, truth = make_domain_pair(spec)
        rep = ugt.kernel_similarity_report(
            truth.source_model.dictionary, truth.target_model.dictionary
        )
        np.testing.assert_allclose(rep.cosines, 1.0, atol=1e-12)

    def test_shift_cosine_exact(self):
        spec = ugt.DomainPairSpec(
            n_classes=3, k=24, dim=16, height=3, width=3, mixtures=2,
            maps_per_class_source=2, maps_per_class_target=2, seed=0,
            shared_kernel_fraction=0.5, shift_angle=math.pi / 3,
        )
        _, _, truth = make_domain_pair(spec)
        shared = set(truth.shared_kernels.tolist())
        src = truth.source_model.dictionary.kernels
        tgt = truth.target_model.dictionary.kernels
        for i in range(24):
            cos = float(src[i] @ tgt[i])
            if i in shared:
                assert cos == pytest.approx(1.0, abs=1e-12)
            else:
                assert cos == pytest.approx(math.cos(math.pi / 3), abs=1e-12)

    def test_spatial_templates_shared_across_domains(self):
        spec = ugt.DomainPairSpec(
            n_classes=2, k=6, dim=8, height=3, width=3, mixtures=2,
            maps_per_class_source=4, maps_per_class_target=4, seed=3,
        )
        _, _, truth = make_domain_pair(spec)
        assert truth.source_model.spatial is truth.target_model.spatial

    def test_deterministic(self):
        spec = ugt.DomainPairSpec(
            n_classes=2, k=6, dim=8, height=3, width=3, mixtures=2,
            maps_per_class_source=4, maps_per_class_target=4, seed=4,
        )
        a = make_domain_pair(spec)
        b = make_domain_pair(spec)
        np.testing.assert_array_equal(a[0].maps[0].vectors, b[0].maps[0].vectors)
        np.testing.assert_array_equal(a[1].maps[-1].vectors, b[1].maps[-1].vectors)

    def test_records_available_for_every_map(self):
        spec = ugt.DomainPairSpec(
            n_classes=2, k=6, dim=8, height=3, width=3, mixtures=2,
            maps_per_class_source=5, maps_per_class_target=7, seed=5,
        )
        source, target, truth = make_domain_pair(spec)
        assert len(truth.source_records) == len(source.maps) == 10
        assert len(truth.target_records) == len(target.maps) == 14
        assert target.labels is None
        for rec in truth.target_records:
            assert rec.kernel_indices.shape == (3, 3)


class TestSampleVmf:
    def test_concentration_limit(self):
        rng = np.random.default_rng(0)
        mu = unit_rows(rng, 1, 10)[0]
        draws = sample_vmf(mu, 1e6, rng, 50)
        assert np.min(draws @ mu) >= 0.999

    def test_fixed_rng_identical(self):
        mu = np.zeros(6)
        mu[0] = 1.0
        a = sample_vmf(mu, 30.0, np.random.default_rng(42), 10)
        b = sample_vmf(mu, 30.0, np.random.default_rng(42), 10)
        np.testing.assert_array_equal(a, b)

    def test_mean_resultant_direction(self):
        rng = np.random.default_rng(1)
        mu = unit_rows(rng, 1, 8)[0]
        draws = sample_vmf(mu, 30.0, rng, 5000)
        mean = draws.mean(axis=0)
        mean /= np.linalg.norm(mean)
        assert float(mean @ mu) >= 0.999

    def test_dimension_one(self):
        rng = np.random.default_rng(2)
        draws = sample_vmf(np.array([1.0]), 3.0, rng, 2000)
        assert set(np.unique(draws)) <= {-1.0, 1.0}
        p_plus = float(np.mean(draws == 1.0))
        expected = 1.0 / (1.0 + math.exp(-6.0))
        assert p_plus == pytest.approx(expected, abs=0.03)


class TestSampleFeatureMap:
    def test_kernel_frequencies_match_alpha(self):
        rng = np.random.default_rng(7)
        k, h, w, d = 4, 2, 2, 6
        kernels = unit_rows(rng, k, d)
        alpha = rng.dirichlet(np.ones(k), size=(1, 1, h, w))
        model = ugt.GenerativeModel(
            ugt.VmfDictionary(kernels, 10.0, np.full(k, 1 / k)),
            ugt.SpatialCoefficients(classes=(0,), alpha=alpha),
        )
        n = 10000
        counts = np.zeros((h * w, k))
        for _ in range(n):
            _, rec = sample_feature_map(model, 0, 0, rng)
            flat = rec.kernel_indices.reshape(-1)
            counts[np.arange(h * w), flat] += 1
        freq = counts / n
        target = alpha[0, 0].reshape(h * w, k)
        se = np.sqrt(target * (1 - target) / n)
        assert np.all(np.abs(freq - target) <= 3 * se + 1e-12)

    def test_large_sigma_sticks_to_kernel(self):
        rng = np.random.default_rng(4)
        k, d = 3, 8
        kernels = unit_rows(rng, k, d)
        alpha = rng.dirichlet(np.ones(k), size=(1, 1, 3, 3))
        model = ugt.GenerativeModel(
            ugt.VmfDictionary(kernels, 1e6, np.full(k, 1 / k)),
            ugt.SpatialCoefficients(classes=(0,), alpha=alpha),
        )
        fm, rec = sample_feature_map(model, 0, 0, rng)
        for a, idx in enumerate(rec.kernel_indices.reshape(-1)):
            assert float(fm.flat[a] @ kernels[idx]) >= 0.999

    def test_fixed_rng_identical_maps(self):
        rng_a = np.random.default_rng(77)
        rng_b = np.random.default_rng(77)
        model = ugt.GenerativeModel(
            ugt.VmfDictionary(np.eye(4)[:2], 30.0, np.array([0.5, 0.5])),
            ugt.SpatialCoefficients(classes=(0,), alpha=np.full((1, 1, 2, 2, 2), 0.5)),
        )
        a, _ = sample_feature_map(model, 0, 0, rng_a)
        b, _ = sample_feature_map(model, 0, 0, rng_b)
        np.testing.assert_array_equal(a.vectors, b.vectors)


class TestInjectOcclusion:
    def _setup(self, seed=0):
        rng = np.random.default_rng(seed)
        d = 8
        fm = ugt.FeatureMap(unit_rows(rng, 49, d).reshape(7, 7, d))
        q = ugt.VmfDictionary(unit_rows(rng, 2, d), 30.0, np.array([0.5, 0.5]))
        return rng, fm, q

    def test_l1_mask_size_range(self):
        rng, fm, q = self._setup()
        for _ in range(20):
            _, mask = inject_occlusion(fm, "L1", q, rng)
            count = int(mask.values.sum())
            assert 9 <= count <= 20

    def test_level_ranges_cover_spec(self):
        assert OCCLUSION_LEVELS == {"L1": (0.2, 0.4), "L2": (0.4, 0.6), "L3": (0.6, 0.8)}

    def test_zero_fraction_identity(self):
        rng, fm, q = self._setup(1)
        out, mask = inject_occlusion(fm, 0.0, q, rng)
        np.testing.assert_array_equal(out.vectors, fm.vectors)
        assert not mask.values.any()
        assert mask.meta["actual_fraction"] == 0.0

    def test_fraction_out_of_range(self):
        rng, fm, q = self._setup(2)
        with pytest.raises(ValidationError):
            inject_occlusion(fm, 1.0, q, rng)
        with pytest.raises(ValidationError):
            inject_occlusion(fm, -0.1, q, rng)

    def test_mask_is_contiguous_rectangle(self):
        rng, fm, q = self._setup(3)
        _, mask = inject_occlusion(fm, "L2", q, rng)
        rows = np.flatnonzero(mask.values.any(axis=1))
        cols = np.flatnonzero(mask.values.any(axis=0))
        block = mask.values[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
        assert block.all()
        assert int(mask.values.sum()) == block.size

    def test_unmasked_positions_untouched(self):
        rng, fm, q = self._setup(4)
        out, mask = inject_occlusion(fm, "L3", q, rng)
        clear = ~mask.values
        np.testing.assert_array_equal(out.vectors[clear], fm.vectors[clear])
        assert not np.array_equal(out.vectors[mask.values], fm.vectors[mask.values])


class TestBruteForce:
    def test_too_large_instance_rejected(self):
        rng = np.random.default_rng(5)
        kernels = unit_rows(rng, 2, 4)
        model = ugt.GenerativeModel(
            ugt.VmfDictionary(kernels, 5.0, np.array([0.5, 0.5])),
            ugt.SpatialCoefficients(classes=(0,), alpha=np.full((1, 1, 4, 3, 2), 0.5)),
        )
        fm = ugt.FeatureMap(unit_rows(rng, 12, 4).reshape(4, 3, 4))
        with pytest.raises(ValidationError):
            brute_force_class_likelihood(fm, model, 0)

    def test_one_by_one_single_kernel(self):
        v = np.zeros(4)
        v[0] = 1.0
        model = ugt.GenerativeModel(
            ugt.VmfDictionary(v[None, :], 30.0, np.array([1.0])),
            ugt.SpatialCoefficients(classes=(0,), alpha=np.ones((1, 1, 1, 1, 1))),
        )
        fm = ugt.FeatureMap(v.reshape(1, 1, 4))
        assert brute_force_class_likelihood(fm, model, 0) == pytest.approx(30.0)


class TestBackgroundFactory:
    def test_requested_size_and_norms(self):
        rng = np.random.default_rng(6)
        kernels = unit_rows(rng, 10, 8)
        q = make_background_model(kernels, 4, 30.0, rng)
        assert q.k == 4
        np.testing.assert_allclose(np.linalg.norm(q.kernels, axis=1), 1.0, atol=1e-9)
