import numpy as np
import pytest

import ugt


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def hungarian_min_cosine(fit_kernels, true_kernels):
    """Worst matched cosine after optimally pairing fit to planted kernels."""
    from scipy.optimize import linear_sum_assignment

    cos = fit_kernels @ true_kernels.T
    rows, cols = linear_sum_assignment(-cos)
    return float(cos[rows, cols].min()), cols


@pytest.fixture(scope="session")
def small_pair():
    """Planted pair small enough for per-test reuse: 2 classes, 8 kernels."""
    spec = ugt.DomainPairSpec(
        n_classes=2,
        k=8,
        dim=12,
        height=3,
        width=3,
        mixtures=2,
        maps_per_class_source=50,
        maps_per_class_target=50,
        seed=3,
    )
    source, target, truth = ugt.make_domain_pair(spec)
    return spec, source, target, truth
