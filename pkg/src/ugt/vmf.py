"""von Mises-Fisher primitives: densities, spherical k-means, mixture EM.

The mixture density over unit vectors is sum_k pi_k exp(sigma * mu_k.f) in
the shared-constant convention (the normalizer depends only on the shared
sigma). EM alternates exact posteriors with the closed-form direction and
weight updates; the fit is deterministic for a given seed.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateClusterError, ValidationError
from .numerics import as_unit_rows, logsumexp, normalize_rows, require_finite, softmax
from .types import FeatureMap, LikelihoodMap, VmfDictionary

DEFAULT_SIGMA = 30.0

_DEGENERATE_MASS = 1e-12


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 100
    ll_tol: float = 1e-6
    seed: int = 0
    kmeans_restarts: int = 4

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if not self.ll_tol > 0:
            raise ValidationError("ll_tol must be > 0")
        if self.kmeans_restarts < 1:
            raise ValidationError("kmeans_restarts must be >= 1")


def vmf_log_density(f, mu, sigma):
    """Unnormalized vMF log density sigma * mu.f for unit vectors f, mu."""
    f = as_unit_rows(f, "f")[0]
    mu = as_unit_rows(mu, "mu")[0]
    if f.shape != mu.shape:
        raise ValidationError(f"dimension mismatch: f has {f.shape[0]}, mu has {mu.shape[0]}")
    sigma = float(sigma)
    if not np.isfinite(sigma) or sigma < 0:
        raise ValidationError(f"sigma must be a finite nonnegative real, got {sigma}")
    return float(sigma * np.dot(mu, f))


def _component_log_joint(x, kernels, log_pi, sigma):
    """(n, K) matrix of log pi_k + sigma * mu_k.f_i."""
    return sigma * (x @ kernels.T) + log_pi[None, :]


def _log_pi(pi):
    with np.errstate(divide="ignore"):
        return np.log(pi)


def _kmeans_single(x, k, rng, max_iters=100):
    """One Lloyd run with farthest-point seeding on cosine similarity.

    Ties always break toward the lowest index; empty clusters are re-seeded
    at the worst-represented point.
    """
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    best_sim = x @ centers[0]
    for j in range(1, k):
        centers[j] = x[int(np.argmin(best_sim))]
        best_sim = np.maximum(best_sim, x @ centers[j])

    assign = None
    sim = x @ centers.T
    for _ in range(max_iters):
        new_assign = np.argmax(sim, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = x[assign == j]
            if members.shape[0] == 0:
                centers[j] = x[int(np.argmin(np.max(sim, axis=1)))]
                continue
            mean = members.sum(axis=0)
            norm = np.linalg.norm(mean)
            if norm < 1e-12:
                centers[j] = x[int(np.argmin(np.max(sim, axis=1)))]
            else:
                centers[j] = mean / norm
        sim = x @ centers.T
    objective = float(sim[np.arange(n), assign].sum())
    return centers, assign, objective


def spherical_kmeans_assign(x, k, seed=0, restarts=1):
    """Cluster unit rows of ``x`` into ``k`` groups; returns (centers, assign).

    Best of ``restarts`` seeded runs by total cosine similarity, ties toward
    the earliest restart.
    """
    x = as_unit_rows(x)
    if k < 1:
        raise ValidationError("k must be >= 1")
    n_distinct = np.unique(x, axis=0).shape[0]
    if n_distinct < k:
        raise DegenerateClusterError(f"need at least {k} distinct vectors, found {n_distinct}")
    best = None
    for child in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(child)
        centers, assign, objective = _kmeans_single(x, k, rng)
        if best is None or objective > best[2]:
            best = (centers, assign, objective)
    return best[0], best[1]


def spherical_kmeans(features, k, seed=0, restarts=1, sigma=DEFAULT_SIGMA):
    """Spherical k-means dictionary: unit centroids plus cluster-fraction weights."""
    x = as_unit_rows(features)
    centers, assign = spherical_kmeans_assign(x, k, seed=seed, restarts=restarts)
    pi = np.bincount(assign, minlength=k).astype(np.float64) / x.shape[0]
    return VmfDictionary(kernels=normalize_rows(centers), concentration=sigma, mix_weights=pi)


def posterior_responsibilities(features, dictionary):
    """(n, K) posterior over kernels per feature, computed in the log domain.

    Rows sum to 1 within 1e-12.
    """
    x = as_unit_rows(features)
    if x.shape[1] != dictionary.dim:
        raise ValidationError(f"dimension mismatch: features are {x.shape[1]}-d, dictionary is {dictionary.dim}-d")
    logp = _component_log_joint(x, dictionary.kernels, _log_pi(dictionary.mix_weights), dictionary.concentration)
    resp = softmax(logp, axis=1)
    require_finite(resp, "responsibilities")
    return resp


def mixture_log_likelihood(features, dictionary):
    """Total log-likelihood sum_i log sum_k pi_k exp(sigma * mu_k.f_i)."""
    x = as_unit_rows(features)
    if x.shape[0] == 0:
        return 0.0
    if x.shape[1] != dictionary.dim:
        raise ValidationError(f"dimension mismatch: features are {x.shape[1]}-d, dictionary is {dictionary.dim}-d")
    logp = _component_log_joint(x, dictionary.kernels, _log_pi(dictionary.mix_weights), dictionary.concentration)
    return float(np.sum(logsumexp(logp, axis=1)))


def _rescue_degenerate(mu, pi, dead, logp, x, used):
    """Re-seed dead components at the features the mixture explains worst."""
    k = pi.shape[0]
    worst_order = np.argsort(np.max(logp, axis=1), kind="stable")
    cursor = 0
    for j in np.flatnonzero(dead):
        while cursor < worst_order.shape[0] and int(worst_order[cursor]) in used:
            cursor += 1
        idx = int(worst_order[min(cursor, worst_order.shape[0] - 1)])
        used.add(idx)
        mu[j] = x[idx]
        pi[j] = 1.0 / k
    pi /= pi.sum()


def em_fit_dictionary(features, k, sigma=DEFAULT_SIGMA, cfg=None, init=None):
    """Fit a K-component vMF mixture by EM; returns (dictionary, ll trace).

    Initialization comes from spherical k-means unless ``init`` supplies a
    starting dictionary. The trace holds the data log-likelihood of the
    parameters after each update, starting with the initial ones; it is
    non-decreasing apart from degenerate-component rescues.
    """
    cfg = cfg or EmConfig()
    x = as_unit_rows(features)
    if x.shape[0] == 0:
        raise ValidationError("cannot fit a dictionary to an empty feature list")
    if init is not None:
        if init.k != k or init.dim != x.shape[1]:
            raise ValidationError("init dictionary shape does not match requested fit")
        mu = init.kernels.copy()
        pi = init.mix_weights.copy()
    else:
        seed_dict = spherical_kmeans(x, k, seed=cfg.seed, restarts=cfg.kmeans_restarts, sigma=sigma)
        mu = seed_dict.kernels.copy()
        pi = seed_dict.mix_weights.copy()

    n = x.shape[0]
    used = set()
    logp = _component_log_joint(x, mu, _log_pi(pi), sigma)
    trace = [float(np.sum(logsumexp(logp, axis=1)))]
    for _ in range(cfg.max_iters):
        resp = softmax(logp, axis=1)
        nk = resp.sum(axis=0)
        weighted = resp.T @ x
        norms = np.linalg.norm(weighted, axis=1)
        dead = (nk < _DEGENERATE_MASS) | (norms < 1e-15)
        pi = nk / n
        live = ~dead
        mu[live] = weighted[live] / norms[live, None]
        if dead.any():
            _rescue_degenerate(mu, pi, dead, logp, x, used)
        logp = _component_log_joint(x, mu, _log_pi(pi), sigma)
        ll = float(np.sum(logsumexp(logp, axis=1)))
        trace.append(ll)
        if abs(ll - trace[-2]) <= cfg.ll_tol * max(1.0, abs(trace[-2])):
            break
    return VmfDictionary(kernels=mu, concentration=sigma, mix_weights=pi), trace


def likelihood_map(fm: FeatureMap, dictionary: VmfDictionary) -> LikelihoodMap:
    """Per-position kernel responses pi_k * exp(sigma * mu_k.f_a)."""
    if fm.dim != dictionary.dim:
        raise ValidationError(f"dimension mismatch: map is {fm.dim}-d, dictionary is {dictionary.dim}-d")
    scores = dictionary.concentration * (fm.flat @ dictionary.kernels.T)
    values = dictionary.mix_weights[None, :] * np.exp(scores)
    require_finite(values, "likelihood map")
    return LikelihoodMap(values.reshape(fm.height, fm.width, dictionary.k))
