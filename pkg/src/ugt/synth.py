"""Synthetic domain pairs with exact ground truth, plus brute-force oracles.

A pair consists of two generative models that share spatial templates but
differ in a subset of dictionary kernels, rotated by a fixed angle in a
random plane. Every sampled map records which kernel produced each position,
and occlusion injection replaces a contiguous block of positions with draws
from a known background density, so every stage of the pipeline can be
verified against planted truth.
"""

import math
from dataclasses import dataclass

import numpy as np

from .classifier import GenerativeModel, SpatialCoefficients
from .errors import ValidationError
from .numerics import normalize_rows
from .types import FeatureMap, OcclusionMask, VmfDictionary

OCCLUSION_LEVELS = {"L1": (0.2, 0.4), "L2": (0.4, 0.6), "L3": (0.6, 0.8)}

TEMPLATE_CONCENTRATION = 0.3  # sparse Dirichlet: positions prefer few kernels


@dataclass(frozen=True)
class DomainPairSpec:
    n_classes: int = 3
    k: int = 24
    dim: int = 16
    height: int = 7
    width: int = 7
    mixtures: int = 2
    sigma: float = 30.0
    shared_kernel_fraction: float = 0.5
    shift_angle: float = math.pi / 3
    maps_per_class_source: int = 200
    maps_per_class_target: int = 200
    seed: int = 0
    # Fraction of positions whose template is class-specific; the rest share a
    # per-mixture base template across classes, the way distinct object
    # categories still share most part structure. 1.0 = fully independent.
    class_distinct_fraction: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.shared_kernel_fraction <= 1.0:
            raise ValidationError("shared_kernel_fraction must lie in [0, 1]")
        if not 0.0 <= self.shift_angle <= math.pi:
            raise ValidationError("shift_angle must lie in [0, pi]")
        if not 0.0 < self.class_distinct_fraction <= 1.0:
            raise ValidationError("class_distinct_fraction must lie in (0, 1]")
        if min(self.n_classes, self.k, self.dim, self.height, self.width, self.mixtures) < 1:
            raise ValidationError("all size fields must be positive")
        if self.maps_per_class_source < 1 or self.maps_per_class_target < 1:
            raise ValidationError("maps per class must be positive")


@dataclass(frozen=True)
class GenerationRecord:
    label: object
    mixture: int
    kernel_indices: np.ndarray  # (H, W) int


@dataclass(frozen=True)
class SynthDataset:
    maps: tuple
    labels: tuple | None  # None for the unlabeled target split

    def __len__(self):
        return len(self.maps)


@dataclass(frozen=True)
class GroundTruth:
    source_model: GenerativeModel
    target_model: GenerativeModel
    shared_kernels: np.ndarray  # sorted indices of kernels equal across domains
    source_records: tuple
    target_records: tuple
    rounded_shared_count: bool = False


def sample_vmf(mu, sigma, rng, n=1):
    """Draw ``n`` unit vectors from vMF(mu, sigma) by rejection sampling."""
    mu = np.asarray(mu, dtype=np.float64)
    d = mu.shape[0]
    sigma = float(sigma)
    if d == 1:
        p_plus = 1.0 / (1.0 + math.exp(-2.0 * sigma * mu[0]))
        signs = np.where(rng.random(n) < p_plus, 1.0, -1.0)
        return signs[:, None]
    if sigma == 0.0:
        return normalize_rows(rng.standard_normal((n, d)))

    b = (-2.0 * sigma + math.sqrt(4.0 * sigma**2 + (d - 1.0) ** 2)) / (d - 1.0)
    x0 = (1.0 - b) / (1.0 + b)
    c = sigma * x0 + (d - 1.0) * math.log(1.0 - x0**2)

    w = np.empty(n)
    filled = 0
    while filled < n:
        todo = n - filled
        z = rng.beta((d - 1.0) / 2.0, (d - 1.0) / 2.0, size=todo)
        cand = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(todo)
        ok = sigma * cand + (d - 1.0) * np.log1p(-x0 * cand) - c >= np.log(u)
        take = cand[ok]
        w[filled : filled + take.shape[0]] = take
        filled += take.shape[0]

    v = rng.standard_normal((n, d))
    v -= (v @ mu)[:, None] * mu
    v = normalize_rows(v)
    out = w[:, None] * mu[None, :] + np.sqrt(np.maximum(1.0 - w**2, 0.0))[:, None] * v
    return normalize_rows(out)


def _categorical_rows(probs, rng):
    """One draw per row of a row-stochastic matrix."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] > cdf).sum(axis=1), probs.shape[1] - 1)


def sample_feature_map(model, y, m, rng):
    """Sample one feature map from class y, mixture m; returns (map, record)."""
    spatial = model.spatial
    alpha = spatial.for_class(y)[m].reshape(-1, spatial.k)
    kernel_idx = _categorical_rows(alpha, rng)
    vectors = np.empty((alpha.shape[0], model.dictionary.dim))
    for k in np.unique(kernel_idx):
        where = kernel_idx == k
        vectors[where] = sample_vmf(model.dictionary.kernels[k], model.dictionary.concentration, rng, int(where.sum()))
    fm = FeatureMap(vectors.reshape(spatial.height, spatial.width, model.dictionary.dim))
    record = GenerationRecord(
        label=y, mixture=int(m), kernel_indices=kernel_idx.reshape(spatial.height, spatial.width)
    )
    return fm, record


def _sample_dataset(model, per_class, rng, labeled):
    maps, labels, records = [], [], []
    for y in model.classes:
        for _ in range(per_class):
            m = int(rng.integers(model.spatial.mixtures_per_class))
            fm, rec = sample_feature_map(model, y, m, rng)
            maps.append(fm)
            labels.append(y)
            records.append(rec)
    dataset = SynthDataset(maps=tuple(maps), labels=tuple(labels) if labeled else None)
    return dataset, tuple(records)


def _separated_unit_vectors(n, dim, rng, max_cos=0.3, iters=2000):
    """Random unit vectors with pairwise |cosine| capped, by repulsion.

    Planted kernels must be resolvable: vMF clusters at desk-scale
    concentration span a wide cosine radius, so unconstrained random
    directions routinely collide and make recovery ill-posed. Vectors start
    random and are iteratively pushed apart until every pair clears the cap.
    """
    v = normalize_rows(rng.standard_normal((n, dim)))
    inner = 0.97 * max_cos  # repel a bit past the cap so the loop terminates strictly under it
    for _ in range(iters):
        g = v @ v.T
        np.fill_diagonal(g, 0.0)
        if np.abs(g).max() <= max_cos:
            return v
        excess = np.where(np.abs(g) > inner, g - np.sign(g) * inner, 0.0)
        v = normalize_rows(v - 0.3 * (excess @ v))
    raise ValidationError(f"could not place {n} kernels in {dim} dimensions at separation {max_cos}")


def make_domain_pair(spec):
    """Build planted source/target datasets plus their full ground truth."""
    ss = np.random.SeedSequence(spec.seed)
    rng_kernels, rng_templates, rng_source, rng_target = [np.random.default_rng(s) for s in ss.spawn(4)]

    kernels_src = _separated_unit_vectors(spec.k, spec.dim, rng_kernels)
    exact_shared = spec.k * spec.shared_kernel_fraction
    n_shared = int(math.floor(exact_shared))
    rounded = not math.isclose(exact_shared, n_shared)
    shared = np.sort(rng_kernels.permutation(spec.k)[:n_shared])
    shared_mask = np.zeros(spec.k, dtype=bool)
    shared_mask[shared] = True

    kernels_tgt = kernels_src.copy()
    for j in np.flatnonzero(~shared_mask):
        # keep the rotated kernel resolvable against every other target kernel;
        # among sampled rotation planes, the least-colliding candidate wins
        best = None
        others = np.delete(np.arange(spec.k), j)
        for _ in range(200):
            ortho = rng_kernels.standard_normal(spec.dim)
            ortho -= np.dot(ortho, kernels_src[j]) * kernels_src[j]
            ortho /= np.linalg.norm(ortho)
            candidate = math.cos(spec.shift_angle) * kernels_src[j] + math.sin(spec.shift_angle) * ortho
            collision = float(np.max(np.abs(kernels_tgt[others] @ candidate)))
            if best is None or collision < best[0]:
                best = (collision, candidate)
            if collision <= 0.45 or spec.shift_angle == 0.0:
                break
        kernels_tgt[j] = best[1]

    alpha = rng_templates.dirichlet(
        np.full(spec.k, TEMPLATE_CONCENTRATION),
        size=(spec.n_classes, spec.mixtures, spec.height, spec.width),
    )
    if spec.class_distinct_fraction < 1.0:
        base = rng_templates.dirichlet(
            np.full(spec.k, TEMPLATE_CONCENTRATION), size=(spec.mixtures, spec.height, spec.width)
        )
        n_pos = spec.height * spec.width
        n_distinct = max(1, int(round(spec.class_distinct_fraction * n_pos)))
        for m in range(spec.mixtures):
            distinct = rng_templates.permutation(n_pos)[:n_distinct]
            keep = np.ones(n_pos, dtype=bool)
            keep[distinct] = False
            flat_base = base[m].reshape(n_pos, spec.k)
            for c in range(spec.n_classes):
                flat = alpha[c, m].reshape(n_pos, spec.k)
                flat[keep] = flat_base[keep]
    spatial = SpatialCoefficients(classes=tuple(range(spec.n_classes)), alpha=alpha)
    pi = np.full(spec.k, 1.0 / spec.k)
    source_model = GenerativeModel(
        dictionary=VmfDictionary(kernels_src, spec.sigma, pi), spatial=spatial
    )
    target_model = GenerativeModel(
        dictionary=VmfDictionary(kernels_tgt, spec.sigma, pi), spatial=spatial
    )

    source, source_records = _sample_dataset(source_model, spec.maps_per_class_source, rng_source, labeled=True)
    target, target_records = _sample_dataset(target_model, spec.maps_per_class_target, rng_target, labeled=False)
    truth = GroundTruth(
        source_model=source_model,
        target_model=target_model,
        shared_kernels=shared,
        source_records=source_records,
        target_records=target_records,
        rounded_shared_count=rounded,
    )
    return source, target, truth


def make_background_model(kernels, k_b, sigma, rng, angle=0.7):
    """Planted occluder density with kernels near object-part directions.

    Realistic occluders are other objects, so their feature clusters sit at a
    moderate angle from class kernels rather than in random directions.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    picks = rng.choice(kernels.shape[0], size=min(k_b, kernels.shape[0]), replace=False)
    rows = []
    for j in picks:
        mu = kernels[j]
        v = rng.standard_normal(mu.shape[0])
        v -= np.dot(v, mu) * mu
        v /= np.linalg.norm(v)
        rows.append(math.cos(angle) * mu + math.sin(angle) * v)
    while len(rows) < k_b:
        v = rng.standard_normal(kernels.shape[1])
        rows.append(v / np.linalg.norm(v))
    q = np.stack(rows)
    return VmfDictionary(q, sigma, np.full(k_b, 1.0 / k_b))


def _best_rectangle(height, width, target_count):
    """Contiguous block whose area is closest to ``target_count``."""
    best = None
    for h in range(1, height + 1):
        for w in range(1, width + 1):
            gap = abs(h * w - target_count)
            if best is None or gap < best[0]:
                best = (gap, h, w)
    return best[1], best[2]


def inject_occlusion(fm, level, q, rng):
    """Replace a contiguous block of positions with background draws.

    ``level`` is one of L1/L2/L3 (fraction drawn uniformly inside the level's
    range) or an explicit fraction in [0, 1). Returns the new map and the
    exact mask; the mask's meta records requested and achieved fractions.
    """
    if q.dim != fm.dim:
        raise ValidationError("background dimension does not match feature map")
    if isinstance(level, str):
        if level not in OCCLUSION_LEVELS:
            raise ValidationError(f"unknown occlusion level {level!r}")
        lo, hi = OCCLUSION_LEVELS[level]
        fraction = float(rng.uniform(lo, hi))
    else:
        fraction = float(level)
        if fraction == 0.0:
            mask = OcclusionMask(np.zeros((fm.height, fm.width), dtype=bool), meta={"requested_fraction": 0.0, "actual_fraction": 0.0})
            return fm, mask
        if not 0.0 < fraction < 1.0:
            raise ValidationError("occlusion fraction must lie in [0, 1)")

    total = fm.height * fm.width
    h, w = _best_rectangle(fm.height, fm.width, fraction * total)
    top = int(rng.integers(fm.height - h + 1))
    left = int(rng.integers(fm.width - w + 1))
    mask = np.zeros((fm.height, fm.width), dtype=bool)
    mask[top : top + h, left : left + w] = True

    count = h * w
    comp = _categorical_rows(np.tile(q.mix_weights, (count, 1)), rng)
    draws = np.empty((count, q.dim))
    for j in np.unique(comp):
        where = comp == j
        draws[where] = sample_vmf(q.kernels[j], q.concentration, rng, int(where.sum()))
    vectors = fm.vectors.copy()
    vectors[mask] = draws
    meta = {"requested_fraction": fraction, "actual_fraction": count / total}
    return FeatureMap(vectors), OcclusionMask(mask, meta=meta)


def brute_force_class_likelihood(fm, model, y):
    """Direct nested-loop class log-likelihood; the independent oracle.

    Uses plain float arithmetic (no log-domain tricks). If the model carries
    an occlusion component the value is the exact maximum over every one of
    the 2^(H*W) occlusion patterns per mixture, which factorizes into a
    per-position max. Limited to H*W <= 9.
    """
    hw = fm.height * fm.width
    if hw > 9:
        raise ValidationError(f"brute force limited to 9 positions, got {hw}")
    spatial = model.spatial
    alpha = spatial.for_class(y)
    sigma = model.dictionary.concentration
    kernels = model.dictionary.kernels
    n_mix = spatial.mixtures_per_class

    flat = fm.flat
    occ = model.occlusion
    if occ is not None:
        logq_rows = occ.log_background(fm)

    total = 0.0
    for m in range(n_mix):
        if occ is None:
            prod = 1.0
            for a in range(hw):
                i, j = divmod(a, fm.width)
                s = 0.0
                for k in range(kernels.shape[0]):
                    s += alpha[m, i, j, k] * math.exp(sigma * float(np.dot(kernels[k], flat[a])))
                prod *= s
            total += prod / n_mix
        else:
            best = -math.inf
            for pattern in range(1 << hw):
                prod = 1.0
                for a in range(hw):
                    i, j = divmod(a, fm.width)
                    if (pattern >> a) & 1:
                        prod *= occ.tau * math.exp(float(logq_rows[a]))
                    else:
                        s = 0.0
                        for k in range(kernels.shape[0]):
                            s += alpha[m, i, j, k] * math.exp(sigma * float(np.dot(kernels[k], flat[a])))
                        prod *= (1.0 - occ.tau) * s
                if prod > best:
                    best = prod
            total += best / n_mix
    return math.log(total)
