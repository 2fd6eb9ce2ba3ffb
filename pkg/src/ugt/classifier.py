"""Compositional generative classifier over feature maps.

A class is scored by mixing M per-class spatial templates: template m gives
every position a distribution over dictionary kernels, the position's feature
is scored against that blend, positions multiply, mixtures average under a
uniform prior. The occlusion variant lets each position instead be explained
by a background density Q at prior tau, taking the better of the two.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .numerics import logsumexp, require_finite, softmax
from .types import FeatureMap, OcclusionMask, VmfDictionary
from .vmf import EmConfig, em_fit_dictionary, likelihood_map, posterior_responsibilities, spherical_kmeans_assign

DEFAULT_MIXTURES = 4
DEFAULT_TAU = 0.55
ALPHA_FLOOR = 1e-4


def _frozen(arr, dtype=np.float64):
    out = np.array(arr, dtype=dtype, order="C", copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SpatialCoefficients:
    """Per (class, mixture, position) distributions over dictionary kernels."""

    classes: tuple
    alpha: np.ndarray  # (C, M, H, W, K)

    def __post_init__(self):
        classes = tuple(self.classes)
        alpha = _frozen(self.alpha)
        if alpha.ndim != 5:
            raise ValidationError(f"alpha must be (C, M, H, W, K), got shape {alpha.shape}")
        if len(classes) != alpha.shape[0]:
            raise ValidationError(f"{len(classes)} classes but alpha has {alpha.shape[0]} class slices")
        if len(set(classes)) != len(classes):
            raise ValidationError("duplicate class ids")
        if min(alpha.shape) < 1:
            raise ValidationError("all alpha dimensions must be positive")
        require_finite(alpha, "spatial coefficients")
        if np.any(alpha < 0):
            raise ValidationError("spatial coefficients must be nonnegative")
        sums = alpha.sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            raise ValidationError("spatial coefficients must sum to 1 over kernels within 1e-9")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "_index", {y: i for i, y in enumerate(classes)})

    @property
    def mixtures_per_class(self):
        return self.alpha.shape[1]

    @property
    def height(self):
        return self.alpha.shape[2]

    @property
    def width(self):
        return self.alpha.shape[3]

    @property
    def k(self):
        return self.alpha.shape[4]

    def class_index(self, y):
        try:
            return self._index[y]
        except KeyError:
            raise ValidationError(f"unknown class id {y!r}") from None

    def for_class(self, y):
        return self.alpha[self.class_index(y)]


@dataclass(frozen=True)
class OcclusionModel:
    """Background (outlier) density plus the prior that a position is occluded."""

    background: VmfDictionary
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        tau = float(self.tau)
        if not 0.0 < tau < 1.0:
            raise ValidationError(f"tau must lie strictly inside (0, 1), got {tau}")
        object.__setattr__(self, "tau", tau)

    def log_background(self, fm: FeatureMap):
        """(H*W,) log Q(f_a) in the shared unnormalized convention."""
        if fm.dim != self.background.dim:
            raise ValidationError("background dimension does not match feature map")
        with np.errstate(divide="ignore"):
            logp = self.background.concentration * (fm.flat @ self.background.kernels.T) + np.log(
                self.background.mix_weights
            )
        return logsumexp(logp, axis=1)


@dataclass(frozen=True)
class GenerativeModel:
    """Deployable classifier: dictionary + spatial coefficients (+ occlusion)."""

    dictionary: VmfDictionary
    spatial: SpatialCoefficients
    occlusion: OcclusionModel | None = None

    def __post_init__(self):
        if self.spatial.k != self.dictionary.k:
            raise ValidationError(
                f"spatial coefficients cover {self.spatial.k} kernels, dictionary has {self.dictionary.k}"
            )
        if self.occlusion is not None and self.occlusion.background.dim != self.dictionary.dim:
            raise ValidationError("occlusion background dimension does not match dictionary")

    @property
    def classes(self):
        return self.spatial.classes

    def with_spatial(self, spatial):
        return GenerativeModel(self.dictionary, spatial, self.occlusion)

    def with_dictionary(self, dictionary):
        return GenerativeModel(dictionary, self.spatial, self.occlusion)

    def with_occlusion(self, occlusion):
        return GenerativeModel(self.dictionary, self.spatial, occlusion)


def assign_mixtures(maps, m, seed=0):
    """Group likelihood maps into ``m`` clusters; returns an int assignment array.

    Maps are flattened, scaled to their maximum and L2-normalized (the scaling
    cancels after normalization but keeps large-concentration values finite),
    then clustered by spherical k-means.
    """
    if len(maps) < m:
        raise ValidationError(f"need at least {m} maps to form {m} mixtures, got {len(maps)}")
    shapes = {mp.values.shape for mp in maps}
    if len(shapes) != 1:
        raise ValidationError(f"likelihood maps disagree in shape: {sorted(map(str, shapes))}")
    rows = np.stack([mp.values.reshape(-1) / np.max(mp.values) for mp in maps])
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    _, assign = spherical_kmeans_assign(rows, m, seed=seed, restarts=4)
    return assign


def fit_spatial_coefficients(feature_maps, labels, dictionary, m=DEFAULT_MIXTURES, seed=0):
    """Estimate spatial coefficients from labeled maps.

    Per class: maps are split into ``m`` groups by clustering their likelihood
    maps, then alpha at each position is the mean kernel posterior over the
    group's maps, floored at 1e-4 and renormalized.
    """
    if len(feature_maps) != len(labels):
        raise ValidationError(f"{len(feature_maps)} maps but {len(labels)} labels")
    if not feature_maps:
        raise ValidationError("no maps to fit")
    shapes = {fm.vectors.shape for fm in feature_maps}
    if len(shapes) != 1:
        raise ValidationError("feature maps disagree in shape")
    height, width, _ = feature_maps[0].vectors.shape

    classes = sorted(set(labels))
    by_class = {y: [i for i, lab in enumerate(labels) if lab == y] for y in classes}
    for y, idx in by_class.items():
        if len(idx) < m:
            raise ValidationError(f"class {y!r} has {len(idx)} maps, needs at least {m}")

    seeds = np.random.SeedSequence(seed).spawn(len(classes))
    alpha = np.empty((len(classes), m, height, width, dictionary.k))
    for ci, y in enumerate(classes):
        idx = by_class[y]
        lmaps = [likelihood_map(feature_maps[i], dictionary) for i in idx]
        assign = assign_mixtures(lmaps, m, seed=seeds[ci].generate_state(1)[0])
        resp = np.stack(
            [posterior_responsibilities(feature_maps[i].flat, dictionary) for i in idx]
        )  # (n_c, H*W, K)
        for mi in range(m):
            members = np.flatnonzero(assign == mi)
            counts = resp[members].mean(axis=0)
            counts = np.maximum(counts, ALPHA_FLOOR)
            counts /= counts.sum(axis=1, keepdims=True)
            alpha[ci, mi] = counts.reshape(height, width, dictionary.k)
    return SpatialCoefficients(classes=tuple(classes), alpha=alpha)


def _position_log_scores(fm, model, y):
    """(M, H*W) per-mixture, per-position log sum_k alpha * exp(sigma mu.f)."""
    if fm.dim != model.dictionary.dim:
        raise ValidationError("feature map dimension does not match dictionary")
    spatial = model.spatial
    if (fm.height, fm.width) != (spatial.height, spatial.width):
        raise ValidationError(
            f"feature map is {fm.height}x{fm.width}, spatial coefficients are "
            f"{spatial.height}x{spatial.width}"
        )
    scores = model.dictionary.concentration * (fm.flat @ model.dictionary.kernels.T)  # (H*W, K)
    alpha = spatial.for_class(y).reshape(spatial.mixtures_per_class, -1, spatial.k)
    with np.errstate(divide="ignore"):
        log_alpha = np.log(alpha)
    return logsumexp(log_alpha + scores[None, :, :], axis=2)


def class_log_likelihood(fm, model, y):
    """log P(map | class) with mixtures averaged under the uniform prior."""
    per_mix = _position_log_scores(fm, model, y).sum(axis=1)
    return float(logsumexp(per_mix) - np.log(len(per_mix)))


def occluded_log_likelihood(fm, model, y, sum_over_z=False):
    """Occlusion-aware log P(map | class) plus the inferred occlusion mask.

    Per position the model takes the better (or, with ``sum_over_z``, the sum)
    of explaining the feature with the class template at prior 1 - tau or with
    the background density at prior tau. The mask is the per-position argmax
    under the highest-scoring mixture; ties count as unoccluded.
    """
    if model.occlusion is None:
        raise ValidationError("model has no occlusion component")
    occ = model.occlusion
    t = _position_log_scores(fm, model, y)  # (M, H*W)
    logq = occ.log_background(fm)  # (H*W,)
    obj = np.log1p(-occ.tau) + t
    out = np.log(occ.tau) + logq  # same for every mixture
    if sum_over_z:
        scores = np.logaddexp(obj, out[None, :])
    else:
        scores = np.maximum(obj, out[None, :])
    totals = scores.sum(axis=1)
    best_m = int(np.argmax(totals))
    mask = (out > obj[best_m]).reshape(fm.height, fm.width)
    value = float(logsumexp(totals) - np.log(totals.shape[0]))
    return value, OcclusionMask(values=mask)


def classify(fm, model, use_occlusion=False):
    """Argmax-class decision; returns (label, {class: log score}).

    Ties break toward the lowest class id.
    """
    if not model.classes:
        raise ValidationError("model has no classes")
    scores = {}
    for y in model.classes:
        if use_occlusion:
            scores[y], _ = occluded_log_likelihood(fm, model, y)
        else:
            scores[y] = class_log_likelihood(fm, model, y)
    best = max(sorted(scores), key=lambda y: scores[y])  # sorted => lowest id wins ties
    return best, scores


def fit_background_model(background_features, k_b, sigma, cfg=None):
    """Fit the outlier density Q as a plain vMF mixture on background features."""
    cfg = cfg or EmConfig()
    dictionary, _ = em_fit_dictionary(background_features, k_b, sigma=sigma, cfg=cfg)
    return dictionary


def batch_classify(maps, model, use_occlusion=False):
    """Classify many maps; returns (labels list, (n, C) score matrix)."""
    labels = []
    rows = np.empty((len(maps), len(model.classes)))
    for i, fm in enumerate(maps):
        label, scores = classify(fm, model, use_occlusion=use_occlusion)
        labels.append(label)
        rows[i] = [scores[y] for y in model.classes]
    return labels, rows


def score_softmax(scores_row, classes):
    """Confidence distribution over classes from a row of log scores."""
    return dict(zip(classes, softmax(np.asarray(scores_row, dtype=np.float64))))
