"""Pseudo-labeling and gradient finetuning of the spatial coefficients.

The composite objective per pseudo-labeled map is

    gce(prediction, pseudo-label) + zeta_v * hard-assignment dictionary loss
                                  + zeta_alpha * template log-likelihood loss

with the spatial coefficients optimized through per-position logits (softmax
keeps each kernel distribution exactly on the simplex) and kernel directions,
when enabled, updated along the sphere's tangent plane and renormalized.
"""

from dataclasses import dataclass

import numpy as np

from .classifier import GenerativeModel, SpatialCoefficients, classify, fit_spatial_coefficients
from .errors import ValidationError
from .numerics import logsumexp, require_finite, softmax
from .types import VmfDictionary

FINETUNE_MODES = ("refit", "gradient", "refit_then_gradient")


@dataclass(frozen=True)
class FinetuneConfig:
    q: float = 0.8
    zeta_v: float = 3.0
    zeta_alpha: float = 3.0
    learning_rate: float = 0.01
    epochs: int = 10
    finetune_kernels: bool = False
    threshold: float = 0.8
    seed: int = 0
    mode: str = "refit_then_gradient"
    iterations: int = 1  # pseudo-label rounds; each round relabels with the tuned model

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ValidationError("q must lie in (0, 1]")
        if self.zeta_v < 0 or self.zeta_alpha < 0:
            raise ValidationError("zeta_v and zeta_alpha must be nonnegative")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError("threshold must lie strictly inside (0, 1)")
        if self.mode not in FINETUNE_MODES:
            raise ValidationError(f"mode must be one of {FINETUNE_MODES}, got {self.mode!r}")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")


@dataclass(frozen=True)
class PseudoLabel:
    map_id: int
    label: object
    confidence: float


@dataclass(frozen=True)
class PseudoLabelSet:
    entries: tuple
    threshold: float

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        for e in self.entries:
            if not 0.0 <= e.confidence <= 1.0:
                raise ValidationError("confidences must lie in [0, 1]")
            if e.confidence < self.threshold:
                raise ValidationError("entry confidence below the recorded threshold")

    def __len__(self):
        return len(self.entries)


@dataclass
class Gradients:
    alpha_logits: np.ndarray  # (C, M, H, W, K)
    kernels: np.ndarray | None = None  # (K, D)


def pseudo_label(maps, model, threshold, use_occlusion=False):
    """Label maps with the model's argmax class, keeping confident ones only.

    Confidence is the softmax of the per-class log scores; entries below
    ``threshold`` are dropped. Returns a PseudoLabelSet whose map_id indexes
    into ``maps``.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError("threshold must lie strictly inside (0, 1)")
    entries = []
    for i, fm in enumerate(maps):
        label, scores = classify(fm, model)
        probs = softmax(np.array([scores[y] for y in model.classes], dtype=np.float64))
        conf = float(np.max(probs))
        if conf >= threshold:
            entries.append(PseudoLabel(map_id=i, label=label, confidence=conf))
    return PseudoLabelSet(entries=tuple(entries), threshold=threshold)


def gce_loss(class_probabilities, label_index, q):
    """Generalized cross-entropy (1 - p^q) / q of the labeled class."""
    p = np.asarray(class_probabilities, dtype=np.float64)
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValidationError("class probabilities must sum to 1 within 1e-6")
    if np.any(p < 0):
        raise ValidationError("class probabilities must be nonnegative")
    if not 0.0 < q <= 1.0:
        raise ValidationError("q must lie in (0, 1]")
    return float((1.0 - p[label_index] ** q) / q)


def vmf_reg_loss(fm, dictionary):
    """Hard-assignment dictionary loss: -sum_a max_k sigma * mu_k.f_a."""
    if fm.dim != dictionary.dim:
        raise ValidationError("feature map dimension does not match dictionary")
    scores = dictionary.concentration * (fm.flat @ dictionary.kernels.T)
    return float(-scores.max(axis=1).sum())


def spatial_reg_loss(fm, model, y, m, mask=None):
    """Template log-likelihood loss over unoccluded positions for mixture m."""
    spatial = model.spatial
    if not 0 <= m < spatial.mixtures_per_class:
        raise ValidationError(f"mixture index {m} out of range")
    alpha = spatial.for_class(y)[m].reshape(-1, spatial.k)
    if (fm.height, fm.width) != (spatial.height, spatial.width):
        raise ValidationError("feature map shape does not match spatial coefficients")
    scores = model.dictionary.concentration * (fm.flat @ model.dictionary.kernels.T)
    with np.errstate(divide="ignore"):
        t = logsumexp(np.log(alpha) + scores, axis=1)
    keep = np.ones(t.shape[0], dtype=bool) if mask is None else ~mask.values.reshape(-1)
    return float(-t[keep].sum())


def _logits_from_alpha(alpha):
    with np.errstate(divide="ignore"):
        return np.log(np.maximum(alpha, 1e-300))


def _entry_forward_backward(fm, label_index, logits, alpha, mu, model, cfg, want_kernel_grads):
    """Loss and gradients of the composite objective for one map.

    Returns (loss, d_logits, d_mu). ``alpha`` is softmax(logits); both are
    passed to avoid recomputing. When the model carries an occlusion
    component, positions explained by the background are excluded from the
    gradient paths exactly as the max in the forward pass dictates.
    """
    c_classes, n_mix, height, width, k = alpha.shape
    hw = height * width
    sigma = model.dictionary.concentration
    cos = fm.flat @ mu.T  # (HW, K)
    scores = sigma * cos
    with np.errstate(divide="ignore"):
        log_alpha = np.log(alpha).reshape(c_classes, n_mix, hw, k)

    inner = log_alpha + scores[None, None, :, :]
    t = logsumexp(inner, axis=3)  # (C, M, HW)
    u = softmax(inner, axis=3)  # (C, M, HW, K)

    if model.occlusion is not None:
        occ = model.occlusion
        logq = occ.log_background(fm)
        obj = np.log1p(-occ.tau) + t
        out = np.log(occ.tau) + logq[None, None, :]
        keep = obj >= out  # position contributes through the class template
        pos_scores = np.maximum(obj, out)
    else:
        keep = np.ones_like(t, dtype=bool)
        pos_scores = t

    totals = pos_scores.sum(axis=2)  # (C, M)
    s = logsumexp(totals, axis=1) - np.log(n_mix)  # (C,)
    p = softmax(s)
    p_hat = float(p[label_index])

    loss_gce = (1.0 - p_hat**cfg.q) / cfg.q
    m_star = int(np.argmax(totals[label_index]))
    keep_star = keep[label_index, m_star]

    loss_v = float(-scores.max(axis=1).sum())
    loss_alpha = float(-(t[label_index, m_star] * keep_star).sum())
    loss = loss_gce + cfg.zeta_v * loss_v + cfg.zeta_alpha * loss_alpha

    # d gce / d s  (saturated predictions give an exactly zero gce gradient)
    g_s = np.zeros(c_classes)
    if p_hat > 0.0:
        g_s = -(p_hat**cfg.q) * (np.eye(c_classes)[label_index] - p)
    w = softmax(totals, axis=1)  # (C, M) mixture weights of d s / d totals

    # position-level weight of each (y, m, a) in the gce term
    pos_w = (g_s[:, None] * w)[:, :, None] * keep  # (C, M, HW)

    d_logits = pos_w[:, :, :, None] * (u - alpha.reshape(c_classes, n_mix, hw, k))
    d_logits[label_index, m_star] += (
        -cfg.zeta_alpha * keep_star[:, None] * (u[label_index, m_star] - alpha.reshape(c_classes, n_mix, hw, k)[label_index, m_star])
    )
    d_logits = d_logits.reshape(alpha.shape)

    d_mu = None
    if want_kernel_grads:
        # gce path: sum over classes/mixtures of position weights times u
        coeff = (pos_w[:, :, :, None] * u).sum(axis=(0, 1))  # (HW, K)
        coeff_alpha = -cfg.zeta_alpha * keep_star[:, None] * u[label_index, m_star]  # (HW, K)
        hard = np.argmax(cos, axis=1)
        hard_onehot = np.zeros((hw, k))
        hard_onehot[np.arange(hw), hard] = 1.0
        coeff_v = -cfg.zeta_v * hard_onehot
        d_mu = sigma * ((coeff + coeff_alpha + coeff_v).T @ fm.flat)  # (K, D)

    return loss, d_logits, d_mu


def total_loss_and_gradients(model, pseudo_set, maps, cfg, alpha_logits=None, kernels=None):
    """Composite loss averaged over the batch plus analytic gradients.

    ``alpha_logits`` and ``kernels`` override the model's parameters without
    validation (used by optimization steps and finite-difference checks); by
    default they are taken from the model itself.
    """
    if len(pseudo_set) == 0:
        raise ValidationError("empty pseudo-label batch")
    logits = _logits_from_alpha(model.spatial.alpha) if alpha_logits is None else np.asarray(alpha_logits, dtype=np.float64)
    mu = model.dictionary.kernels if kernels is None else np.asarray(kernels, dtype=np.float64)
    alpha = softmax(logits, axis=-1)

    want_kernel_grads = cfg.finetune_kernels or kernels is not None
    total = 0.0
    g_logits = np.zeros_like(logits)
    g_mu = np.zeros_like(mu) if want_kernel_grads else None
    for entry in pseudo_set.entries:
        fm = maps[entry.map_id]
        label_index = model.spatial.class_index(entry.label)
        loss, d_logits, d_mu = _entry_forward_backward(
            fm, label_index, logits, alpha, mu, model, cfg, want_kernel_grads
        )
        total += loss
        g_logits += d_logits
        if want_kernel_grads:
            g_mu += d_mu
    b = float(len(pseudo_set))
    total /= b
    g_logits /= b
    if want_kernel_grads:
        g_mu /= b
    require_finite(g_logits, "logit gradients")
    return total, Gradients(alpha_logits=g_logits, kernels=g_mu)


def _model_from_params(model, logits, mu):
    spatial = SpatialCoefficients(classes=model.spatial.classes, alpha=softmax(logits, axis=-1))
    dictionary = VmfDictionary(
        kernels=mu, concentration=model.dictionary.concentration, mix_weights=model.dictionary.mix_weights
    )
    return GenerativeModel(dictionary=dictionary, spatial=spatial, occlusion=model.occlusion)


def gradient_finetune(model, pseudo_set, maps, cfg):
    """Full-batch descent on the composite loss; returns (model, loss history).

    Steps that would increase the loss are retried with a halved rate, so the
    recorded history never increases. Kernel directions move in the sphere's
    tangent plane and are renormalized after every accepted step.
    """
    logits = _logits_from_alpha(model.spatial.alpha)
    mu = model.dictionary.kernels.copy()
    loss, grads = total_loss_and_gradients(model, pseudo_set, maps, cfg, alpha_logits=logits, kernels=mu if cfg.finetune_kernels else None)
    history = [loss]
    rate = cfg.learning_rate
    for _ in range(cfg.epochs):
        stepped = False
        for _ in range(30):
            new_logits = logits - rate * grads.alpha_logits
            if cfg.finetune_kernels:
                tangent = grads.kernels - (np.sum(grads.kernels * mu, axis=1, keepdims=True)) * mu
                new_mu = mu - rate * tangent
                new_mu /= np.linalg.norm(new_mu, axis=1, keepdims=True)
            else:
                new_mu = mu
            new_loss, new_grads = total_loss_and_gradients(
                model, pseudo_set, maps, cfg, alpha_logits=new_logits, kernels=new_mu if cfg.finetune_kernels else None
            )
            if new_loss <= loss:
                logits, mu, loss, grads = new_logits, new_mu, new_loss, new_grads
                stepped = True
                break
            rate *= 0.5
        history.append(loss)
        if not stepped:
            break
    return _model_from_params(model, logits, mu), history


def finetune_spatial(model, pseudo_set, maps, cfg):
    """Update spatial coefficients from pseudo-labeled maps.

    ``refit`` re-estimates alpha by the same clustering + soft-count fit used
    on labeled data; ``gradient`` descends the composite objective;
    ``refit_then_gradient`` chains both. The dictionary only changes when
    ``cfg.finetune_kernels`` is set (gradient modes).
    """
    if len(pseudo_set) == 0:
        raise ValidationError("empty pseudo-label set")
    current = model
    if cfg.mode in ("refit", "refit_then_gradient"):
        m = model.spatial.mixtures_per_class
        by_class = {}
        for entry in pseudo_set.entries:
            by_class.setdefault(entry.label, []).append(entry.map_id)
        refit_classes = sorted(y for y, ids in by_class.items() if len(ids) >= m)
        if refit_classes:
            fit_maps, fit_labels = [], []
            for y in refit_classes:
                for i in by_class[y]:
                    fit_maps.append(maps[i])
                    fit_labels.append(y)
            refit = fit_spatial_coefficients(fit_maps, fit_labels, current.dictionary, m=m, seed=cfg.seed)
            alpha = current.spatial.alpha.copy()
            for y in refit_classes:
                alpha[current.spatial.class_index(y)] = refit.for_class(y)
            current = current.with_spatial(SpatialCoefficients(classes=current.spatial.classes, alpha=alpha))
    if cfg.mode in ("gradient", "refit_then_gradient") and cfg.epochs > 0:
        current, _ = gradient_finetune(current, pseudo_set, maps, cfg)
    return current


def finetune_rounds(model, maps, cfg):
    """Repeated pseudo-label-and-finetune rounds; returns (model, round log).

    Each round relabels the maps with the current model and finetunes on the
    confident subset; rounds stop early when nothing clears the threshold.
    """
    current = model
    log = []
    for _ in range(cfg.iterations):
        labeled = pseudo_label(maps, current, cfg.threshold)
        log.append(len(labeled))
        if len(labeled) == 0:
            break
        current = finetune_spatial(current, labeled, maps, cfg)
    return current, log
