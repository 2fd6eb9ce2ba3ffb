"""Core value types: feature maps, vMF dictionaries, likelihood maps, masks.

All array-backed types copy their input, validate their invariants once, and
mark their buffers read-only, so instances are safe to share across threads.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .numerics import UNIT_NORM_ATOL, require_finite


def _frozen_array(arr, dtype=np.float64):
    out = np.array(arr, dtype=dtype, order="C", copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FeatureMap:
    """An H x W lattice of unit-norm D-dimensional feature vectors."""

    vectors: np.ndarray  # (H, W, D)

    def __post_init__(self):
        arr = _frozen_array(self.vectors)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"feature map must be (H, W, D) with positive dims, got {arr.shape}")
        require_finite(arr, "feature map")
        norms = np.linalg.norm(arr, axis=2)
        if np.max(np.abs(norms - 1.0)) > UNIT_NORM_ATOL:
            worst = float(np.max(np.abs(norms - 1.0)))
            raise ValidationError(f"feature vectors must be unit-norm within {UNIT_NORM_ATOL} (off by {worst:.3g})")
        object.__setattr__(self, "vectors", arr)

    @property
    def height(self):
        return self.vectors.shape[0]

    @property
    def width(self):
        return self.vectors.shape[1]

    @property
    def dim(self):
        return self.vectors.shape[2]

    @property
    def flat(self):
        """(H*W, D) view in row-major position order."""
        return self.vectors.reshape(-1, self.vectors.shape[2])

    @classmethod
    def from_array(cls, arr, renormalize=False):
        """Build a map from raw values, optionally fixing small norm drift.

        ``renormalize`` exists for float32 storage round trips; vectors whose
        norm is off by more than 1e-3 are rejected rather than silently scaled.
        """
        arr = np.asarray(arr, dtype=np.float64)
        if renormalize:
            if arr.ndim != 3:
                raise ValidationError(f"feature map must be (H, W, D), got shape {arr.shape}")
            require_finite(arr, "feature map")
            norms = np.linalg.norm(arr, axis=2, keepdims=True)
            if np.any(np.abs(norms - 1.0) > 1e-3):
                raise ValidationError("feature vectors too far from unit norm to renormalize")
            arr = arr / norms
        return cls(arr)


@dataclass(frozen=True)
class VmfDictionary:
    """K unit mean directions with one shared concentration and mixing weights.

    Log-densities everywhere use the unnormalized convention sigma * mu.f;
    the normalizer is a shared constant because sigma is shared, so dropping
    it leaves every comparison and posterior unchanged.
    """

    kernels: np.ndarray  # (K, D), unit rows
    concentration: float
    mix_weights: np.ndarray  # (K,), sums to 1

    def __post_init__(self):
        mu = _frozen_array(self.kernels)
        pi = _frozen_array(self.mix_weights)
        if mu.ndim != 2 or min(mu.shape) < 1:
            raise ValidationError(f"kernels must be (K, D), got {mu.shape}")
        if pi.shape != (mu.shape[0],):
            raise ValidationError(f"mix weights shape {pi.shape} does not match K={mu.shape[0]}")
        require_finite(mu, "kernels")
        require_finite(pi, "mix weights")
        norms = np.linalg.norm(mu, axis=1)
        if np.max(np.abs(norms - 1.0)) > UNIT_NORM_ATOL:
            raise ValidationError(f"kernel directions must be unit-norm within {UNIT_NORM_ATOL}")
        sigma = float(self.concentration)
        if not np.isfinite(sigma) or sigma < 0:
            raise ValidationError(f"concentration must be a finite nonnegative real, got {sigma}")
        if np.any(pi < 0):
            raise ValidationError("mix weights must be nonnegative")
        if abs(float(pi.sum()) - 1.0) > 1e-9:
            raise ValidationError(f"mix weights must sum to 1 within 1e-9, got {float(pi.sum()):.12f}")
        object.__setattr__(self, "kernels", mu)
        object.__setattr__(self, "mix_weights", pi)
        object.__setattr__(self, "concentration", sigma)

    @property
    def k(self):
        return self.kernels.shape[0]

    @property
    def dim(self):
        return self.kernels.shape[1]


@dataclass(frozen=True)
class LikelihoodMap:
    """Per-position, per-kernel mixture responses pi_k * exp(sigma * mu_k.f_a)."""

    values: np.ndarray  # (H, W, K)

    def __post_init__(self):
        arr = _frozen_array(self.values)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"likelihood map must be (H, W, K), got {arr.shape}")
        require_finite(arr, "likelihood map")
        object.__setattr__(self, "values", arr)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass(frozen=True)
class OcclusionMask:
    """Per-position occlusion indicators; True marks an occluded position."""

    values: np.ndarray  # (H, W) bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = _frozen_array(self.values, dtype=bool)
        if arr.ndim != 2:
            raise ValidationError(f"occlusion mask must be (H, W), got {arr.shape}")
        object.__setattr__(self, "values", arr)

    @property
    def fraction(self):
        return float(np.mean(self.values))
