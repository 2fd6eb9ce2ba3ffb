"""Small numerical helpers shared across the package.

Everything runs in float64. Sums over exponentials always go through
:func:`logsumexp`; raw ``exp`` of concentration-scaled cosines is only ever
taken where the result is itself the quantity of interest.
"""

import numpy as np

from .errors import NumericalError, ValidationError

UNIT_NORM_ATOL = 1e-6


def logsumexp(x, axis=None, keepdims=False):
    """Stable log(sum(exp(x))) along ``axis``; tolerates -inf entries."""
    x = np.asarray(x, dtype=np.float64)
    hi = np.max(x, axis=axis, keepdims=True)
    hi = np.where(np.isfinite(hi), hi, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - hi), axis=axis, keepdims=True)) + hi
    if keepdims:
        return out
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(x, axis=-1):
    """Row-stochastic exp-normalization computed in the log domain."""
    x = np.asarray(x, dtype=np.float64)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def require_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


def as_unit_rows(features, what="features", atol=UNIT_NORM_ATOL):
    """Validate and return an (n, d) float64 array of unit-norm rows."""
    x = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValidationError(f"{what}: expected a 2-D array, got shape {x.shape}")
    require_finite(x, what)
    norms = np.linalg.norm(x, axis=1)
    if x.shape[0] and np.max(np.abs(norms - 1.0)) > atol:
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValidationError(f"{what}: rows must be unit-norm within {atol} (off by {worst:.3g})")
    return x


def normalize_rows(a, what="vectors"):
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(norms < 1e-300):
        raise NumericalError(f"cannot normalize near-zero {what}")
    return a / norms
