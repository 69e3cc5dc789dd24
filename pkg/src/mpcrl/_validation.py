"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DomainError

N_STATE = 5


def check_state(x, name="x"):
    """Return ``x`` as a float array whose last axis has length 5.

    Accepts a single state ``(5,)`` or a batch ``(n, 5)``. Raises
    :class:`DomainError` on non-finite entries.
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim not in (1, 2) or arr.shape[-1] != N_STATE:
        raise DomainError(f"{name} must have shape (5,) or (n, 5), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def check_states(X, name="X"):
    """Validate a 2-D batch of states, sklearn style."""
    try:
        X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    except ValueError as exc:
        raise DomainError(f"{name}: {exc}") from exc
    if X.shape[1] != N_STATE:
        raise DomainError(f"{name} must have 5 columns, got {X.shape[1]}")
    return X


def check_scalar_finite(value, name):
    value = float(value)
    if not np.isfinite(value):
        raise DomainError(f"{name} must be finite, got {value}")
    return value
